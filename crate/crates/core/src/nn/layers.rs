//! Parameter storage, initialization, common layers and the Adam update.

use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{EnhanceError, Result};
use crate::nn::tape::{Arr, Gradients, NodeId, Tape};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct ParamId(usize);

struct Param {
    name: String,
    value: Arr,
    moment1: Arr,
    moment2: Arr,
}

/// Owns all trainable arrays of a network plus their optimizer state.
/// Every iteration registers the parameters on a fresh tape.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

/// Mapping from parameter handles to the leaf nodes of one tape.
pub struct Registered {
    ids: Vec<NodeId>,
}

impl Registered {
    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }

    pub fn node_by_index(&self, i: usize) -> NodeId {
        self.ids[i]
    }

    /// Builds a registration from explicit leaf ids, in store order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Registered { ids }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            value,
            moment1: m,
            moment2: v,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, p: ParamId) -> &Arr {
        &self.params[p.0].value
    }

    pub fn set_value(&mut self, p: ParamId, v: Arr) {
        assert_eq!(self.params[p.0].value.shape(), v.shape());
        self.params[p.0].value = v;
    }

    pub fn value_by_index(&self, i: usize) -> &Arr {
        &self.params[i].value
    }

    pub fn set_value_by_index(&mut self, i: usize, v: Arr) {
        assert_eq!(self.params[i].value.shape(), v.shape());
        self.params[i].value = v;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Registered {
        Registered {
            ids: self.params.iter().map(|p| tape.var(p.value.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (frozen network).
    pub fn register_frozen(&self, tape: &mut Tape) -> Registered {
        Registered {
            ids: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    /// One Adam step at the given rate; parameters without a gradient on
    /// this tape are left untouched.
    pub fn adam_step(&mut self, reg: &Registered, grads: &Gradients, lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, param) in self.params.iter_mut().enumerate() {
            let Some(g) = grads.get(reg.ids[i]) else { continue };
            ndarray::Zip::from(&mut param.moment1)
                .and(g)
                .for_each(|m, &gv| *m = BETA1 * *m + (1.0 - BETA1) * gv);
            ndarray::Zip::from(&mut param.moment2)
                .and(g)
                .for_each(|v, &gv| *v = BETA2 * *v + (1.0 - BETA2) * gv * gv);
            ndarray::Zip::from(&mut param.value)
                .and(&param.moment1)
                .and(&param.moment2)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                });
        }
    }

    /// Serializes parameter names and raw f64 data after a magic string.
    pub fn write_archive<W: Write>(&self, out: &mut W, magic: &[u8], config_json: &str) -> std::io::Result<()> {
        out.write_all(magic)?;
        let cj = config_json.as_bytes();
        out.write_all(&(cj.len() as u32).to_le_bytes())?;
        out.write_all(cj)?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let nb = p.name.as_bytes();
            out.write_all(&(nb.len() as u32).to_le_bytes())?;
            out.write_all(nb)?;
            out.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.value.as_slice().expect("params are standard layout") {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads an archive written by [`ParamStore::write_archive`]; returns
    /// the embedded config JSON and fills values into `self` by name.
    /// The name sets must match exactly.
    pub fn read_archive<R: Read>(&mut self, inp: &mut R, magic: &[u8]) -> Result<String> {
        let fmt = |m: &str| EnhanceError::Format(m.to_string());
        let mut got_magic = vec![0u8; magic.len()];
        inp.read_exact(&mut got_magic)
            .map_err(|_| fmt("truncated checkpoint"))?;
        if got_magic != magic {
            return Err(fmt(&format!(
                "checkpoint magic mismatch: expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut u32buf = [0u8; 4];
        inp.read_exact(&mut u32buf).map_err(|_| fmt("truncated checkpoint"))?;
        let cj_len = u32::from_le_bytes(u32buf) as usize;
        let mut cj = vec![0u8; cj_len];
        inp.read_exact(&mut cj).map_err(|_| fmt("truncated checkpoint"))?;
        let config_json =
            String::from_utf8(cj).map_err(|_| fmt("checkpoint config is not utf-8"))?;
        inp.read_exact(&mut u32buf).map_err(|_| fmt("truncated checkpoint"))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        if count != self.params.len() {
            return Err(fmt(&format!(
                "checkpoint holds {count} parameters, network expects {}",
                self.params.len()
            )));
        }
        let mut loaded = std::collections::BTreeMap::new();
        for _ in 0..count {
            inp.read_exact(&mut u32buf).map_err(|_| fmt("truncated checkpoint"))?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut nb = vec![0u8; name_len];
            inp.read_exact(&mut nb).map_err(|_| fmt("truncated checkpoint"))?;
            let name = String::from_utf8(nb).map_err(|_| fmt("bad parameter name"))?;
            inp.read_exact(&mut u32buf).map_err(|_| fmt("truncated checkpoint"))?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut dims = Vec::with_capacity(ndim);
            let mut u64buf = [0u8; 8];
            for _ in 0..ndim {
                inp.read_exact(&mut u64buf).map_err(|_| fmt("truncated checkpoint"))?;
                dims.push(u64::from_le_bytes(u64buf) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                inp.read_exact(&mut u64buf).map_err(|_| fmt("truncated checkpoint"))?;
                data.push(f64::from_le_bytes(u64buf));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|_| fmt("inconsistent parameter shape"))?;
            loaded.insert(name, arr);
        }
        for p in &mut self.params {
            let arr = loaded.remove(&p.name).ok_or_else(|| {
                fmt(&format!("checkpoint is missing parameter `{}`", p.name))
            })?;
            if arr.shape() != p.value.shape() {
                return Err(fmt(&format!(
                    "parameter `{}` shape mismatch: {:?} vs {:?}",
                    p.name,
                    arr.shape(),
                    p.value.shape()
                )));
            }
            p.value = arr;
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(fmt(&format!("checkpoint has unknown parameter `{name}`")));
        }
        Ok(config_json)
    }
}

/// Weight initialization modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Kaiming normal scaled by fan-in; biases zero.
    He,
    /// All zeros (used for residual prediction heads).
    Zero,
}

pub fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
    for e in a.iter_mut() {
        // Box-Muller from two uniforms keeps the stream layout obvious.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        *e = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
    a
}

/// Square same-padded convolution layer.
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = match init {
            Init::He => he_init(rng, &[cout, cin, k, k], cin * k * k),
            Init::Zero => ArrayD::zeros(IxDyn(&[cout, cin, k, k])),
        };
        let b = ArrayD::zeros(IxDyn(&[cout]));
        Conv2dLayer {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), b),
            stride,
        }
    }

    pub fn apply(&self, t: &mut Tape, reg: &Registered, x: NodeId) -> NodeId {
        t.conv2d(x, reg.node(self.w), reg.node(self.b), self.stride)
    }
}

/// Channel attention gate: a shared two-layer MLP over average- and
/// max-pooled descriptors, fused by summation and a sigmoid.
pub struct ChannelGate {
    fc1: Conv2dLayer,
    fc2: Conv2dLayer,
}

impl ChannelGate {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels % reduction != 0 {
            return Err(EnhanceError::Config(format!(
                "gate reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelGate {
            fc1: Conv2dLayer::new(ps, &format!("{name}.fc1"), channels, hidden, 1, 1, Init::He, rng),
            fc2: Conv2dLayer::new(ps, &format!("{name}.fc2"), hidden, channels, 1, 1, Init::He, rng),
        })
    }

    /// Returns the `[N, C, 1, 1]` attention weights in (0, 1).
    pub fn weights(&self, t: &mut Tape, reg: &Registered, x: NodeId) -> NodeId {
        let ap = t.global_avg_pool(x);
        let mp = t.global_max_pool(x);
        let fa = {
            let h = self.fc1.apply(t, reg, ap);
            let h = t.relu(h);
            self.fc2.apply(t, reg, h)
        };
        let fm = {
            let h = self.fc1.apply(t, reg, mp);
            let h = t.relu(h);
            self.fc2.apply(t, reg, h)
        };
        let s = t.add(fa, fm);
        t.sigmoid(s)
    }

    /// Applies the gate to its input.
    pub fn apply(&self, t: &mut Tape, reg: &Registered, x: NodeId) -> NodeId {
        let w = self.weights(t, reg, x);
        t.mul_channels(x, w)
    }
}

/// Two-convolution residual block: `x + conv(relu(conv(x)))`.
pub struct ResBlock {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            c1: Conv2dLayer::new(ps, &format!("{name}.c1"), channels, channels, 3, 1, Init::He, rng),
            c2: Conv2dLayer::new(ps, &format!("{name}.c2"), channels, channels, 3, 1, Init::He, rng),
        }
    }

    pub fn apply(&self, t: &mut Tape, reg: &Registered, x: NodeId) -> NodeId {
        let h = self.c1.apply(t, reg, x);
        let h = t.relu(h);
        let h = self.c2.apply(t, reg, h);
        t.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_parameters_toward_lower_loss() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ps.add("w", he_init(&mut rng, &[1, 1, 3, 3], 9));
        let target = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 0.5);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let mut t = Tape::new();
            let reg = ps.register(&mut t);
            let tgt = t.constant(target.clone());
            let loss = t.mse_loss(reg.node(w), tgt);
            let val = t.scalar_value(loss);
            let g = t.backward(loss).unwrap();
            ps.adam_step(&reg, &g, 0.05);
            last = val;
        }
        assert!(last < 1e-2, "loss should shrink, got {last}");
    }

    #[test]
    fn archive_roundtrip_is_bitwise() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ps.add("a.w", he_init(&mut rng, &[2, 3, 3, 3], 27));
        ps.add("a.b", he_init(&mut rng, &[2], 2));
        let mut buf = Vec::new();
        ps.write_archive(&mut buf, b"TEST.v1\n", "{\"x\":1}").unwrap();

        let mut ps2 = ParamStore::new();
        ps2.add("a.w", ArrayD::zeros(IxDyn(&[2, 3, 3, 3])));
        ps2.add("a.b", ArrayD::zeros(IxDyn(&[2])));
        let cfg = ps2.read_archive(&mut buf.as_slice(), b"TEST.v1\n").unwrap();
        assert_eq!(cfg, "{\"x\":1}");
        for (a, b) in ps.params.iter().zip(ps2.params.iter()) {
            assert!(a
                .value
                .iter()
                .zip(b.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn archive_rejects_wrong_magic() {
        let mut ps = ParamStore::new();
        ps.add("w", ArrayD::zeros(IxDyn(&[1])));
        let mut buf = Vec::new();
        ps.write_archive(&mut buf, b"AAAA.v1\n", "{}").unwrap();
        let mut ps2 = ParamStore::new();
        ps2.add("w", ArrayD::zeros(IxDyn(&[1])));
        let err = ps2.read_archive(&mut buf.as_slice(), b"BBBB.v1\n").unwrap_err();
        assert!(matches!(err, EnhanceError::Format(_)));
    }

    #[test]
    fn gate_outputs_open_interval() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gate = ChannelGate::new(&mut ps, "g", 8, 4, &mut rng).unwrap();
        let mut t = Tape::new();
        let reg = ps.register(&mut t);
        let x = t.constant(he_init(&mut rng, &[2, 8, 4, 4], 1));
        let w = gate.weights(&mut t, &reg, x);
        assert!(t.value(w).iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(t.shape(w), [2, 8, 1, 1]);
    }

    #[test]
    fn gate_rejects_bad_reduction() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(ChannelGate::new(&mut ps, "g", 6, 4, &mut rng).is_err());
    }
}
