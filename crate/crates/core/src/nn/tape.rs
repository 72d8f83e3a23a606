//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! A [`Tape`] is an append-only graph: every operation pushes one node
//! holding its value, so node ids are already in topological order and
//! [`Tape::backward`] is a single reverse sweep. Convolutions run as
//! im2col + GEMM, parallelized over the batch with per-sample outputs so
//! repeated runs are bitwise identical.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix4, IxDyn};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{EnhanceError, Result};
use crate::kernels;

pub type Arr = ArrayD<f64>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    AvgPool(NodeId, usize),
    UpsampleBilinear(NodeId, usize),
    GlobalAvgPool(NodeId),
    GlobalMaxPool(NodeId, Vec<usize>),
    MulChannels {
        x: NodeId,
        gate: NodeId,
    },
    ConcatChannels(Vec<NodeId>),
    HaarBand(NodeId, usize),
    HaarInverse([NodeId; 4]),
    MeanAll(NodeId),
    L1Loss(NodeId, NodeId),
    MseLoss(NodeId, NodeId),
    SpectralL1(NodeId, NodeId),
    EdgeTv {
        x: NodeId,
        weights_h: Arr,
        weights_v: Arr,
    },
    Exposure {
        x: NodeId,
        target: f64,
        patch: usize,
    },
    WeightedScalarSum(Vec<(f64, NodeId)>),
}

struct Node {
    value: Arr,
    requires_grad: bool,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`]; only leaf nodes
/// retain their gradient.
pub struct Gradients {
    slots: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Arr> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims4(a: &Arr) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.ndim(), 0, "expected a scalar node");
        v[IxDyn(&[])]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Arr, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Inserts a constant; gradients never flow into it.
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Inserts a differentiable leaf (a parameter).
    pub fn var(&mut self, value: Arr) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, self.rg(a) || self.rg(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, self.rg(a) || self.rg(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, self.rg(a) || self.rg(b), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "div");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, self.rg(a) || self.rg(b), Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, self.rg(a), Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, self.rg(a), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, self.rg(a), Op::Sigmoid(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, self.rg(a), Op::Clamp(a, lo, hi))
    }

    /// Same-padded square convolution over `[N, C, H, W]`.
    /// Kernel must be odd-sized; stride 1 or 2.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let (n, cin, h, wd) = dims4(&self.nodes[x.0].value);
        let (cout, cin2, k, k2) = dims4(&self.nodes[w.0].value);
        assert_eq!(cin, cin2, "conv2d: input channels mismatch");
        assert_eq!(k, k2, "conv2d: kernel must be square");
        assert_eq!(k % 2, 1, "conv2d: kernel must be odd");
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        assert_eq!(self.nodes[b.0].value.shape(), [cout], "conv2d: bias shape");
        let pad = (k - 1) / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let _ = (n, ho, wo);
        let v = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
        );
        self.push(
            v,
            self.rg(x) || self.rg(w) || self.rg(b),
            Op::Conv2d { x, w, b, stride },
        )
    }

    /// Non-overlapping average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool: dims not divisible");
        let mut out = Array4::<f64>::zeros((n, c, h / k, w / k));
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        for i in 0..n {
            for ch in 0..c {
                kernels::avg_pool2d(
                    xv.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                    k,
                    out.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                );
            }
        }
        self.push(out.into_dyn(), self.rg(x), Op::AvgPool(x, k))
    }

    /// Half-pixel-center bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> NodeId {
        assert!(factor >= 1);
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let mut out = Array4::<f64>::zeros((n, c, h * factor, w * factor));
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        for i in 0..n {
            for ch in 0..c {
                kernels::upsample_bilinear(
                    xv.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                    factor,
                    out.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                );
            }
        }
        self.push(out.into_dyn(), self.rg(x), Op::UpsampleBilinear(x, factor))
    }

    /// Spatial mean per (sample, channel); output `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, 1, 1));
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.index_axis(Axis(0), i).index_axis_move(Axis(0), ch);
                out[[i, ch, 0, 0]] = plane.sum() / (h * w) as f64;
            }
        }
        self.push(out.into_dyn(), self.rg(x), Op::GlobalAvgPool(x))
    }

    /// Spatial max per (sample, channel); first max wins ties.
    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, 1, 1));
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.index_axis(Axis(0), i).index_axis_move(Axis(0), ch);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for (idx, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                let _ = (h, w);
                out[[i, ch, 0, 0]] = best;
                argmax[i * c + ch] = best_idx;
            }
        }
        self.push(out.into_dyn(), self.rg(x), Op::GlobalMaxPool(x, argmax))
    }

    /// Broadcast-multiplies `x: [N,C,H,W]` by a per-channel gate `[N,C,1,1]`.
    pub fn mul_channels(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let gs = self.nodes[gate.0].value.shape();
        assert_eq!(gs, [n, c, 1, 1], "mul_channels: gate must be [N,C,1,1]");
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let gv = self.nodes[gate.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let g = gv[[i, ch, 0, 0]];
                let plane = xv.index_axis(Axis(0), i).index_axis_move(Axis(0), ch);
                let mut op = out.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch);
                op.assign(&plane.mapv(|v| v * g));
            }
        }
        self.push(
            out.into_dyn(),
            self.rg(x) || self.rg(gate),
            Op::MulChannels { x, gate },
        )
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (n, _, h, w) = dims4(&self.nodes[xs[0].0].value);
        let mut ctot = 0;
        for &x in xs {
            let (ni, ci, hi, wi) = dims4(&self.nodes[x.0].value);
            assert_eq!((ni, hi, wi), (n, h, w), "concat_channels: spatial/batch mismatch");
            ctot += ci;
        }
        let mut out = Array4::<f64>::zeros((n, ctot, h, w));
        let mut off = 0;
        for &x in xs {
            let (_, ci, _, _) = dims4(&self.nodes[x.0].value);
            let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
            out.slice_mut(ndarray::s![.., off..off + ci, .., ..]).assign(&xv);
            off += ci;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(out.into_dyn(), rg, Op::ConcatChannels(xs.to_vec()))
    }

    /// One Haar analysis band (0=LL, 1=LH, 2=HL, 3=HH) at half resolution.
    pub fn haar_band(&mut self, x: NodeId, band: usize) -> NodeId {
        assert!(band < 4);
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        assert!(h % 2 == 0 && w % 2 == 0, "haar_band: dims must be even");
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, h / 2, w / 2));
        for i in 0..n {
            for ch in 0..c {
                kernels::haar_band(
                    xv.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                    band,
                    out.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                );
            }
        }
        self.push(out.into_dyn(), self.rg(x), Op::HaarBand(x, band))
    }

    /// Haar synthesis from four equally shaped bands; output is 2x size.
    pub fn haar_inverse(&mut self, bands: [NodeId; 4]) -> NodeId {
        let (n, c, hb, wb) = dims4(&self.nodes[bands[0].0].value);
        for &b in &bands {
            assert_eq!(
                self.nodes[b.0].value.shape(),
                [n, c, hb, wb],
                "haar_inverse: band shape mismatch"
            );
        }
        let mut out = Array4::<f64>::zeros((n, c, hb * 2, wb * 2));
        for (k, &b) in bands.iter().enumerate() {
            let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix4>().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    kernels::haar_band_adjoint(
                        bv.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                        k,
                        out.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                    );
                }
            }
        }
        let rg = bands.iter().any(|&b| self.rg(b));
        self.push(out.into_dyn(), rg, Op::HaarInverse(bands))
    }

    /// Mean over every element; returns a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x.0].value.len() as f64;
        let v = scalar(self.nodes[x.0].value.sum() / len);
        self.push(v, self.rg(x), Op::MeanAll(x))
    }

    /// Mean absolute difference over every element.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "l1_loss");
        let len = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        self.push(scalar(s / len), self.rg(a) || self.rg(b), Op::L1Loss(a, b))
    }

    /// Mean squared difference over every element.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mse_loss");
        let len = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(scalar(s / len), self.rg(a) || self.rg(b), Op::MseLoss(a, b))
    }

    /// Mean L1 distance between unnormalized 2D Fourier transforms,
    /// summing |Re| and |Im| of the difference separately.
    pub fn spectral_l1(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.binary_same_shape(pred, target, "spectral_l1");
        let v = spectral_l1_value(&self.nodes[pred.0].value, &self.nodes[target.0].value);
        self.push(
            scalar(v),
            self.rg(pred) || self.rg(target),
            Op::SpectralL1(pred, target),
        )
    }

    /// Edge-weighted total variation. Weights come from a guide image and
    /// are constants: `weights_h: [N, H, W-1]`, `weights_v: [N, H-1, W]`.
    pub fn edge_tv(&mut self, x: NodeId, weights_h: Arr, weights_v: Arr) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        assert_eq!(weights_h.shape(), [n, h, w - 1], "edge_tv: horizontal weights");
        assert_eq!(weights_v.shape(), [n, h - 1, w], "edge_tv: vertical weights");
        let _ = c;
        let v = edge_tv_value(&self.nodes[x.0].value, &weights_h, &weights_v);
        self.push(
            scalar(v),
            self.rg(x),
            Op::EdgeTv {
                x,
                weights_h,
                weights_v,
            },
        )
    }

    /// Mean absolute deviation of per-patch gray means from `target`,
    /// over non-overlapping `patch x patch` regions.
    pub fn exposure(&mut self, x: NodeId, target: f64, patch: usize) -> NodeId {
        let (_, _, h, w) = dims4(&self.nodes[x.0].value);
        assert!(
            patch >= 1 && h % patch == 0 && w % patch == 0,
            "exposure: dims must divide by patch"
        );
        let v = exposure_value(&self.nodes[x.0].value, target, patch);
        self.push(scalar(v), self.rg(x), Op::Exposure { x, target, patch })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_scalar_sum(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        assert!(!terms.is_empty());
        let mut v = 0.0;
        let mut rg = false;
        for &(wgt, id) in terms {
            assert_eq!(self.nodes[id.0].value.ndim(), 0, "weighted sum needs scalars");
            v += wgt * self.nodes[id.0].value[IxDyn(&[])];
            rg |= self.rg(id);
        }
        self.push(scalar(v), rg, Op::WeightedScalarSum(terms.to_vec()))
    }

    /// Reverse sweep from a scalar loss node; leaf gradients survive.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.ndim() != 0 {
            return Err(EnhanceError::Shape("backward needs a scalar loss".into()));
        }
        let mut slots: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                slots[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            self.propagate(id, &g, &mut slots);
        }
        Ok(Gradients { slots })
    }

    fn propagate(&self, id: usize, g: &Arr, slots: &mut [Option<Arr>]) {
        let gs = || g[IxDyn(&[])];
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.acc_if(slots, *a, || g.clone());
                self.acc_if(slots, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(slots, *a, || g.clone());
                self.acc_if(slots, *b, || g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc_if(slots, *a, || g * &self.nodes[b.0].value);
                self.acc_if(slots, *b, || g * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                self.acc_if(slots, *a, || g / bv);
                self.acc_if(slots, *b, || {
                    let av = &self.nodes[a.0].value;
                    let mut d = g * av;
                    d.zip_mut_with(bv, |q, &den| *q = -*q / (den * den));
                    d
                });
            }
            Op::Scale(a, c) => self.acc_if(slots, *a, || g.mapv(|v| v * c)),
            Op::Relu(a) => self.acc_if(slots, *a, || {
                let mut d = g.clone();
                d.zip_mut_with(&self.nodes[a.0].value, |q, &x| {
                    if x <= 0.0 {
                        *q = 0.0
                    }
                });
                d
            }),
            Op::Sigmoid(a) => self.acc_if(slots, *a, || {
                let y = &self.nodes[id].value;
                let mut d = g.clone();
                d.zip_mut_with(y, |q, &s| *q *= s * (1.0 - s));
                d
            }),
            Op::Clamp(a, lo, hi) => self.acc_if(slots, *a, || {
                let mut d = g.clone();
                d.zip_mut_with(&self.nodes[a.0].value, |q, &x| {
                    if x < *lo || x > *hi {
                        *q = 0.0
                    }
                });
                d
            }),
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    *stride,
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                );
                if let Some(dx) = dx {
                    self.acc_if(slots, *x, || dx);
                }
                if let Some(dw) = dw {
                    self.acc_if(slots, *w, || dw);
                }
                if let Some(db) = db {
                    self.acc_if(slots, *b, || db);
                }
            }
            Op::AvgPool(x, k) => self.acc_if(slots, *x, || {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        kernels::avg_pool2d_backward(
                            g4.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                            *k,
                            dx.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                        );
                    }
                }
                dx.into_dyn()
            }),
            Op::UpsampleBilinear(x, f) => self.acc_if(slots, *x, || {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        kernels::upsample_bilinear_backward(
                            g4.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                            *f,
                            dx.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                        );
                    }
                }
                dx.into_dyn()
            }),
            Op::GlobalAvgPool(x) => self.acc_if(slots, *x, || {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let inv = 1.0 / (h * w) as f64;
                for i in 0..n {
                    for ch in 0..c {
                        let gv = g4[[i, ch, 0, 0]] * inv;
                        dx.index_axis_mut(Axis(0), i)
                            .index_axis_move(Axis(0), ch)
                            .fill(gv);
                    }
                }
                dx.into_dyn()
            }),
            Op::GlobalMaxPool(x, argmax) => self.acc_if(slots, *x, || {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        let flat = argmax[i * c + ch];
                        dx[[i, ch, flat / w, flat % w]] += g4[[i, ch, 0, 0]];
                    }
                }
                dx.into_dyn()
            }),
            Op::MulChannels { x, gate } => {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gatev = self.nodes[gate.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                self.acc_if(slots, *x, || {
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = gatev[[i, ch, 0, 0]];
                            let gp = g4.index_axis(Axis(0), i).index_axis_move(Axis(0), ch);
                            let mut dp = dx.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch);
                            dp.assign(&gp.mapv(|v| v * gv));
                        }
                    }
                    dx.into_dyn()
                });
                self.acc_if(slots, *gate, || {
                    let mut dg = Array4::<f64>::zeros((n, c, 1, 1));
                    for i in 0..n {
                        for ch in 0..c {
                            let gp = g4.index_axis(Axis(0), i).index_axis_move(Axis(0), ch);
                            let xp = xv.index_axis(Axis(0), i).index_axis_move(Axis(0), ch);
                            dg[[i, ch, 0, 0]] = gp
                                .iter()
                                .zip(xp.iter())
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    dg.into_dyn()
                });
            }
            Op::ConcatChannels(xs) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut off = 0;
                for &x in xs {
                    let (_, ci, _, _) = dims4(&self.nodes[x.0].value);
                    let slice = g4.slice(ndarray::s![.., off..off + ci, .., ..]);
                    self.acc_if(slots, x, || slice.to_owned().into_dyn());
                    off += ci;
                }
            }
            Op::HaarBand(x, band) => self.acc_if(slots, *x, || {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        kernels::haar_band_adjoint(
                            g4.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                            *band,
                            dx.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                        );
                    }
                }
                dx.into_dyn()
            }),
            Op::HaarInverse(bands) => {
                for (k, &b) in bands.iter().enumerate() {
                    self.acc_if(slots, b, || {
                        let (n, c, hb, wb) = dims4(&self.nodes[b.0].value);
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let mut db = Array4::<f64>::zeros((n, c, hb, wb));
                        for i in 0..n {
                            for ch in 0..c {
                                kernels::haar_band(
                                    g4.index_axis(Axis(0), i).index_axis(Axis(0), ch),
                                    k,
                                    db.index_axis_mut(Axis(0), i).index_axis_move(Axis(0), ch),
                                );
                            }
                        }
                        db.into_dyn()
                    });
                }
            }
            Op::MeanAll(x) => self.acc_if(slots, *x, || {
                let len = self.nodes[x.0].value.len() as f64;
                ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs() / len)
            }),
            Op::L1Loss(a, b) => {
                let len = self.nodes[a.0].value.len() as f64;
                let make = |sign: f64| {
                    let mut d = self.nodes[a.0].value.clone();
                    d.zip_mut_with(&self.nodes[b.0].value, |x, &y| {
                        *x = sign * (*x - y).signum() * if *x == y { 0.0 } else { 1.0 }
                    });
                    d.mapv(|v| v * gs() / len)
                };
                self.acc_if(slots, *a, || make(1.0));
                self.acc_if(slots, *b, || make(-1.0));
            }
            Op::MseLoss(a, b) => {
                let len = self.nodes[a.0].value.len() as f64;
                let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                self.acc_if(slots, *a, || diff.mapv(|v| 2.0 * v * gs() / len));
                self.acc_if(slots, *b, || diff.mapv(|v| -2.0 * v * gs() / len));
            }
            Op::SpectralL1(pred, target) => {
                let d = spectral_l1_grad(
                    &self.nodes[pred.0].value,
                    &self.nodes[target.0].value,
                    gs(),
                );
                self.acc_if(slots, *pred, || d.clone());
                self.acc_if(slots, *target, || d.mapv(|v| -v));
            }
            Op::EdgeTv {
                x,
                weights_h,
                weights_v,
            } => self.acc_if(slots, *x, || {
                edge_tv_grad(&self.nodes[x.0].value, weights_h, weights_v, gs())
            }),
            Op::Exposure { x, target, patch } => self.acc_if(slots, *x, || {
                exposure_grad(&self.nodes[x.0].value, *target, *patch, gs())
            }),
            Op::WeightedScalarSum(terms) => {
                for &(wgt, t) in terms {
                    self.acc_if(slots, t, || scalar(wgt * gs()));
                }
            }
        }
    }

    fn acc_if(&self, slots: &mut [Option<Arr>], target: NodeId, make: impl FnOnce() -> Arr) {
        if !self.rg(target) {
            return;
        }
        let delta = make();
        match &mut slots[target.0] {
            Some(a) => *a += &delta,
            slot => *slot = Some(delta),
        }
    }
}

fn im2col(
    x: ArrayView3<f64>,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((cin * k * k, ho * wo));
    let xs = x.as_slice().expect("sample view must be contiguous");
    let cs = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for u in 0..k {
            for v in 0..k {
                let r = (c * k + u) * k + v;
                let rbase = r * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let obase = rbase + oy * wo;
                    let min_ox = if pad > v { (pad - v).div_ceil(stride) } else { 0 };
                    if min_ox >= wo || w + pad <= v {
                        continue;
                    }
                    let max_ox = ((w - 1 + pad - v) / stride).min(wo - 1);
                    let mut ix = min_ox * stride + v - pad;
                    for ox in min_ox..=max_ox {
                        cs[obase + ox] = xs[xrow + ix];
                        ix += stride;
                    }
                }
            }
        }
    }
    col
}

fn col2im_acc(
    dcol: &Array2<f64>,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    mut dx: ArrayViewMut3<f64>,
) {
    let (cin, h, w) = dx.dim();
    let ds = dcol.as_slice().unwrap();
    let xs = dx.as_slice_mut().expect("sample view must be contiguous");
    for c in 0..cin {
        for u in 0..k {
            for v in 0..k {
                let r = (c * k + u) * k + v;
                let rbase = r * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let obase = rbase + oy * wo;
                    let min_ox = if pad > v { (pad - v).div_ceil(stride) } else { 0 };
                    if min_ox >= wo || w + pad <= v {
                        continue;
                    }
                    let max_ox = ((w - 1 + pad - v) / stride).min(wo - 1);
                    let mut ix = min_ox * stride + v - pad;
                    for ox in min_ox..=max_ox {
                        xs[xrow + ix] += ds[obase + ox];
                        ix += stride;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Arr, w: &Arr, b: &Arr, stride: usize) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cin, h, wd) = x4.dim();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let (cout, _, k, _) = w4.dim();
    let pad = (k - 1) / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let wmat = w.to_shape((cout, cin * k * k)).unwrap();
    let bias = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    let mut samples: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
    samples.par_iter_mut().enumerate().for_each(|(i, ov)| {
        let col = im2col(x4.index_axis(Axis(0), i), k, pad, stride, ho, wo);
        let mut omat = ov.view_mut().into_shape_with_order((cout, ho * wo)).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &wmat.view(), &col.view(), 0.0, &mut omat);
        for (c, mut row) in omat.axis_iter_mut(Axis(0)).enumerate() {
            row += bias[c];
        }
    });
    drop(samples);
    out.into_dyn()
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Arr,
    w: &Arr,
    g: &Arr,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Arr>, Option<Arr>, Option<Arr>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cin, h, wd) = x4.dim();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let (cout, _, k, _) = w4.dim();
    let pad = (k - 1) / 2;
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (_, _, ho, wo) = g4.dim();
    let wmat = w.to_shape((cout, cin * k * k)).unwrap();

    let mut dx = if need_dx {
        Some(Array4::<f64>::zeros((n, cin, h, wd)))
    } else {
        None
    };

    let per_sample: Vec<(Option<Array2<f64>>, Option<Array1<f64>>)> = match &mut dx {
        Some(dx_arr) => {
            let mut dx_samples: Vec<_> = dx_arr.axis_iter_mut(Axis(0)).collect();
            dx_samples
                .par_iter_mut()
                .enumerate()
                .map(|(i, dxv)| {
                    let gmat = g4
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap();
                    let mut dcol = Array2::<f64>::zeros((cin * k * k, ho * wo));
                    ndarray::linalg::general_mat_mul(
                        1.0,
                        &wmat.t(),
                        &gmat,
                        0.0,
                        &mut dcol.view_mut(),
                    );
                    col2im_acc(&dcol, k, pad, stride, ho, wo, dxv.view_mut());
                    sample_weight_grads(&x4, &gmat, i, k, pad, stride, ho, wo, cin, cout, need_dw)
                })
                .collect()
        }
        None => (0..n)
            .into_par_iter()
            .map(|i| {
                let gmat = g4
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((cout, ho * wo))
                    .unwrap();
                sample_weight_grads(&x4, &gmat, i, k, pad, stride, ho, wo, cin, cout, need_dw)
            })
            .collect(),
    };

    let (dw, db) = if need_dw {
        let mut dw = Array2::<f64>::zeros((cout, cin * k * k));
        let mut db = Array1::<f64>::zeros(cout);
        for (dwi, dbi) in per_sample {
            dw += &dwi.unwrap();
            db += &dbi.unwrap();
        }
        (
            Some(dw.into_shape_with_order((cout, cin, k, k)).unwrap().into_dyn()),
            Some(db.into_dyn()),
        )
    } else {
        (None, None)
    };
    (dx.map(|a| a.into_dyn()), dw, db)
}

#[allow(clippy::too_many_arguments)]
fn sample_weight_grads(
    x4: &ndarray::ArrayView4<f64>,
    gmat: &ArrayView2<f64>,
    i: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cin: usize,
    cout: usize,
    need_dw: bool,
) -> (Option<Array2<f64>>, Option<Array1<f64>>) {
    if !need_dw {
        return (None, None);
    }
    let col = im2col(x4.index_axis(Axis(0), i), k, pad, stride, ho, wo);
    let mut dw = Array2::<f64>::zeros((cout, cin * k * k));
    ndarray::linalg::general_mat_mul(1.0, gmat, &col.t(), 0.0, &mut dw.view_mut());
    let db = gmat.sum_axis(Axis(1));
    (Some(dw), Some(db))
}

fn fft2(plane: &mut Array2<Complex<f64>>) {
    let (h, w) = plane.dim();
    let mut planner = FftPlanner::new();
    {
        let row_fft = planner.plan_fft_forward(w);
        row_fft.process(plane.as_slice_mut().unwrap());
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            tmp[y] = plane[[y, x]];
        }
        col_fft.process(&mut tmp);
        for y in 0..h {
            plane[[y, x]] = tmp[y];
        }
    }
}

fn spectral_planes(pred: &Arr, target: &Arr) -> Vec<Array2<Complex<f64>>> {
    let p4 = pred.view().into_dimensionality::<Ix4>().unwrap();
    let t4 = target.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = p4.dim();
    let mut planes = Vec::with_capacity(n * c);
    for i in 0..n {
        for ch in 0..c {
            let mut plane = Array2::<Complex<f64>>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    plane[[y, x]] = Complex::new(p4[[i, ch, y, x]] - t4[[i, ch, y, x]], 0.0);
                }
            }
            fft2(&mut plane);
            planes.push(plane);
        }
    }
    planes
}

fn spectral_l1_value(pred: &Arr, target: &Arr) -> f64 {
    let norm = pred.len() as f64;
    let total: f64 = spectral_planes(pred, target)
        .iter()
        .map(|p| p.iter().map(|z| z.re.abs() + z.im.abs()).sum::<f64>())
        .sum();
    total / norm
}

/// Gradient of [`spectral_l1_value`] with respect to `pred`. The adjoint of
/// the unnormalized forward DFT applied to `s = sign(Re) + i sign(Im)` is
/// `conj(FFT(conj(s)))`; the real part is the input-space gradient.
fn spectral_l1_grad(pred: &Arr, target: &Arr, upstream: f64) -> Arr {
    let p4 = pred.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = p4.dim();
    let norm = pred.len() as f64;
    let planes = spectral_planes(pred, target);
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let diff = &planes[i * c + ch];
            let mut s = Array2::<Complex<f64>>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let z = diff[[y, x]];
                    let re = if z.re == 0.0 { 0.0 } else { z.re.signum() };
                    let im = if z.im == 0.0 { 0.0 } else { z.im.signum() };
                    // conj(s), ready for the adjoint evaluation below
                    s[[y, x]] = Complex::new(re, -im);
                }
            }
            fft2(&mut s);
            for y in 0..h {
                for x in 0..w {
                    // Re(conj(fft(conj(s)))) == Re(fft(conj(s)))
                    out[[i, ch, y, x]] = s[[y, x]].re * upstream / norm;
                }
            }
        }
    }
    out.into_dyn()
}

fn edge_tv_value(x: &Arr, wh: &Arr, wv: &Arr) -> f64 {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let mut total = 0.0;
    if w > 1 {
        let norm_h = (n * c * h * (w - 1)) as f64;
        let mut s = 0.0;
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w - 1 {
                        s += wh[[i, y, xx]] * (x4[[i, ch, y, xx]] - x4[[i, ch, y, xx + 1]]).abs();
                    }
                }
            }
        }
        total += s / norm_h;
    }
    if h > 1 {
        let norm_v = (n * c * (h - 1) * w) as f64;
        let mut s = 0.0;
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h - 1 {
                    for xx in 0..w {
                        s += wv[[i, y, xx]] * (x4[[i, ch, y, xx]] - x4[[i, ch, y + 1, xx]]).abs();
                    }
                }
            }
        }
        total += s / norm_v;
    }
    total
}

fn edge_tv_grad(x: &Arr, wh: &Arr, wv: &Arr, upstream: f64) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    if w > 1 {
        let norm_h = (n * c * h * (w - 1)) as f64;
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w - 1 {
                        let d = x4[[i, ch, y, xx]] - x4[[i, ch, y, xx + 1]];
                        if d == 0.0 {
                            continue;
                        }
                        let s = wh[[i, y, xx]] * d.signum() * upstream / norm_h;
                        dx[[i, ch, y, xx]] += s;
                        dx[[i, ch, y, xx + 1]] -= s;
                    }
                }
            }
        }
    }
    if h > 1 {
        let norm_v = (n * c * (h - 1) * w) as f64;
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h - 1 {
                    for xx in 0..w {
                        let d = x4[[i, ch, y, xx]] - x4[[i, ch, y + 1, xx]];
                        if d == 0.0 {
                            continue;
                        }
                        let s = wv[[i, y, xx]] * d.signum() * upstream / norm_v;
                        dx[[i, ch, y, xx]] += s;
                        dx[[i, ch, y + 1, xx]] -= s;
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

fn exposure_value(x: &Arr, target: f64, patch: usize) -> f64 {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let (gy, gx) = (h / patch, w / patch);
    let m = (gy * gx) as f64;
    let cell = (c * patch * patch) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for py in 0..gy {
            for px in 0..gx {
                let mut s = 0.0;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dxx in 0..patch {
                            s += x4[[i, ch, py * patch + dy, px * patch + dxx]];
                        }
                    }
                }
                total += (s / cell - target).abs();
            }
        }
    }
    total / (n as f64 * m)
}

fn exposure_grad(x: &Arr, target: f64, patch: usize, upstream: f64) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let (gy, gx) = (h / patch, w / patch);
    let m = (gy * gx) as f64;
    let cell = (c * patch * patch) as f64;
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for py in 0..gy {
            for px in 0..gx {
                let mut s = 0.0;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dxx in 0..patch {
                            s += x4[[i, ch, py * patch + dy, px * patch + dxx]];
                        }
                    }
                }
                let mean = s / cell;
                if mean == target {
                    continue;
                }
                let gval = (mean - target).signum() * upstream / (n as f64 * m * cell);
                for ch in 0..c {
                    for dy in 0..patch {
                        for dxx in 0..patch {
                            dx[[i, ch, py * patch + dy, px * patch + dxx]] += gval;
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
        for e in a.iter_mut() {
            *e = rng.random::<f64>() * 2.0 - 1.0;
        }
        a
    }

    /// Central finite differences against the tape gradient at sampled
    /// coordinates. `build` receives leaf ids in input order and returns
    /// the scalar loss id.
    fn fd_check(
        inputs: &[Arr],
        build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
        coords_per_input: usize,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|a| tape.var(a.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        for (wi, input) in inputs.iter().enumerate() {
            let g = grads.get(ids[wi]).expect("missing gradient");
            for _ in 0..coords_per_input {
                let flat = rng.random_range(0..input.len());
                let eval = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, a)| {
                            let mut a = a.clone();
                            if j == wi {
                                a.as_slice_mut().unwrap()[flat] += delta;
                            }
                            tape.var(a)
                        })
                        .collect();
                    let loss = build(&mut tape, &ids);
                    tape.scalar_value(loss)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom <= tol,
                    "input {wi} coord {flat}: fd={fd:.9e} tape={an:.9e}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_arr(&mut rng, &[2, 3, 4, 4]);
        let b = rand_arr(&mut rng, &[2, 3, 4, 4]).mapv(|v| v + 2.5);
        fd_check(
            &[a, b],
            &|t, ids| {
                let m = t.mul(ids[0], ids[1]);
                let d = t.div(ids[0], ids[1]);
                let s = t.sub(m, d);
                let r = t.sigmoid(s);
                let e = t.relu(r);
                t.mean_all(e)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr(&mut rng, &[2, 3, 6, 6]);
        let w = rand_arr(&mut rng, &[4, 3, 3, 3]);
        let b = rand_arr(&mut rng, &[4]);
        for stride in [1usize, 2] {
            fd_check(
                &[x.clone(), w.clone(), b.clone()],
                &move |t, ids| {
                    let y = t.conv2d(ids[0], ids[1], ids[2], stride);
                    let y = t.relu(y);
                    t.mean_all(y)
                },
                8,
                1e-6,
            );
        }
    }

    #[test]
    fn grad_conv2d_1x1_and_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&mut rng, &[1, 2, 8, 8]);
        let w1 = rand_arr(&mut rng, &[3, 2, 1, 1]);
        let b1 = rand_arr(&mut rng, &[3]);
        let w5 = rand_arr(&mut rng, &[2, 3, 5, 5]);
        let b5 = rand_arr(&mut rng, &[2]);
        fd_check(
            &[x, w1, b1, w5, b5],
            &|t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1);
                let y = t.conv2d(y, ids[3], ids[4], 1);
                t.mean_all(y)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn grad_pool_upsample_haar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr(&mut rng, &[1, 2, 8, 8]);
        fd_check(
            &[x],
            &|t, ids| {
                let p = t.avg_pool(ids[0], 2);
                let u = t.upsample_bilinear(p, 2);
                let ll = t.haar_band(u, 0);
                let lh = t.haar_band(u, 1);
                let hl = t.haar_band(u, 2);
                let hh = t.haar_band(u, 3);
                let r = t.haar_inverse([ll, lh, hl, hh]);
                let d = t.sub(r, ids[0]);
                t.mse_loss(d, ids[0])
            },
            10,
            1e-6,
        );
    }

    #[test]
    fn grad_attention_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&mut rng, &[2, 4, 4, 4]);
        let w = rand_arr(&mut rng, &[4, 4, 1, 1]);
        let b = rand_arr(&mut rng, &[4]);
        fd_check(
            &[x, w, b],
            &|t, ids| {
                let ap = t.global_avg_pool(ids[0]);
                let mp = t.global_max_pool(ids[0]);
                let fa = t.conv2d(ap, ids[1], ids[2], 1);
                let fm = t.conv2d(mp, ids[1], ids[2], 1);
                let s = t.add(fa, fm);
                let gate = t.sigmoid(s);
                let y = t.mul_channels(ids[0], gate);
                t.mean_all(y)
            },
            8,
            1e-6,
        );
    }

    #[test]
    fn grad_concat_clamp_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_arr(&mut rng, &[1, 2, 4, 4]);
        let b = rand_arr(&mut rng, &[1, 3, 4, 4]);
        fd_check(
            &[a, b],
            &|t, ids| {
                let c = t.concat_channels(&[ids[0], ids[1]]);
                let c = t.clamp(c, -0.5, 0.5);
                let c = t.scale(c, 3.0);
                t.mean_all(c)
            },
            8,
            1e-6,
        );
    }

    #[test]
    fn grad_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_arr(&mut rng, &[1, 3, 8, 8]);
        let b = rand_arr(&mut rng, &[1, 3, 8, 8]);
        fd_check(&[a.clone(), b.clone()], &|t, ids| t.l1_loss(ids[0], ids[1]), 10, 1e-6);
        fd_check(&[a.clone(), b.clone()], &|t, ids| t.mse_loss(ids[0], ids[1]), 10, 1e-6);
        fd_check(
            &[a.clone(), b.clone()],
            &|t, ids| t.spectral_l1(ids[0], ids[1]),
            10,
            1e-5,
        );
        let wh = rand_arr(&mut rng, &[1, 8, 7]).mapv(f64::abs);
        let wv = rand_arr(&mut rng, &[1, 7, 8]).mapv(f64::abs);
        fd_check(
            &[a.clone()],
            &move |t, ids| t.edge_tv(ids[0], wh.clone(), wv.clone()),
            10,
            1e-6,
        );
        fd_check(
            &[a.clone().mapv(f64::abs)],
            &|t, ids| t.exposure(ids[0], 0.6, 4),
            10,
            1e-6,
        );
    }

    #[test]
    fn grad_weighted_scalar_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_arr(&mut rng, &[1, 1, 4, 4]);
        let b = rand_arr(&mut rng, &[1, 1, 4, 4]);
        fd_check(
            &[a, b],
            &|t, ids| {
                let l1 = t.l1_loss(ids[0], ids[1]);
                let l2 = t.mse_loss(ids[0], ids[1]);
                t.weighted_scalar_sum(&[(1.0, l1), (0.25, l2)])
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn spectral_l1_constant_offset_value() {
        // Constant offset c: only the DC bin differs, by H*W*c per channel.
        let h = 6;
        let w = 5;
        let c = 3;
        let offset = 0.37;
        let a = ArrayD::zeros(IxDyn(&[1, c, h, w]));
        let b = a.mapv(|_| offset);
        let mut t = Tape::new();
        let an = t.constant(a);
        let bn = t.constant(b);
        let l = t.spectral_l1(an, bn);
        assert!((t.scalar_value(l) - offset).abs() < 1e-12);
    }

    #[test]
    fn fft2_matches_direct_dft() {
        // Brute-force DFT oracle on a small plane.
        let (h, w) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut plane = Array2::<Complex<f64>>::zeros((h, w));
        let mut src = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let v = rng.random::<f64>();
                src[[y, x]] = v;
                plane[[y, x]] = Complex::new(v, 0.0);
            }
        }
        fft2(&mut plane);
        let tau = std::f64::consts::TAU;
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -tau * (ky * y) as f64 / h as f64
                            - tau * (kx * x) as f64 / w as f64;
                        acc += Complex::new(phase.cos(), phase.sin()) * src[[y, x]];
                    }
                }
                let got = plane[[ky, kx]];
                assert!((acc - got).norm() < 1e-9, "bin ({ky},{kx})");
            }
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.var(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let y = t.var(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 2.0));
        let z = t.mul(x, y);
        let l = t.mean_all(z);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(y).is_some());
    }
}
