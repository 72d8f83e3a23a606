//! Frequency-decoupled deblurring network: the input is split into low and
//! high frequency components, each processed by its own encoder-decoder
//! stream with cross-scale skip fusion, and per-scale fusion heads emit
//! residual predictions on top of the downsampled input.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{EnhanceError, Result};
use crate::imaging::{ImageTensor, RangeTag};
use crate::nn::{
    image_to_nchw, nchw_to_image, ChannelGate, Conv2dLayer, Init, NodeId, ParamStore, Registered,
    ResBlock, Tape,
};

pub const FRED_MAGIC: &[u8] = b"FRED.v1\n";

/// Cross-scale skip-fusion unit configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AciConfig {
    pub in_channels_per_source: Vec<usize>,
    pub out_channels: usize,
    pub mlp_reduction: usize,
}

impl AciConfig {
    pub fn concat_channels(&self) -> usize {
        self.in_channels_per_source.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels_per_source.is_empty() {
            return Err(EnhanceError::Config("aci needs at least one source".into()));
        }
        if self.out_channels == 0 {
            return Err(EnhanceError::Config("aci out_channels must be >= 1".into()));
        }
        let cat = self.concat_channels();
        if self.mlp_reduction == 0 || cat % self.mlp_reduction != 0 {
            return Err(EnhanceError::Config(format!(
                "aci mlp_reduction {} must divide concatenated channels {cat}",
                self.mlp_reduction
            )));
        }
        Ok(())
    }
}

/// Network-level configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FredConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub aps_pool: usize,
    pub supervision_scales: usize,
}

impl Default for FredConfig {
    fn default() -> Self {
        FredConfig {
            levels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            aps_pool: 2,
            supervision_scales: 3,
        }
    }
}

impl FredConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.aps_pool == 0 {
            return Err(EnhanceError::Config(
                "levels, base_channels and aps_pool must be >= 1".into(),
            ));
        }
        if self.channel_multipliers.len() != self.levels {
            return Err(EnhanceError::Config(format!(
                "channel multiplier list length {} must equal levels {}",
                self.channel_multipliers.len(),
                self.levels
            )));
        }
        if self.supervision_scales != self.levels {
            return Err(EnhanceError::Config(format!(
                "supervision_scales {} must equal levels {}",
                self.supervision_scales, self.levels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Spatial dims must divide by this before the forward pass.
    pub fn required_multiple(&self) -> usize {
        (1 << (self.levels - 1)) * self.aps_pool
    }
}

/// Rescales a feature map to a target spatial size reachable by factor-2
/// hops: bilinear upsampling to grow, average pooling to shrink.
fn rescale_to(t: &mut Tape, mut x: NodeId, target_hw: (usize, usize)) -> NodeId {
    loop {
        let s = t.shape(x);
        let (h, w) = (s[2], s[3]);
        if (h, w) == target_hw {
            return x;
        }
        if h > target_hw.0 {
            assert!(h % 2 == 0 && w % 2 == 0, "rescale expects factor-2 ladder");
            x = t.avg_pool(x, 2);
        } else {
            assert!(h < target_hw.0, "rescale expects factor-2 ladder");
            x = t.upsample_bilinear(x, 2);
        }
    }
}

/// Asymmetric channel integration: concatenated rescaled sources pass a
/// channel-attention global branch and a pointwise local branch, fused by
/// summation and a final 1x1 projection.
pub struct AciUnit {
    pub cfg: AciConfig,
    gate: ChannelGate,
    conv_g: Conv2dLayer,
    local1: Conv2dLayer,
    local2: Conv2dLayer,
    out: Conv2dLayer,
}

impl AciUnit {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: AciConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let cat = cfg.concat_channels();
        let cout = cfg.out_channels;
        Ok(AciUnit {
            gate: ChannelGate::new(ps, &format!("{name}.gate"), cat, cfg.mlp_reduction, rng)?,
            conv_g: Conv2dLayer::new(ps, &format!("{name}.conv_g"), cat, cout, 1, 1, Init::He, rng),
            local1: Conv2dLayer::new(ps, &format!("{name}.local1"), cat, cout, 1, 1, Init::He, rng),
            local2: Conv2dLayer::new(ps, &format!("{name}.local2"), cout, cout, 1, 1, Init::He, rng),
            out: Conv2dLayer::new(ps, &format!("{name}.out"), cout, cout, 1, 1, Init::He, rng),
            cfg,
        })
    }

    pub fn apply(
        &self,
        t: &mut Tape,
        reg: &Registered,
        sources: &[NodeId],
        target_hw: (usize, usize),
    ) -> Result<NodeId> {
        if sources.len() != self.cfg.in_channels_per_source.len() {
            return Err(EnhanceError::Config(format!(
                "aci got {} sources, configured for {}",
                sources.len(),
                self.cfg.in_channels_per_source.len()
            )));
        }
        for (&s, &c) in sources.iter().zip(&self.cfg.in_channels_per_source) {
            if t.shape(s)[1] != c {
                return Err(EnhanceError::Config(format!(
                    "aci source has {} channels, configured for {c}",
                    t.shape(s)[1]
                )));
            }
        }
        let rescaled: Vec<NodeId> = sources
            .iter()
            .map(|&s| rescale_to(t, s, target_hw))
            .collect();
        let fs = t.concat_channels(&rescaled);
        let weights = self.gate.weights(t, reg, fs);
        let gated = t.mul_channels(fs, weights);
        let f_g = self.conv_g.apply(t, reg, gated);
        let f_l = {
            let h = self.local1.apply(t, reg, fs);
            let h = t.relu(h);
            self.local2.apply(t, reg, h)
        };
        let sum = t.add(f_g, f_l);
        Ok(self.out.apply(t, reg, sum))
    }
}

/// Per-scale fusion head merging the two stream decoders into an image
/// prediction: convolutions, channel attention, and a 3-channel head.
struct FusionHead {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    gate: ChannelGate,
    head: Conv2dLayer,
}

impl FusionHead {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        head_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FusionHead {
            conv1: Conv2dLayer::new(ps, &format!("{name}.conv1"), 2 * channels, channels, 3, 1, Init::He, rng),
            conv2: Conv2dLayer::new(ps, &format!("{name}.conv2"), channels, channels, 3, 1, Init::He, rng),
            gate: ChannelGate::new(ps, &format!("{name}.gate"), channels, 8, rng)?,
            head: Conv2dLayer::new(ps, &format!("{name}.head"), channels, 3, 3, 1, head_init, rng),
        })
    }

    fn apply(&self, t: &mut Tape, reg: &Registered, hi: NodeId, lo: NodeId) -> NodeId {
        let f = t.concat_channels(&[hi, lo]);
        let f = self.conv1.apply(t, reg, f);
        let f = t.relu(f);
        let f = self.conv2.apply(t, reg, f);
        let f = t.relu(f);
        let f = self.gate.apply(t, reg, f);
        self.head.apply(t, reg, f)
    }
}

/// One frequency stream: encoder with per-scale input injection, decoder
/// with skip fusion.
struct Stream {
    entry: Conv2dLayer,
    down: Vec<Conv2dLayer>,
    inject: Vec<Conv2dLayer>,
    enc_blocks: Vec<[ResBlock; 2]>,
    merge: Vec<Conv2dLayer>,
    dec_blocks: Vec<[ResBlock; 2]>,
    aci: Option<Vec<AciUnit>>,
}

impl Stream {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &FredConfig,
        use_aci: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let k = cfg.levels;
        let entry = Conv2dLayer::new(ps, &format!("{name}.entry"), 3, cfg.channels(0), 3, 1, Init::He, rng);
        let mut down = Vec::new();
        let mut inject = Vec::new();
        let mut enc_blocks = Vec::new();
        let mut merge = Vec::new();
        let mut dec_blocks = Vec::new();
        for lvl in 0..k {
            let c = cfg.channels(lvl);
            if lvl > 0 {
                down.push(Conv2dLayer::new(
                    ps,
                    &format!("{name}.down{lvl}"),
                    cfg.channels(lvl - 1),
                    c,
                    3,
                    2,
                    Init::He,
                    rng,
                ));
                inject.push(Conv2dLayer::new(
                    ps,
                    &format!("{name}.inject{lvl}"),
                    c + 3,
                    c,
                    3,
                    1,
                    Init::He,
                    rng,
                ));
            }
            enc_blocks.push([
                ResBlock::new(ps, &format!("{name}.enc{lvl}.rb0"), c, rng),
                ResBlock::new(ps, &format!("{name}.enc{lvl}.rb1"), c, rng),
            ]);
            if lvl + 1 < k {
                merge.push(Conv2dLayer::new(
                    ps,
                    &format!("{name}.merge{lvl}"),
                    cfg.channels(lvl + 1) + c,
                    c,
                    3,
                    1,
                    Init::He,
                    rng,
                ));
            }
            dec_blocks.push([
                ResBlock::new(ps, &format!("{name}.dec{lvl}.rb0"), c, rng),
                ResBlock::new(ps, &format!("{name}.dec{lvl}.rb1"), c, rng),
            ]);
        }
        let aci = if use_aci {
            let all_channels: Vec<usize> = (0..k).map(|l| cfg.channels(l)).collect();
            let mut units = Vec::new();
            for lvl in 0..k {
                units.push(AciUnit::new(
                    ps,
                    &format!("{name}.aci{lvl}"),
                    AciConfig {
                        in_channels_per_source: all_channels.clone(),
                        out_channels: cfg.channels(lvl),
                        mlp_reduction: 8,
                    },
                    rng,
                )?);
            }
            Some(units)
        } else {
            None
        };
        Ok(Stream {
            entry,
            down,
            inject,
            enc_blocks,
            merge,
            dec_blocks,
            aci,
        })
    }

    /// Runs the stream over the per-scale component pyramid; returns the
    /// decoder feature at every level, finest first.
    fn forward(
        &self,
        t: &mut Tape,
        reg: &Registered,
        comps: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let k = comps.len();
        let mut enc = Vec::with_capacity(k);
        for lvl in 0..k {
            let h = if lvl == 0 {
                let e = self.entry.apply(t, reg, comps[0]);
                t.relu(e)
            } else {
                let d = self.down[lvl - 1].apply(t, reg, enc[lvl - 1]);
                let d = t.relu(d);
                let cat = t.concat_channels(&[d, comps[lvl]]);
                let inj = self.inject[lvl - 1].apply(t, reg, cat);
                t.relu(inj)
            };
            let h = self.enc_blocks[lvl][0].apply(t, reg, h);
            let h = self.enc_blocks[lvl][1].apply(t, reg, h);
            enc.push(h);
        }
        let mut dec = vec![None; k];
        for lvl in (0..k).rev() {
            let target_hw = {
                let s = t.shape(enc[lvl]);
                (s[2], s[3])
            };
            let skip = match &self.aci {
                Some(units) => units[lvl].apply(t, reg, &enc, target_hw)?,
                None => enc[lvl],
            };
            let h = if lvl + 1 == k {
                skip
            } else {
                let up = t.upsample_bilinear(dec[lvl + 1].unwrap(), 2);
                let cat = t.concat_channels(&[up, skip]);
                let m = self.merge[lvl].apply(t, reg, cat);
                t.relu(m)
            };
            let h = self.dec_blocks[lvl][0].apply(t, reg, h);
            let h = self.dec_blocks[lvl][1].apply(t, reg, h);
            dec[lvl] = Some(h);
        }
        Ok(dec.into_iter().map(|d| d.unwrap()).collect())
    }
}

/// Nodes of interest produced by one forward pass.
pub struct FredForward {
    /// Residual image predictions, coarsest scale first.
    pub outputs: Vec<NodeId>,
    pub low: NodeId,
    pub high: NodeId,
}

/// Forward-pass statistics surfaced alongside inference results.
#[derive(Clone, Debug)]
pub struct FredDiagnostics {
    pub low_mean: f64,
    pub high_abs_max: f64,
    /// Per output scale, coarsest first, before clamping.
    pub output_ranges: Vec<(f64, f64)>,
}

/// The full dual-stream network and its parameters.
pub struct FredNet {
    pub cfg: FredConfig,
    pub use_aci: bool,
    pub params: ParamStore,
    high: Stream,
    low: Stream,
    fusion: Vec<FusionHead>,
}

#[derive(Serialize, Deserialize)]
struct FredCheckpointMeta {
    config: FredConfig,
    use_aci: bool,
}

impl FredNet {
    /// Builds the network with prediction heads zero-initialized, so the
    /// initial output equals the downsampled input at every scale.
    pub fn new(cfg: FredConfig, use_aci: bool, seed: u64) -> Result<Self> {
        FredNet::with_head_init(cfg, use_aci, seed, Init::Zero)
    }

    /// Builds the network with a chosen prediction-head initialization.
    pub fn with_head_init(
        cfg: FredConfig,
        use_aci: bool,
        seed: u64,
        head_init: Init,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let high = Stream::new(&mut ps, "high", &cfg, use_aci, &mut rng)?;
        let low = Stream::new(&mut ps, "low", &cfg, use_aci, &mut rng)?;
        let mut fusion = Vec::new();
        for lvl in 0..cfg.levels {
            fusion.push(FusionHead::new(
                &mut ps,
                &format!("fusion{lvl}"),
                cfg.channels(lvl),
                head_init,
                &mut rng,
            )?);
        }
        Ok(FredNet {
            cfg,
            use_aci,
            params: ps,
            high,
            low,
            fusion,
        })
    }

    /// Builds the multi-scale forward graph on `input` (`[N, 3, H, W]`).
    pub fn forward(
        &self,
        t: &mut Tape,
        reg: &Registered,
        input: NodeId,
    ) -> Result<FredForward> {
        if !self.params.all_finite() {
            return Err(EnhanceError::Numeric(
                "non-finite value in network parameters".into(),
            ));
        }
        let s = t.shape(input).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(EnhanceError::Shape(format!(
                "expected [N,3,H,W] input, got {s:?}"
            )));
        }
        let m = self.cfg.required_multiple();
        if s[2] % m != 0 || s[3] % m != 0 {
            return Err(EnhanceError::Shape(format!(
                "spatial dims {}x{} must divide by {m}; pad first",
                s[2], s[3]
            )));
        }
        let k = self.cfg.levels;
        // Frequency separation, then one pyramid per component.
        let (low0, high0) = {
            let pooled = t.avg_pool(input, self.cfg.aps_pool);
            let low = t.upsample_bilinear(pooled, self.cfg.aps_pool);
            let high = t.sub(input, low);
            (low, high)
        };
        let mut lows = vec![low0];
        let mut highs = vec![high0];
        let mut bases = vec![input];
        for lvl in 1..k {
            lows.push(t.avg_pool(lows[lvl - 1], 2));
            highs.push(t.avg_pool(highs[lvl - 1], 2));
            bases.push(t.avg_pool(bases[lvl - 1], 2));
        }
        let dec_high = self.high.forward(t, reg, &highs)?;
        let dec_low = self.low.forward(t, reg, &lows)?;
        let mut outputs = Vec::with_capacity(k);
        for lvl in (0..k).rev() {
            let pred = self.fusion[lvl].apply(t, reg, dec_high[lvl], dec_low[lvl]);
            outputs.push(t.add(pred, bases[lvl]));
        }
        Ok(FredForward {
            outputs,
            low: low0,
            high: high0,
        })
    }

    /// Single-image inference; outputs are clamped to `[0, 1]` here, at
    /// the boundary, and returned coarsest first.
    pub fn infer(&self, img: &ImageTensor) -> Result<(Vec<ImageTensor>, FredDiagnostics)> {
        let mut t = Tape::new();
        let reg = self.params.register_frozen(&mut t);
        let input = t.constant(image_to_nchw(img));
        let fwd = self.forward(&mut t, &reg, input)?;
        let mut outputs = Vec::new();
        let mut ranges = Vec::new();
        for &o in &fwd.outputs {
            let v = t.value(o);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &x in v.iter() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            ranges.push((lo, hi));
            let clamped = t.clamp(o, 0.0, 1.0);
            outputs.push(nchw_to_image(t.value(clamped), 0, RangeTag::Unit));
        }
        let low_mean = t.value(fwd.low).mean().unwrap_or(0.0);
        let high_abs_max = t
            .value(fwd.high)
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        Ok((
            outputs,
            FredDiagnostics {
                low_mean,
                high_abs_max,
                output_ranges: ranges,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = FredCheckpointMeta {
            config: self.cfg.clone(),
            use_aci: self.use_aci,
        };
        let json = serde_json::to_string(&meta)
            .map_err(|e| EnhanceError::Format(format!("checkpoint meta: {e}")))?;
        let file = File::create(path).map_err(|e| EnhanceError::io(path, e))?;
        let mut bw = BufWriter::new(file);
        self.params
            .write_archive(&mut bw, FRED_MAGIC, &json)
            .map_err(|e| EnhanceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EnhanceError::io(path, e))?;
        let mut br = BufReader::new(file);
        // Peek the meta first by reading with a placeholder store sized
        // from the meta; simplest is a two-pass read into memory.
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut br, &mut bytes).map_err(|e| EnhanceError::io(path, e))?;
        let json = peek_config_json(&bytes, FRED_MAGIC)?;
        let meta: FredCheckpointMeta = serde_json::from_str(&json)
            .map_err(|e| EnhanceError::Format(format!("checkpoint meta: {e}")))?;
        let mut net = FredNet::new(meta.config, meta.use_aci, 0)?;
        net.params.read_archive(&mut bytes.as_slice(), FRED_MAGIC)?;
        Ok(net)
    }
}

/// Extracts the embedded config JSON without loading parameters.
pub(crate) fn peek_config_json(bytes: &[u8], magic: &[u8]) -> Result<String> {
    let fmt = |m: &str| EnhanceError::Format(m.to_string());
    if bytes.len() < magic.len() + 4 {
        return Err(fmt("truncated checkpoint"));
    }
    if &bytes[..magic.len()] != magic {
        return Err(fmt(&format!(
            "checkpoint magic mismatch: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let off = magic.len();
    let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    if bytes.len() < off + 4 + len {
        return Err(fmt("truncated checkpoint"));
    }
    String::from_utf8(bytes[off + 4..off + 4 + len].to_vec())
        .map_err(|_| fmt("checkpoint config is not utf-8"))
}

/// Standalone skip-fusion over plain tensors (sources in `(H, W, C)`
/// layout), using freshly seeded parameters.
pub fn aci_fuse(
    sources: &[ImageTensor],
    target_hw: (usize, usize),
    cfg: &AciConfig,
    seed: u64,
) -> Result<ImageTensor> {
    cfg.validate()?;
    if sources.len() != cfg.in_channels_per_source.len() {
        return Err(EnhanceError::Config(format!(
            "got {} sources, config lists {}",
            sources.len(),
            cfg.in_channels_per_source.len()
        )));
    }
    for (s, &c) in sources.iter().zip(&cfg.in_channels_per_source) {
        if s.channels() != c {
            return Err(EnhanceError::Config(format!(
                "source has {} channels, config lists {c}",
                s.channels()
            )));
        }
    }
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = AciUnit::new(&mut ps, "aci", cfg.clone(), &mut rng)?;
    let mut t = Tape::new();
    let reg = ps.register_frozen(&mut t);
    let ids: Vec<NodeId> = sources.iter().map(|s| t.constant(image_to_nchw(s))).collect();
    let out = unit.apply(&mut t, &reg, &ids, target_hw)?;
    Ok(nchw_to_image(t.value(out), 0, RangeTag::Signed))
}
