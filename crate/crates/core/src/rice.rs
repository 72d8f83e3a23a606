//! Retinex-guided illumination compensation: a compact network estimates a
//! per-pixel compensation ratio in `(0, 1]` and the enhanced image is the
//! input divided by that ratio. Wavelet-domain residual blocks preserve
//! color by processing the four Haar sub-bands with shared branches.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{EnhanceError, Result};
use crate::fred::peek_config_json;
use crate::imaging::{ImageTensor, RangeTag};
use crate::nn::{
    image_to_nchw, nchw_to_image, Conv2dLayer, Init, NodeId, ParamStore, Registered, ResBlock,
    Tape,
};

pub const RICE_MAGIC: &[u8] = b"RICE.v1\n";

/// Lower bound on the compensation ratio; caps brightening at 1/floor.
pub const RATIO_FLOOR: f64 = 0.05;

/// Width of a wavelet residual block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuConfig {
    pub channels: usize,
}

impl CpuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(EnhanceError::Config("cpu channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Network-level configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiceConfig {
    pub channels: usize,
    pub cpu_blocks: usize,
    pub epsilon_r: f64,
}

impl Default for RiceConfig {
    fn default() -> Self {
        RiceConfig {
            channels: 32,
            cpu_blocks: 3,
            epsilon_r: RATIO_FLOOR,
        }
    }
}

impl RiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(EnhanceError::Config("channels must be >= 1".into()));
        }
        if !(self.epsilon_r > 0.0 && self.epsilon_r < 1.0) {
            return Err(EnhanceError::Config(format!(
                "epsilon_r must lie in (0, 1), got {}",
                self.epsilon_r
            )));
        }
        Ok(())
    }
}

/// Two parallel conv branches (5x5 and 1x1, two layers each with a ReLU
/// between) fused by summation.
struct BandBranch {
    c5a: Conv2dLayer,
    c5b: Conv2dLayer,
    c1a: Conv2dLayer,
    c1b: Conv2dLayer,
}

impl BandBranch {
    fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        BandBranch {
            c5a: Conv2dLayer::new(ps, &format!("{name}.c5a"), channels, channels, 5, 1, Init::He, rng),
            c5b: Conv2dLayer::new(ps, &format!("{name}.c5b"), channels, channels, 5, 1, Init::He, rng),
            c1a: Conv2dLayer::new(ps, &format!("{name}.c1a"), channels, channels, 1, 1, Init::He, rng),
            c1b: Conv2dLayer::new(ps, &format!("{name}.c1b"), channels, channels, 1, 1, Init::He, rng),
        }
    }

    fn apply(&self, t: &mut Tape, reg: &Registered, x: NodeId) -> NodeId {
        let a = self.c5a.apply(t, reg, x);
        let a = t.relu(a);
        let a = self.c5b.apply(t, reg, a);
        let b = self.c1a.apply(t, reg, x);
        let b = t.relu(b);
        let b = self.c1b.apply(t, reg, b);
        t.add(a, b)
    }
}

/// Wavelet residual block: decompose into four Haar sub-bands, process
/// each with the conv branches, inverse-transform and add the input.
pub struct CpuBlock {
    branches: Vec<BandBranch>,
}

impl CpuBlock {
    /// `per_band` gives every sub-band its own branch parameters;
    /// otherwise one branch set is shared across all four.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &CpuConfig,
        per_band: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let count = if per_band { 4 } else { 1 };
        let branches = (0..count)
            .map(|i| {
                let bname = if per_band {
                    format!("{name}.band{i}")
                } else {
                    format!("{name}.shared")
                };
                BandBranch::new(ps, &bname, cfg.channels, rng)
            })
            .collect();
        Ok(CpuBlock { branches })
    }

    pub fn apply(&self, t: &mut Tape, reg: &Registered, x: NodeId) -> Result<NodeId> {
        let s = t.shape(x);
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(EnhanceError::Shape(format!(
                "wavelet block needs even dims, got {}x{}",
                s[2], s[3]
            )));
        }
        let mut processed = [NodeId(0); 4];
        for band in 0..4 {
            let b = t.haar_band(x, band);
            let branch = if self.branches.len() == 4 {
                &self.branches[band]
            } else {
                &self.branches[0]
            };
            processed[band] = branch.apply(t, reg, b);
        }
        let rec = t.haar_inverse(processed);
        Ok(t.add(rec, x))
    }
}

enum Block {
    Wavelet(CpuBlock),
    Plain(ResBlock),
}

/// Nodes of interest from one forward pass.
pub struct RiceForward {
    /// Compensation ratio in `[epsilon_r, 1]`.
    pub ratio: NodeId,
    /// Input divided by the ratio, clamped to `[0, 1]`.
    pub enhanced: NodeId,
    /// Raw sigmoid illumination estimate in `(0, 1)`.
    pub illum: NodeId,
}

/// The illumination compensation network and its parameters.
pub struct RiceNet {
    pub cfg: RiceConfig,
    pub use_cpu: bool,
    pub per_band_params: bool,
    pub params: ParamStore,
    entry: Conv2dLayer,
    blocks: Vec<Block>,
    head: Conv2dLayer,
}

#[derive(Serialize, Deserialize)]
struct RiceCheckpointMeta {
    config: RiceConfig,
    use_cpu: bool,
    per_band_params: bool,
}

impl RiceNet {
    pub fn new(cfg: RiceConfig, use_cpu: bool, per_band_params: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entry = Conv2dLayer::new(&mut ps, "entry", 3, cfg.channels, 3, 1, Init::He, &mut rng);
        let mut blocks = Vec::new();
        for i in 0..cfg.cpu_blocks {
            if use_cpu {
                blocks.push(Block::Wavelet(CpuBlock::new(
                    &mut ps,
                    &format!("cpu{i}"),
                    &CpuConfig {
                        channels: cfg.channels,
                    },
                    per_band_params,
                    &mut rng,
                )?));
            } else {
                blocks.push(Block::Plain(ResBlock::new(
                    &mut ps,
                    &format!("plain{i}"),
                    cfg.channels,
                    &mut rng,
                )));
            }
        }
        let head = Conv2dLayer::new(&mut ps, "head", cfg.channels, 3, 3, 1, Init::He, &mut rng);
        // Start near the identity: sigmoid(2) ~ 0.88 keeps early training
        // out of the saturated region while barely brightening.
        ps.set_value(head.b, ArrayD::from_elem(IxDyn(&[3]), 2.0));
        Ok(RiceNet {
            cfg,
            use_cpu,
            per_band_params,
            params: ps,
            entry,
            blocks,
            head,
        })
    }

    /// Builds the forward graph on a `[N, 3, H, W]` input whose values
    /// must already lie in `[0, 1]`.
    pub fn forward(&self, t: &mut Tape, reg: &Registered, input: NodeId) -> Result<RiceForward> {
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
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(EnhanceError::Shape(format!(
                "spatial dims {}x{} must be even; pad first",
                s[2], s[3]
            )));
        }
        if t.value(input).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(EnhanceError::Contract(
                "illumination stage input must lie in [0, 1]".into(),
            ));
        }
        let mut h = self.entry.apply(t, reg, input);
        h = t.relu(h);
        for block in &self.blocks {
            h = match block {
                Block::Wavelet(b) => b.apply(t, reg, h)?,
                Block::Plain(b) => b.apply(t, reg, h),
            };
        }
        let logits = self.head.apply(t, reg, h);
        let illum = t.sigmoid(logits);
        let ratio = t.clamp(illum, self.cfg.epsilon_r, 1.0);
        let raw = t.div(input, ratio);
        let enhanced = t.clamp(raw, 0.0, 1.0);
        Ok(RiceForward {
            ratio,
            enhanced,
            illum,
        })
    }

    /// Single-image inference: returns (ratio, enhanced, raw illumination).
    pub fn infer(&self, img: &ImageTensor) -> Result<(ImageTensor, ImageTensor, ImageTensor)> {
        let mut t = Tape::new();
        let reg = self.params.register_frozen(&mut t);
        let input = t.constant(image_to_nchw(img));
        let fwd = self.forward(&mut t, &reg, input)?;
        Ok((
            nchw_to_image(t.value(fwd.ratio), 0, RangeTag::Unit),
            nchw_to_image(t.value(fwd.enhanced), 0, RangeTag::Unit),
            nchw_to_image(t.value(fwd.illum), 0, RangeTag::Signed),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = RiceCheckpointMeta {
            config: self.cfg.clone(),
            use_cpu: self.use_cpu,
            per_band_params: self.per_band_params,
        };
        let json = serde_json::to_string(&meta)
            .map_err(|e| EnhanceError::Format(format!("checkpoint meta: {e}")))?;
        let file = File::create(path).map_err(|e| EnhanceError::io(path, e))?;
        let mut bw = BufWriter::new(file);
        self.params
            .write_archive(&mut bw, RICE_MAGIC, &json)
            .map_err(|e| EnhanceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EnhanceError::io(path, e))?;
        let mut br = BufReader::new(file);
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut br, &mut bytes).map_err(|e| EnhanceError::io(path, e))?;
        let json = peek_config_json(&bytes, RICE_MAGIC)?;
        let meta: RiceCheckpointMeta = serde_json::from_str(&json)
            .map_err(|e| EnhanceError::Format(format!("checkpoint meta: {e}")))?;
        let mut net = RiceNet::new(meta.config, meta.use_cpu, meta.per_band_params, 0)?;
        net.params.read_archive(&mut bytes.as_slice(), RICE_MAGIC)?;
        Ok(net)
    }
}

/// Divides an image by a compensation ratio, clamping to `[0, 1]`.
/// The ratio must respect the floor; enhancement is monotone in `1/r`.
pub fn apply_retinex(img: &ImageTensor, ratio: &ImageTensor) -> Result<ImageTensor> {
    if img.data.dim() != ratio.data.dim() {
        return Err(EnhanceError::Shape(format!(
            "image {:?} vs ratio {:?}",
            img.data.dim(),
            ratio.data.dim()
        )));
    }
    if ratio.data.iter().any(|&r| r < RATIO_FLOOR - 1e-12) {
        return Err(EnhanceError::Contract(format!(
            "ratio below the floor {RATIO_FLOOR}"
        )));
    }
    let mut out = img.data.clone();
    out.zip_mut_with(&ratio.data, |v, &r| *v = (*v / r).clamp(0.0, 1.0));
    Ok(ImageTensor {
        data: out,
        range: RangeTag::Unit,
    })
}
