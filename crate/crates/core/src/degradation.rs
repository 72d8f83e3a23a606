//! Synthetic blur-pair generation: random Gaussian or motion kernels
//! applied with mirror padding, producing (blurry, clean) training pairs.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EnhanceError, Result};
use crate::imaging::{reflect_index, ImageTensor, RangeTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Motion,
}

/// Parameters of the random blurring operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub kernel_kind: KernelKind,
    pub sigma_range: (f64, f64),
    pub kernel_size_range: (usize, usize),
    pub motion_len_range: (f64, f64),
    pub seed: u64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        BlurSpec {
            kernel_kind: KernelKind::Gaussian,
            sigma_range: (0.5, 4.0),
            kernel_size_range: (3, 25),
            motion_len_range: (5.0, 20.0),
            seed: 0,
        }
    }
}

impl BlurSpec {
    pub fn validate(&self) -> Result<()> {
        let (smin, smax) = self.sigma_range;
        if !(smin > 0.0 && smin <= smax) {
            return Err(EnhanceError::Config(format!(
                "sigma range ({smin}, {smax}) must satisfy 0 < min <= max"
            )));
        }
        let (kmin, kmax) = self.kernel_size_range;
        if kmin % 2 == 0 || kmax % 2 == 0 || kmin == 0 || kmin > kmax {
            return Err(EnhanceError::Config(format!(
                "kernel size range ({kmin}, {kmax}) must be odd and nonempty"
            )));
        }
        let (mmin, mmax) = self.motion_len_range;
        if !(mmin > 0.0 && mmin <= mmax) {
            return Err(EnhanceError::Config(format!(
                "motion length range ({mmin}, {mmax}) must satisfy 0 < min <= max"
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

fn clamp_odd(size: usize, lo: usize, hi: usize) -> usize {
    let s = size.clamp(lo, hi);
    if s % 2 == 0 {
        (s + 1).min(hi)
    } else {
        s
    }
}

/// Draws one normalized blur kernel from the spec's distribution.
pub fn sample_blur(spec: &BlurSpec, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    spec.validate()?;
    let (kmin, kmax) = spec.kernel_size_range;
    let mut kernel = match spec.kernel_kind {
        KernelKind::Gaussian => {
            let sigma = uniform(rng, spec.sigma_range.0, spec.sigma_range.1);
            // Smallest odd size covering ~3 sigma per side.
            let natural = (6.0 * sigma + 1.0).ceil() as usize;
            let natural = if natural % 2 == 0 { natural + 1 } else { natural };
            let size = clamp_odd(natural, kmin, kmax);
            let c = (size / 2) as f64;
            let denom = 2.0 * sigma * sigma;
            Array2::from_shape_fn((size, size), |(y, x)| {
                let dy = y as f64 - c;
                let dx = x as f64 - c;
                (-(dx * dx + dy * dy) / denom).exp()
            })
        }
        KernelKind::Motion => {
            let len = uniform(rng, spec.motion_len_range.0, spec.motion_len_range.1);
            let angle = rng.random::<f64>() * std::f64::consts::PI;
            let natural = len.ceil() as usize + 2;
            let natural = if natural % 2 == 0 { natural + 1 } else { natural };
            let size = clamp_odd(natural, kmin, kmax);
            let c = (size / 2) as f64;
            let (dy, dx) = (angle.sin(), angle.cos());
            let steps = ((len * 8.0).ceil() as usize).max(2);
            let mut k = Array2::<f64>::zeros((size, size));
            // Supersample the segment and splat bilinearly.
            for s in 0..steps {
                let t = s as f64 / (steps - 1) as f64 - 0.5;
                let py = c + t * len * dy;
                let px = c + t * len * dx;
                let y0 = py.floor();
                let x0 = px.floor();
                let fy = py - y0;
                let fx = px - x0;
                for (oy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                    for (ox, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                        let (iy, ix) = (oy as isize, ox as isize);
                        if iy >= 0 && ix >= 0 && (iy as usize) < size && (ix as usize) < size {
                            k[[iy as usize, ix as usize]] += wy * wx;
                        }
                    }
                }
            }
            k
        }
    };
    let sum: f64 = kernel.iter().sum();
    if sum <= 0.0 {
        return Err(EnhanceError::Numeric("degenerate blur kernel".into()));
    }
    kernel.mapv_inplace(|v| v / sum);
    Ok(kernel)
}

/// Mirror-padded per-channel correlation with a normalized kernel.
pub fn degrade(img: &ImageTensor, kernel: &Array2<f64>) -> Result<ImageTensor> {
    let (h, w, c) = img.data.dim();
    let (kh, kw) = kernel.dim();
    if kh > h || kw > w {
        return Err(EnhanceError::Config(format!(
            "kernel {kh}x{kw} larger than image {h}x{w}"
        )));
    }
    let sum: f64 = kernel.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(EnhanceError::Contract(format!(
            "kernel must be normalized, sums to {sum}"
        )));
    }
    let (cy, cx) = (kh / 2, kw / 2);
    let mut out = ndarray::Array3::<f64>::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for u in 0..kh {
                    let sy = reflect_index(y as isize + u as isize - cy as isize, h);
                    for v in 0..kw {
                        let sx = reflect_index(x as isize + v as isize - cx as isize, w);
                        acc += kernel[[u, v]] * img.data[[sy, sx, ch]];
                    }
                }
                out[[y, x, ch]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageTensor {
        data: out,
        range: RangeTag::Unit,
    })
}
