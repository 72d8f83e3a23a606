//! Frequency decomposition primitives: average-pooling separation (APS)
//! and the orthonormal 2x2 Haar discrete wavelet transform pair.

use ndarray::{Array2, Array3};

use crate::error::{EnhanceError, Result};
use crate::imaging::{ImageTensor, RangeTag};
use crate::kernels;

/// Additive low/high decomposition of a feature map: `low + high == source`.
#[derive(Clone, Debug)]
pub struct FrequencyPair {
    pub low: ImageTensor,
    pub high: ImageTensor,
}

/// The four Haar sub-bands of a feature map, each at half resolution.
#[derive(Clone, Debug)]
pub struct WaveletBands {
    pub ll: ImageTensor,
    pub lh: ImageTensor,
    pub hl: ImageTensor,
    pub hh: ImageTensor,
}

impl WaveletBands {
    fn band_dims(&self) -> Result<(usize, usize, usize)> {
        let dim = self.ll.data.dim();
        for b in [&self.lh, &self.hl, &self.hh] {
            if b.data.dim() != dim {
                return Err(EnhanceError::Shape(format!(
                    "wavelet bands disagree on shape: {:?} vs {:?}",
                    dim,
                    b.data.dim()
                )));
            }
        }
        Ok(dim)
    }
}

fn channel_plane(x: &Array3<f64>, c: usize) -> Array2<f64> {
    let (h, w, _) = x.dim();
    let mut plane = Array2::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            plane[[y, xx]] = x[[y, xx, c]];
        }
    }
    plane
}

fn set_channel_plane(dst: &mut Array3<f64>, c: usize, plane: &Array2<f64>) {
    let (h, w) = plane.dim();
    for y in 0..h {
        for xx in 0..w {
            dst[[y, xx, c]] = plane[[y, xx]];
        }
    }
}

/// Average-pooling separation: `low` is the pooled-then-bilinearly-upsampled
/// source, `high` is the residual, so `low + high == source` exactly.
pub fn aps_decompose(x: &ImageTensor, pool: usize) -> Result<FrequencyPair> {
    if pool == 0 {
        return Err(EnhanceError::Config("pool size must be >= 1".into()));
    }
    let (h, w, c) = x.data.dim();
    if h % pool != 0 || w % pool != 0 {
        return Err(EnhanceError::Shape(format!(
            "dims {h}x{w} not divisible by pool {pool}; pad first"
        )));
    }
    let mut low = Array3::zeros((h, w, c));
    if pool == 1 {
        low.assign(&x.data);
    } else {
        for ch in 0..c {
            let plane = channel_plane(&x.data, ch);
            let mut pooled = Array2::zeros((h / pool, w / pool));
            kernels::avg_pool2d(plane.view(), pool, pooled.view_mut());
            let mut up = Array2::zeros((h, w));
            kernels::upsample_bilinear(pooled.view(), pool, up.view_mut());
            set_channel_plane(&mut low, ch, &up);
        }
    }
    let high = &x.data - &low;
    Ok(FrequencyPair {
        low: ImageTensor::new(low, RangeTag::Signed)?,
        high: ImageTensor::new(high, RangeTag::Signed)?,
    })
}

/// Forward orthonormal Haar transform. Dims must be even.
pub fn dwt_forward(x: &ImageTensor) -> Result<WaveletBands> {
    let (h, w, c) = x.data.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(EnhanceError::Shape(format!(
            "dwt needs even dims, got {h}x{w}"
        )));
    }
    let mut bands = [
        Array3::zeros((h / 2, w / 2, c)),
        Array3::zeros((h / 2, w / 2, c)),
        Array3::zeros((h / 2, w / 2, c)),
        Array3::zeros((h / 2, w / 2, c)),
    ];
    for ch in 0..c {
        let plane = channel_plane(&x.data, ch);
        for (k, band) in bands.iter_mut().enumerate() {
            let mut out = Array2::zeros((h / 2, w / 2));
            kernels::haar_band(plane.view(), k, out.view_mut());
            set_channel_plane(band, ch, &out);
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(WaveletBands {
        ll: ImageTensor::new(ll, RangeTag::Signed)?,
        lh: ImageTensor::new(lh, RangeTag::Signed)?,
        hl: ImageTensor::new(hl, RangeTag::Signed)?,
        hh: ImageTensor::new(hh, RangeTag::Signed)?,
    })
}

/// Inverse of [`dwt_forward`]; exact reconstruction up to rounding.
pub fn dwt_inverse(b: &WaveletBands) -> Result<ImageTensor> {
    let (hb, wb, c) = b.band_dims()?;
    let mut out = Array3::zeros((hb * 2, wb * 2, c));
    for ch in 0..c {
        let planes = [
            channel_plane(&b.ll.data, ch),
            channel_plane(&b.lh.data, ch),
            channel_plane(&b.hl.data, ch),
            channel_plane(&b.hh.data, ch),
        ];
        let mut rec = Array2::zeros((hb * 2, wb * 2));
        kernels::haar_inverse(
            [
                planes[0].view(),
                planes[1].view(),
                planes[2].view(),
                planes[3].view(),
            ],
            &mut rec,
        );
        set_channel_plane(&mut out, ch, &rec);
    }
    ImageTensor::new(out, RangeTag::Signed)
}
