//! Image representation, normalization, file I/O and padding.
//!
//! Images and feature maps share one container, [`ImageTensor`]: an
//! `(height, width, channels)` array of `f64` with a range tag. `Unit`
//! tensors hold display values in `[0, 1]`; `Signed` tensors hold
//! unconstrained feature values.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::Array3;

use crate::error::{EnhanceError, Result};

/// Value-range contract for an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeTag {
    /// Values expected in `[0, 1]`.
    Unit,
    /// Unconstrained feature values.
    Signed,
}

/// Floating-point image or feature map in `(height, width, channels)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
    pub range: RangeTag,
}

impl ImageTensor {
    /// Wraps an array, checking only the structural invariants
    /// (non-empty spatial dims, at least one channel).
    pub fn new(data: Array3<f64>, range: RangeTag) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(EnhanceError::Shape(format!(
                "image dims must be positive, got {h}x{w}x{c}"
            )));
        }
        Ok(ImageTensor { data, range })
    }

    /// Wraps an array as a unit-range image, verifying every element.
    pub fn unit(data: Array3<f64>) -> Result<Self> {
        let t = ImageTensor::new(data, RangeTag::Unit)?;
        t.validate_unit()?;
        Ok(t)
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64, range: RangeTag) -> Self {
        ImageTensor {
            data: Array3::from_elem((h, w, c), value),
            range,
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Checks the unit-range contract on every element.
    pub fn validate_unit(&self) -> Result<()> {
        if self.range != RangeTag::Unit {
            return Err(EnhanceError::Contract(
                "expected a unit-range tensor".into(),
            ));
        }
        for &v in self.data.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(EnhanceError::Contract(format!(
                    "unit-range tensor holds out-of-range value {v}"
                )));
            }
        }
        Ok(())
    }

    /// Image-boundary check: 1 or 3 channels.
    pub fn validate_image_boundary(&self) -> Result<()> {
        let c = self.channels();
        if c != 1 && c != 3 {
            return Err(EnhanceError::Shape(format!(
                "boundary images must have 1 or 3 channels, got {c}"
            )));
        }
        Ok(())
    }

    /// Returns a copy with every element clamped to `[0, 1]` and tagged unit.
    pub fn clamped01(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
            range: RangeTag::Unit,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Max absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.data.dim(), other.data.dim(), "shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Per-pixel gray value (channel mean) as an `(H, W)` array.
    pub fn gray(&self) -> ndarray::Array2<f64> {
        let (h, w, c) = self.data.dim();
        let mut g = ndarray::Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ch in 0..c {
                    s += self.data[[y, x, ch]];
                }
                g[[y, x]] = s / c as f64;
            }
        }
        g
    }
}

/// Everything the two-stage pipeline produces for one image.
#[derive(Clone, Debug)]
pub struct EnhancementResult {
    /// Stage-1 output (equals the input when the stage is disabled).
    pub deblurred: ImageTensor,
    /// Illumination compensation ratio in `[floor, 1]` (ones when the
    /// second stage is disabled).
    pub ratio: ImageTensor,
    /// Final output, same shape as the input.
    pub enhanced: ImageTensor,
    /// Stage-1 deep-supervision outputs, coarsest first, at padded dims.
    pub scale_outputs: Vec<ImageTensor>,
}

/// Padding applied by [`pad_to_multiple`]; allows exact crop-back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub bottom: usize,
    pub right: usize,
}

/// Folds an index into `[0, n)` by mirror reflection (edge sample included),
/// so padding works for any size, including single-pixel axes.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Reflection-pads the bottom/right edges up to the next multiple of `m`.
pub fn pad_to_multiple(img: &ImageTensor, m: usize) -> Result<(ImageTensor, PadRecord)> {
    if m == 0 {
        return Err(EnhanceError::Config("pad multiple must be >= 1".into()));
    }
    let (h, w, c) = img.data.dim();
    let target_h = h.div_ceil(m) * m;
    let target_w = w.div_ceil(m) * m;
    let rec = PadRecord {
        bottom: target_h - h,
        right: target_w - w,
    };
    if rec.bottom == 0 && rec.right == 0 {
        return Ok((img.clone(), rec));
    }
    let mut out = Array3::zeros((target_h, target_w, c));
    for y in 0..target_h {
        let sy = reflect_index(y as isize, h);
        for x in 0..target_w {
            let sx = reflect_index(x as isize, w);
            for ch in 0..c {
                out[[y, x, ch]] = img.data[[sy, sx, ch]];
            }
        }
    }
    Ok((ImageTensor::new(out, img.range)?, rec))
}

/// Removes padding added by [`pad_to_multiple`].
pub fn crop_back(img: &ImageTensor, rec: PadRecord) -> ImageTensor {
    let (h, w, _) = img.data.dim();
    let out = img
        .data
        .slice(ndarray::s![..h - rec.bottom, ..w - rec.right, ..])
        .to_owned();
    ImageTensor {
        data: out,
        range: img.range,
    }
}

/// Loads a PNG/JPEG/TIFF image, scaling to `[0, 1]` by the bit-depth
/// maximum. Grayscale is replicated to 3 channels; alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => EnhanceError::io(path, io),
        other => EnhanceError::Format(format!("{}: {other}", path.display())),
    })?;
    let (data, max, gray) = match &dynimg {
        DynamicImage::ImageLuma8(b) => (b.as_raw().iter().map(|&v| v as f64).collect(), 255.0, true),
        DynamicImage::ImageLumaA8(b) => (
            b.as_raw().chunks(2).map(|p| p[0] as f64).collect(),
            255.0,
            true,
        ),
        DynamicImage::ImageRgb8(b) => (b.as_raw().iter().map(|&v| v as f64).collect(), 255.0, false),
        DynamicImage::ImageRgba8(b) => (
            b.as_raw()
                .chunks(4)
                .flat_map(|p| p[..3].iter().map(|&v| v as f64))
                .collect(),
            255.0,
            false,
        ),
        DynamicImage::ImageLuma16(b) => (
            b.as_raw().iter().map(|&v| v as f64).collect(),
            65535.0,
            true,
        ),
        DynamicImage::ImageLumaA16(b) => (
            b.as_raw().chunks(2).map(|p| p[0] as f64).collect(),
            65535.0,
            true,
        ),
        DynamicImage::ImageRgb16(b) => (
            b.as_raw().iter().map(|&v| v as f64).collect(),
            65535.0,
            false,
        ),
        DynamicImage::ImageRgba16(b) => (
            b.as_raw()
                .chunks(4)
                .flat_map(|p| p[..3].iter().map(|&v| v as f64))
                .collect(),
            65535.0,
            false,
        ),
        other => {
            return Err(EnhanceError::Format(format!(
                "{}: unsupported bit depth or sample type {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let values: Vec<f64> = data;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    if gray {
        for y in 0..h {
            for x in 0..w {
                let v = values[y * w + x] / max;
                for c in 0..3 {
                    out[[y, x, c]] = v;
                }
            }
        }
    } else {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[y, x, c]] = values[(y * w + x) * 3 + c] / max;
                }
            }
        }
    }
    ImageTensor::unit(out)
}

/// Bit depth for [`save_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Saves a unit-range image as PNG or TIFF (by extension) at the given bit
/// depth. Quantization rounds half away from zero. Out-of-range values are a
/// contract violation; clamp first.
pub fn save_image(img: &ImageTensor, path: &Path, bit_depth: BitDepth) -> Result<()> {
    img.validate_unit()?;
    img.validate_image_boundary()?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" | "tif" | "tiff" => {}
        "jpg" | "jpeg" => {
            return Err(EnhanceError::Format(
                "jpeg write is not supported; use png or tiff".into(),
            ))
        }
        other => {
            return Err(EnhanceError::Format(format!(
                "unsupported output extension `{other}`; use png or tiff"
            )))
        }
    }
    let (h, w, c) = img.data.dim();
    let sample = |y: usize, x: usize, ch: usize| -> f64 {
        if c == 1 {
            img.data[[y, x, 0]]
        } else {
            img.data[[y, x, ch]]
        }
    };
    let result = match bit_depth {
        BitDepth::Eight => {
            let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
            for (x, y, px) in buf.enumerate_pixels_mut() {
                for ch in 0..3 {
                    px.0[ch] = (sample(y as usize, x as usize, ch) * 255.0).round() as u8;
                }
            }
            if c == 1 {
                let mut g = ImageBuffer::<Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
                for (x, y, px) in g.enumerate_pixels_mut() {
                    px.0[0] = (sample(y as usize, x as usize, 0) * 255.0).round() as u8;
                }
                DynamicImage::ImageLuma8(g).save(path)
            } else {
                DynamicImage::ImageRgb8(buf).save(path)
            }
        }
        BitDepth::Sixteen => {
            if c == 1 {
                let mut g = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
                for (x, y, px) in g.enumerate_pixels_mut() {
                    px.0[0] = (sample(y as usize, x as usize, 0) * 65535.0).round() as u16;
                }
                DynamicImage::ImageLuma16(g).save(path)
            } else {
                let mut buf = ImageBuffer::<Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
                for (x, y, px) in buf.enumerate_pixels_mut() {
                    for ch in 0..3 {
                        px.0[ch] = (sample(y as usize, x as usize, ch) * 65535.0).round() as u16;
                    }
                }
                DynamicImage::ImageRgb16(buf).save(path)
            }
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => EnhanceError::io(path, io),
        other => EnhanceError::Format(format!("{}: {other}", path.display())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn load_scales_by_bit_depth_maximum() {
        let dir = tmpdir();
        // 8-bit: pixel values 255 and 0.
        let p8 = dir.path().join("a.png");
        let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(2, 1, |x, _| {
            if x == 0 {
                Rgb([255, 255, 255])
            } else {
                Rgb([0, 0, 0])
            }
        });
        DynamicImage::ImageRgb8(buf).save(&p8).unwrap();
        let img = load_image(&p8).unwrap();
        assert_eq!(img.data[[0, 0, 0]], 1.0);
        assert_eq!(img.data[[0, 1, 0]], 0.0);

        // 16-bit: 32768 / 65535.
        let p16 = dir.path().join("b.png");
        let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(1, 1, |_, _| Luma([32768u16]));
        DynamicImage::ImageLuma16(buf).save(&p16).unwrap();
        let img = load_image(&p16).unwrap();
        let expect = 32768.0 / 65535.0;
        assert!((img.data[[0, 0, 0]] - expect).abs() < 1e-12);
        assert_eq!(img.channels(), 3, "grayscale replicated to 3 channels");
    }

    #[test]
    fn save_quantizes_half_away_from_zero() {
        let dir = tmpdir();
        let p = dir.path().join("q.png");
        let mut data = Array3::zeros((1, 3, 3));
        for c in 0..3 {
            data[[0, 0, c]] = 0.5;
            data[[0, 1, c]] = 1.0;
            data[[0, 2, c]] = 0.0;
        }
        let img = ImageTensor::unit(data).unwrap();
        save_image(&img, &p, BitDepth::Eight).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(0, 0).0[0], 128, "round(127.5) away from zero");
        assert_eq!(back.get_pixel(1, 0).0[0], 255);
        assert_eq!(back.get_pixel(2, 0).0[0], 0);
    }

    #[test]
    fn save_rejects_out_of_range() {
        let dir = tmpdir();
        let p = dir.path().join("r.png");
        let img = ImageTensor {
            data: Array3::from_elem((2, 2, 3), 1.5),
            range: RangeTag::Unit,
        };
        let err = save_image(&img, &p, BitDepth::Eight).unwrap_err();
        assert!(matches!(err, EnhanceError::Contract(_)));
    }

    #[test]
    fn save_rejects_jpeg() {
        let dir = tmpdir();
        let p = dir.path().join("x.jpg");
        let img = ImageTensor::constant(2, 2, 3, 0.5, RangeTag::Unit);
        let err = save_image(&img, &p, BitDepth::Eight).unwrap_err();
        assert!(matches!(err, EnhanceError::Format(_)));
    }

    #[test]
    fn load_missing_file_is_io_error_with_path() {
        let err = load_image(Path::new("/nonexistent/zz.png")).unwrap_err();
        match err {
            EnhanceError::Io { path, .. } => assert!(path.to_string_lossy().contains("zz.png")),
            other => panic!("expected io error, got {other}"),
        }
    }

    #[test]
    fn roundtrip_error_within_half_quantum() {
        let dir = tmpdir();
        for (depth, denom) in [(BitDepth::Eight, 255.0), (BitDepth::Sixteen, 65535.0)] {
            let p = dir.path().join(format!("rt{denom}.png"));
            let mut data = Array3::zeros((4, 5, 3));
            let mut v: f64 = 0.0;
            for e in data.iter_mut() {
                *e = v;
                v = (v + 0.137).fract();
            }
            let img = ImageTensor::unit(data).unwrap();
            save_image(&img, &p, depth).unwrap();
            let back = load_image(&p).unwrap();
            let tol = 1.0 / (2.0 * denom);
            assert!(img.max_abs_diff(&back) <= tol + 1e-12);
        }
    }

    #[test]
    fn pad_examples() {
        let img = ImageTensor::constant(250, 250, 3, 0.2, RangeTag::Unit);
        let (p, rec) = pad_to_multiple(&img, 8).unwrap();
        assert_eq!((p.height(), p.width()), (256, 256));
        assert_eq!(rec, PadRecord { bottom: 6, right: 6 });

        let img = ImageTensor::constant(256, 256, 1, 0.0, RangeTag::Unit);
        let (p, rec) = pad_to_multiple(&img, 8).unwrap();
        assert_eq!((p.height(), p.width()), (256, 256));
        assert_eq!(rec, PadRecord { bottom: 0, right: 0 });

        let img = ImageTensor::constant(1, 1, 3, 0.7, RangeTag::Unit);
        let (p, rec) = pad_to_multiple(&img, 4).unwrap();
        assert_eq!((p.height(), p.width()), (4, 4));
        assert_eq!(rec, PadRecord { bottom: 3, right: 3 });
        assert_eq!(p.data[[3, 3, 0]], 0.7, "single pixel replicates");
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut data = Array3::zeros((5, 7, 3));
        let mut v: f64 = 0.0;
        for e in data.iter_mut() {
            *e = v;
            v = (v + 0.31).fract();
        }
        let img = ImageTensor::unit(data).unwrap();
        let (p, rec) = pad_to_multiple(&img, 8).unwrap();
        let back = crop_back(&p, rec);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn reflect_index_folds() {
        // size 4: indices 0 1 2 3 | 3 2 1 0 | 0 1 2 3 ...
        assert_eq!(reflect_index(4, 4), 3);
        assert_eq!(reflect_index(5, 4), 2);
        assert_eq!(reflect_index(7, 4), 0);
        assert_eq!(reflect_index(8, 4), 0);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(9, 1), 0);
        assert_eq!(reflect_index(-1, 4), 0);
    }
}
