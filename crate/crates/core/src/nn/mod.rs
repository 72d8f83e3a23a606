//! Minimal reverse-mode autodiff and layer toolkit backing the networks.

pub mod layers;
pub mod tape;

pub use layers::{ChannelGate, Conv2dLayer, Init, ParamId, ParamStore, Registered, ResBlock};
pub use tape::{Arr, Gradients, NodeId, Tape};

use ndarray::{ArrayD, IxDyn};

use crate::imaging::{ImageTensor, RangeTag};

/// Stacks `(H, W, C)` images into one `[N, C, H, W]` array.
pub fn batch_to_nchw(imgs: &[&ImageTensor]) -> Arr {
    assert!(!imgs.is_empty());
    let (h, w, c) = imgs[0].data.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[imgs.len(), c, h, w]));
    for (i, img) in imgs.iter().enumerate() {
        assert_eq!(img.data.dim(), (h, w, c), "batch shape mismatch");
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[i, ch, y, x]] = img.data[[y, x, ch]];
                }
            }
        }
    }
    out
}

/// Converts one `(H, W, C)` image into a `[1, C, H, W]` array.
pub fn image_to_nchw(img: &ImageTensor) -> Arr {
    batch_to_nchw(&[img])
}

/// Extracts sample `i` of a `[N, C, H, W]` array as an `(H, W, C)` image.
pub fn nchw_to_image(arr: &Arr, i: usize, range: RangeTag) -> ImageTensor {
    let s = arr.shape();
    assert_eq!(s.len(), 4);
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut data = ndarray::Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[[y, x, ch]] = arr[[i, ch, y, x]];
            }
        }
    }
    ImageTensor { data, range }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_roundtrip() {
        let mut data = ndarray::Array3::zeros((3, 4, 2));
        let mut v = 0.0;
        for e in data.iter_mut() {
            *e = v;
            v += 0.01;
        }
        let img = ImageTensor::new(data, RangeTag::Signed).unwrap();
        let arr = image_to_nchw(&img);
        assert_eq!(arr.shape(), [1, 2, 3, 4]);
        let back = nchw_to_image(&arr, 0, RangeTag::Signed);
        assert_eq!(back.data, img.data);
    }
}
