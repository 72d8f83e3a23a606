//! Plain 2D float kernels shared by the pure frequency ops and the
//! differentiable graph: average pooling, half-pixel bilinear scaling and
//! the orthonormal 2x2 Haar transform.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

/// Haar analysis weights per band, indexed `[band][u * 2 + v]` over the
/// 2x2 block; bands are LL, LH, HL, HH. The synthesis weights are the
/// same matrix (the scaled transform is orthogonal and symmetric).
pub const HAAR: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [-0.5, -0.5, 0.5, 0.5],
    [-0.5, 0.5, -0.5, 0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// Non-overlapping k-by-k mean pooling. Dims must divide by `k`.
pub fn avg_pool2d(src: ArrayView2<f64>, k: usize, mut out: ArrayViewMut2<f64>) {
    let (h, w) = src.dim();
    let (ho, wo) = (h / k, w / k);
    debug_assert_eq!(out.dim(), (ho, wo));
    let inv = 1.0 / (k * k) as f64;
    for oy in 0..ho {
        for ox in 0..wo {
            let mut s = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    s += src[[oy * k + dy, ox * k + dx]];
                }
            }
            out[[oy, ox]] = s * inv;
        }
    }
}

/// Distributes gradient of an average pool back to the source cells.
pub fn avg_pool2d_backward(grad_out: ArrayView2<f64>, k: usize, mut grad_src: ArrayViewMut2<f64>) {
    let (ho, wo) = grad_out.dim();
    let inv = 1.0 / (k * k) as f64;
    for oy in 0..ho {
        for ox in 0..wo {
            let g = grad_out[[oy, ox]] * inv;
            for dy in 0..k {
                for dx in 0..k {
                    grad_src[[oy * k + dy, ox * k + dx]] += g;
                }
            }
        }
    }
}

/// Sampling table for 1D half-pixel-center bilinear resizing.
/// Each output index maps to two clamped source indices with weights.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0f = src.floor();
            let t = src - i0f;
            let i0 = (i0f as isize).clamp(0, n_in as isize - 1) as usize;
            let i1 = ((i0f as isize) + 1).clamp(0, n_in as isize - 1) as usize;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (half-pixel centers,
/// borders clamped).
pub fn upsample_bilinear(src: ArrayView2<f64>, factor: usize, mut out: ArrayViewMut2<f64>) {
    let (h, w) = src.dim();
    let ty = bilinear_taps(h, h * factor);
    let tx = bilinear_taps(w, w * factor);
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            out[[oy, ox]] = wy0 * (wx0 * src[[y0, x0]] + wx1 * src[[y0, x1]])
                + wy1 * (wx0 * src[[y1, x0]] + wx1 * src[[y1, x1]]);
        }
    }
}

/// Adjoint of [`upsample_bilinear`]: scatters output gradient back.
pub fn upsample_bilinear_backward(
    grad_out: ArrayView2<f64>,
    factor: usize,
    mut grad_src: ArrayViewMut2<f64>,
) {
    let (h, w) = grad_src.dim();
    let ty = bilinear_taps(h, h * factor);
    let tx = bilinear_taps(w, w * factor);
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let g = grad_out[[oy, ox]];
            grad_src[[y0, x0]] += wy0 * wx0 * g;
            grad_src[[y0, x1]] += wy0 * wx1 * g;
            grad_src[[y1, x0]] += wy1 * wx0 * g;
            grad_src[[y1, x1]] += wy1 * wx1 * g;
        }
    }
}

/// One Haar analysis band via stride-2 correlation. Dims must be even.
pub fn haar_band(src: ArrayView2<f64>, band: usize, mut out: ArrayViewMut2<f64>) {
    let (h, w) = src.dim();
    let f = &HAAR[band];
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            let (y, x) = (2 * i, 2 * j);
            out[[i, j]] = f[0] * src[[y, x]]
                + f[1] * src[[y, x + 1]]
                + f[2] * src[[y + 1, x]]
                + f[3] * src[[y + 1, x + 1]];
        }
    }
}

/// Scatters one band back onto the 2x2 synthesis grid, accumulating.
pub fn haar_band_adjoint(band_vals: ArrayView2<f64>, band: usize, mut out: ArrayViewMut2<f64>) {
    let (hb, wb) = band_vals.dim();
    let f = &HAAR[band];
    for i in 0..hb {
        for j in 0..wb {
            let g = band_vals[[i, j]];
            let (y, x) = (2 * i, 2 * j);
            out[[y, x]] += f[0] * g;
            out[[y, x + 1]] += f[1] * g;
            out[[y + 1, x]] += f[2] * g;
            out[[y + 1, x + 1]] += f[3] * g;
        }
    }
}

/// Full synthesis from four bands of equal shape; output is 2x the size.
pub fn haar_inverse(bands: [ArrayView2<f64>; 4], out: &mut Array2<f64>) {
    out.fill(0.0);
    for (k, b) in bands.into_iter().enumerate() {
        haar_band_adjoint(b, k, out.view_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn upsample_one_pixel_is_constant() {
        let src = arr2(&[[2.0]]);
        let mut out = Array2::zeros((2, 2));
        upsample_bilinear(src.view(), 2, out.view_mut());
        assert!(out.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn upsample_interior_weights() {
        // 1D profile along one row: taps at 0.25/0.75 between samples.
        let src = arr2(&[[0.0, 4.0]]);
        let mut out = Array2::zeros((2, 4));
        upsample_bilinear(src.view(), 2, out.view_mut());
        for row in out.rows() {
            assert_eq!(row.as_slice().unwrap(), &[0.0, 1.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn haar_single_block() {
        let src = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let mut band = Array2::zeros((1, 1));
        let mut got = [0.0; 4];
        for k in 0..4 {
            haar_band(src.view(), k, band.view_mut());
            got[k] = band[[0, 0]];
        }
        assert_eq!(got, [0.5, -0.5, -0.5, 0.5]);

        let bands = [
            arr2(&[[0.5]]),
            arr2(&[[-0.5]]),
            arr2(&[[-0.5]]),
            arr2(&[[0.5]]),
        ];
        let mut rec = Array2::zeros((2, 2));
        haar_inverse(
            [bands[0].view(), bands[1].view(), bands[2].view(), bands[3].view()],
            &mut rec,
        );
        assert_eq!(rec, src);
    }
}
