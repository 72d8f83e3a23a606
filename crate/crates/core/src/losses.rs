//! Training losses: multi-scale content and frequency reconstruction plus
//! perceptual distance for the deblurring stage; fidelity, edge-aware
//! smoothness and exposure control for the zero-reference illumination
//! stage.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{EnhanceError, Result};
use crate::imaging::ImageTensor;
use crate::nn::layers::he_init;
use crate::nn::{image_to_nchw, Arr, NodeId, Tape};

/// Weights of the deblurring objective: `content + beta * frequency +
/// gamma * perceptual`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeblurLossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for DeblurLossWeights {
    fn default() -> Self {
        DeblurLossWeights {
            beta: 0.1,
            gamma: 0.01,
        }
    }
}

/// Weights and constants of the illumination objective:
/// `alpha * fidelity + smoothness + exposure`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IllumLossWeights {
    pub alpha: f64,
    pub exposure_target: f64,
    pub patch: usize,
    pub sigma_w: f64,
}

impl Default for IllumLossWeights {
    fn default() -> Self {
        IllumLossWeights {
            alpha: 1.5,
            exposure_target: 0.6,
            patch: 16,
            sigma_w: 0.1,
        }
    }
}

/// Maps an image node to a list of feature maps, deterministically.
pub trait FeatureExtractor {
    fn extract(&self, t: &mut Tape, img: NodeId) -> Vec<NodeId>;
}

/// Default extractor: a fixed random-weight three-layer 3x3 conv stack.
/// Weights are frozen constants derived from the seed, so distances are
/// reproducible across runs.
pub struct SeededConvExtractor {
    layers: Vec<(Arr, Arr)>,
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x7e47;

impl SeededConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(3usize, 16usize), (16, 16), (16, 16)];
        let layers = widths
            .iter()
            .map(|&(cin, cout)| {
                (
                    he_init(&mut rng, &[cout, cin, 3, 3], cin * 9),
                    ArrayD::zeros(IxDyn(&[cout])),
                )
            })
            .collect();
        SeededConvExtractor { layers }
    }
}

impl Default for SeededConvExtractor {
    fn default() -> Self {
        SeededConvExtractor::new(DEFAULT_EXTRACTOR_SEED)
    }
}

impl FeatureExtractor for SeededConvExtractor {
    fn extract(&self, t: &mut Tape, img: NodeId) -> Vec<NodeId> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut x = img;
        for (w, b) in &self.layers {
            let wn = t.constant(w.clone());
            let bn = t.constant(b.clone());
            let y = t.conv2d(x, wn, bn, 1);
            x = t.relu(y);
            feats.push(x);
        }
        feats
    }
}

/// Sum over scales of mean absolute error.
pub fn content_loss(t: &mut Tape, preds: &[NodeId], targets: &[NodeId]) -> NodeId {
    assert_eq!(preds.len(), targets.len());
    let terms: Vec<(f64, NodeId)> = preds
        .iter()
        .zip(targets)
        .map(|(&p, &g)| (1.0, t.l1_loss(p, g)))
        .collect();
    t.weighted_scalar_sum(&terms)
}

/// Sum over scales of mean L1 distance between unnormalized 2D Fourier
/// transforms (real and imaginary parts counted separately).
pub fn msfr_loss(t: &mut Tape, preds: &[NodeId], targets: &[NodeId]) -> NodeId {
    assert_eq!(preds.len(), targets.len());
    let terms: Vec<(f64, NodeId)> = preds
        .iter()
        .zip(targets)
        .map(|(&p, &g)| (1.0, t.spectral_l1(p, g)))
        .collect();
    t.weighted_scalar_sum(&terms)
}

/// Sum over extractor layers of mean squared feature difference.
pub fn perceptual_loss(
    t: &mut Tape,
    pred: NodeId,
    target: NodeId,
    extractor: &dyn FeatureExtractor,
) -> NodeId {
    let fp = extractor.extract(t, pred);
    let ft = extractor.extract(t, target);
    assert_eq!(fp.len(), ft.len());
    let terms: Vec<(f64, NodeId)> = fp
        .iter()
        .zip(&ft)
        .map(|(&a, &b)| (1.0, t.mse_loss(a, b)))
        .collect();
    t.weighted_scalar_sum(&terms)
}

/// Mean squared error between the illumination estimate and the input.
pub fn fidelity_loss(t: &mut Tape, illum: NodeId, input: NodeId) -> NodeId {
    t.mse_loss(illum, input)
}

/// Edge-aware total variation: neighbor differences of `illum`, weighted
/// by `exp(-sum_c dguide^2 / (2 sigma^2))` from the guide node's values,
/// so smoothing is suppressed across true edges.
pub fn smooth_loss(t: &mut Tape, illum: NodeId, guide: NodeId, sigma_w: f64) -> NodeId {
    let g = t.value(guide).clone();
    let (wh, wv) = edge_weights(&g, sigma_w);
    t.edge_tv(illum, wh, wv)
}

/// Mean absolute deviation of patch gray means from the target level.
pub fn exposure_loss(t: &mut Tape, enhanced: NodeId, target: f64, patch: usize) -> NodeId {
    t.exposure(enhanced, target, patch)
}

/// Deblurring objective; the perceptual term uses the finest scale only.
/// Returns `(total, [content, msfr, perceptual])`.
pub fn deblur_total(
    t: &mut Tape,
    preds: &[NodeId],
    targets: &[NodeId],
    w: &DeblurLossWeights,
    extractor: &dyn FeatureExtractor,
) -> (NodeId, [NodeId; 3]) {
    let cont = content_loss(t, preds, targets);
    let msfr = msfr_loss(t, preds, targets);
    let finest = *preds.last().expect("at least one scale");
    let finest_target = *targets.last().expect("at least one scale");
    let per = perceptual_loss(t, finest, finest_target, extractor);
    let total = t.weighted_scalar_sum(&[(1.0, cont), (w.beta, msfr), (w.gamma, per)]);
    (total, [cont, msfr, per])
}

/// Illumination objective. The guide for the smoothness weights is the
/// stage input. Returns `(total, [fidelity, smoothness, exposure])`.
pub fn illum_total(
    t: &mut Tape,
    illum: NodeId,
    enhanced: NodeId,
    input: NodeId,
    w: &IllumLossWeights,
) -> (NodeId, [NodeId; 3]) {
    let fid = fidelity_loss(t, illum, input);
    let smo = smooth_loss(t, illum, input, w.sigma_w);
    let exp = exposure_loss(t, enhanced, w.exposure_target, w.patch);
    let total = t.weighted_scalar_sum(&[(w.alpha, fid), (1.0, smo), (1.0, exp)]);
    (total, [fid, smo, exp])
}

/// Edge weights from a guide batch `[N, C, H, W]`:
/// horizontal `[N, H, W-1]` and vertical `[N, H-1, W]`.
pub(crate) fn edge_weights(guide: &Arr, sigma_w: f64) -> (Arr, Arr) {
    let s = guide.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let denom = 2.0 * sigma_w * sigma_w;
    let mut wh = ArrayD::<f64>::zeros(IxDyn(&[n, h, w.saturating_sub(1)]));
    let mut wv = ArrayD::<f64>::zeros(IxDyn(&[n, h.saturating_sub(1), w]));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let mut d2 = 0.0;
                for ch in 0..c {
                    let d = guide[[i, ch, y, x]] - guide[[i, ch, y, x + 1]];
                    d2 += d * d;
                }
                wh[[i, y, x]] = (-d2 / denom).exp();
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let mut d2 = 0.0;
                for ch in 0..c {
                    let d = guide[[i, ch, y, x]] - guide[[i, ch, y + 1, x]];
                    d2 += d * d;
                }
                wv[[i, y, x]] = (-d2 / denom).exp();
            }
        }
    }
    (wh, wv)
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(EnhanceError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

fn scale_lists_to_nodes(
    t: &mut Tape,
    preds: &[ImageTensor],
    targets: &[ImageTensor],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if preds.len() != targets.len() {
        return Err(EnhanceError::Shape(format!(
            "scale count mismatch: {} vs {}",
            preds.len(),
            targets.len()
        )));
    }
    let mut pn = Vec::new();
    let mut tn = Vec::new();
    for (p, g) in preds.iter().zip(targets) {
        check_same_shape(p, g, "per-scale shape mismatch")?;
        pn.push(t.constant(image_to_nchw(p)));
        tn.push(t.constant(image_to_nchw(g)));
    }
    Ok((pn, tn))
}

/// Multi-scale content loss on image tensors.
pub fn loss_content(preds: &[ImageTensor], targets: &[ImageTensor]) -> Result<f64> {
    let mut t = Tape::new();
    let (pn, tn) = scale_lists_to_nodes(&mut t, preds, targets)?;
    let l = content_loss(&mut t, &pn, &tn);
    Ok(t.scalar_value(l))
}

/// Multi-scale frequency reconstruction loss on image tensors.
pub fn loss_msfr(preds: &[ImageTensor], targets: &[ImageTensor]) -> Result<f64> {
    let mut t = Tape::new();
    let (pn, tn) = scale_lists_to_nodes(&mut t, preds, targets)?;
    let l = msfr_loss(&mut t, &pn, &tn);
    Ok(t.scalar_value(l))
}

/// Perceptual loss on image tensors.
pub fn loss_perceptual(
    pred: &ImageTensor,
    target: &ImageTensor,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    check_same_shape(pred, target, "perceptual")?;
    let mut t = Tape::new();
    let p = t.constant(image_to_nchw(pred));
    let g = t.constant(image_to_nchw(target));
    let l = perceptual_loss(&mut t, p, g, extractor);
    Ok(t.scalar_value(l))
}

/// Fidelity loss on image tensors.
pub fn loss_fidelity(illum: &ImageTensor, input: &ImageTensor) -> Result<f64> {
    check_same_shape(illum, input, "fidelity")?;
    let mut t = Tape::new();
    let i = t.constant(image_to_nchw(illum));
    let g = t.constant(image_to_nchw(input));
    let l = fidelity_loss(&mut t, i, g);
    Ok(t.scalar_value(l))
}

/// Edge-aware smoothness loss on image tensors.
pub fn loss_smooth(illum: &ImageTensor, guide: &ImageTensor, sigma_w: f64) -> Result<f64> {
    check_same_shape(illum, guide, "smoothness")?;
    let mut t = Tape::new();
    let i = t.constant(image_to_nchw(illum));
    let g = t.constant(image_to_nchw(guide));
    let l = smooth_loss(&mut t, i, g, sigma_w);
    Ok(t.scalar_value(l))
}

/// Exposure control loss on an image tensor.
pub fn loss_exposure(enhanced: &ImageTensor, target: f64, patch: usize) -> Result<f64> {
    let (h, w, _) = enhanced.data.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(EnhanceError::Shape(format!(
            "dims {h}x{w} not divisible by patch {patch}; pad first"
        )));
    }
    let mut t = Tape::new();
    let e = t.constant(image_to_nchw(enhanced));
    let l = exposure_loss(&mut t, e, target, patch);
    Ok(t.scalar_value(l))
}

/// Full deblurring objective on image tensors.
pub fn loss_deblur_total(
    preds: &[ImageTensor],
    targets: &[ImageTensor],
    w: &DeblurLossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let mut t = Tape::new();
    let (pn, tn) = scale_lists_to_nodes(&mut t, preds, targets)?;
    let (total, _) = deblur_total(&mut t, &pn, &tn, w, extractor);
    Ok(t.scalar_value(total))
}

/// Full illumination objective on image tensors.
pub fn loss_illum_total(
    illum: &ImageTensor,
    enhanced: &ImageTensor,
    input: &ImageTensor,
    w: &IllumLossWeights,
) -> Result<f64> {
    check_same_shape(illum, input, "fidelity")?;
    check_same_shape(enhanced, input, "exposure input")?;
    let (h, wd, _) = enhanced.data.dim();
    if w.patch == 0 || h % w.patch != 0 || wd % w.patch != 0 {
        return Err(EnhanceError::Shape(format!(
            "dims {h}x{wd} not divisible by patch {}; pad first",
            w.patch
        )));
    }
    let mut t = Tape::new();
    let i = t.constant(image_to_nchw(illum));
    let e = t.constant(image_to_nchw(enhanced));
    let g = t.constant(image_to_nchw(input));
    let (total, _) = illum_total(&mut t, i, e, g, w);
    Ok(t.scalar_value(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RangeTag;
    use ndarray::Array3;

    fn img(h: usize, w: usize, v: f64) -> ImageTensor {
        ImageTensor::constant(h, w, 3, v, RangeTag::Signed)
    }

    #[test]
    fn content_identity_and_offsets() {
        let a = img(8, 8, 0.4);
        assert_eq!(loss_content(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let b = img(8, 8, 0.5);
        let l = loss_content(&[b.clone()], &[a.clone()]).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        // Two scales with deviations 0.1 and 0.3 add up.
        let p = vec![img(4, 4, 0.4), img(8, 8, 0.8)];
        let g = vec![img(4, 4, 0.3), img(8, 8, 0.5)];
        let l = loss_content(&p, &g).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
    }

    #[test]
    fn content_rejects_shape_mismatch() {
        let a = img(8, 8, 0.4);
        let b = img(4, 4, 0.4);
        assert!(matches!(
            loss_content(&[a], &[b]),
            Err(EnhanceError::Shape(_))
        ));
    }

    #[test]
    fn msfr_identity_and_constant_offset() {
        let a = img(6, 5, 0.3);
        assert_eq!(loss_msfr(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let b = img(6, 5, 0.3 + 0.21);
        let l = loss_msfr(&[b], &[a]).unwrap();
        assert!((l - 0.21).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn msfr_offset_matches_direct_dft_oracle() {
        // Independent O(N^2) DFT evaluation of the same quantity.
        let h = 4;
        let w = 4;
        let mut pa = Array3::zeros((h, w, 3));
        let mut ta = Array3::zeros((h, w, 3));
        let mut v: f64 = 0.1;
        for (p, t) in pa.iter_mut().zip(ta.iter_mut()) {
            *p = v;
            *t = (v * 1.7).fract();
            v = (v + 0.23).fract();
        }
        let pred = ImageTensor::new(pa.clone(), RangeTag::Signed).unwrap();
        let target = ImageTensor::new(ta.clone(), RangeTag::Signed).unwrap();
        let got = loss_msfr(
            &[pred],
            &[target],
        )
        .unwrap();

        let tau = std::f64::consts::TAU;
        let mut total = 0.0;
        for c in 0..3 {
            for ky in 0..h {
                for kx in 0..w {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let ang = -tau * ((ky * y) as f64 / h as f64
                                + (kx * x) as f64 / w as f64);
                            let d = pa[[y, x, c]] - ta[[y, x, c]];
                            re += d * ang.cos();
                            im += d * ang.sin();
                        }
                    }
                    total += re.abs() + im.abs();
                }
            }
        }
        let oracle = total / (h * w * 3) as f64;
        assert!((got - oracle).abs() < 1e-9, "got {got}, oracle {oracle}");
    }

    #[test]
    fn perceptual_identity_symmetry_reproducibility() {
        let ex = SeededConvExtractor::default();
        let a = ImageTensor::new(
            Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
                ((y * 31 + x * 7 + c * 3) as f64 * 0.013).fract()
            }),
            RangeTag::Unit,
        )
        .unwrap();
        let b = ImageTensor::new(
            Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
                ((y * 17 + x * 5 + c * 11) as f64 * 0.019).fract()
            }),
            RangeTag::Unit,
        )
        .unwrap();
        assert_eq!(loss_perceptual(&a, &a, &ex).unwrap(), 0.0);
        let lab = loss_perceptual(&a, &b, &ex).unwrap();
        let lba = loss_perceptual(&b, &a, &ex).unwrap();
        assert_eq!(lab, lba);
        let ex2 = SeededConvExtractor::default();
        assert_eq!(loss_perceptual(&a, &b, &ex2).unwrap(), lab);
        assert!(lab > 0.0);
    }

    #[test]
    fn fidelity_squared_constant() {
        let a = img(8, 8, 0.3);
        let b = img(8, 8, 0.5);
        assert_eq!(loss_fidelity(&a, &a).unwrap(), 0.0);
        let l = loss_fidelity(&b, &a).unwrap();
        assert!((l - 0.04).abs() < 1e-12);
    }

    #[test]
    fn smooth_constant_and_step() {
        let c = img(8, 8, 0.7);
        assert_eq!(loss_smooth(&c, &c, 0.1).unwrap(), 0.0);

        // Constant guide (all weights 1); illumination step of height s at
        // one column boundary hits 1/(W-1) of horizontal pairs.
        let (h, w) = (4, 5);
        let s = 0.3;
        let mut il = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    il[[y, x, ch]] = if x < 2 { 0.2 } else { 0.2 + s };
                }
            }
        }
        let illum = ImageTensor::new(il, RangeTag::Signed).unwrap();
        let guide = img(h, w, 0.5);
        let got = loss_smooth(&illum, &guide, 0.1).unwrap();
        let expect = s / (w - 1) as f64;
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");

        // A huge guide edge exactly where the illumination steps kills the
        // contribution.
        let mut gd = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    gd[[y, x, ch]] = if x < 2 { 0.0 } else { 1000.0 };
                }
            }
        }
        let sharp_guide = ImageTensor::new(gd, RangeTag::Signed).unwrap();
        let got = loss_smooth(&illum, &sharp_guide, 0.1).unwrap();
        assert!(got < 1e-12, "edge-aligned step should be free, got {got}");
    }

    #[test]
    fn exposure_examples() {
        let e = 0.6;
        assert!(loss_exposure(&img(8, 8, e), e, 4).unwrap() < 1e-12);
        let l = loss_exposure(&img(8, 8, 0.2), e, 4).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
        // Two half-images at 0.4 / 0.8 with patch dividing the halves.
        let mut data = Array3::zeros((8, 8, 3));
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    data[[y, x, c]] = if x < 4 { 0.4 } else { 0.8 };
                }
            }
        }
        let half = ImageTensor::new(data, RangeTag::Unit).unwrap();
        let l = loss_exposure(&half, e, 4).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
        // Indivisible dims are rejected.
        assert!(loss_exposure(&img(6, 8, 0.5), e, 4).is_err());
    }

    #[test]
    fn deblur_total_weight_isolation() {
        let ex = SeededConvExtractor::default();
        let p = vec![img(8, 8, 0.45)];
        let g = vec![img(8, 8, 0.4)];
        let only_content = loss_deblur_total(
            &p,
            &g,
            &DeblurLossWeights {
                beta: 0.0,
                gamma: 0.0,
            },
            &ex,
        )
        .unwrap();
        let cont = loss_content(&p, &g).unwrap();
        assert_eq!(only_content, cont);
        assert_eq!(
            loss_deblur_total(&g, &g, &DeblurLossWeights::default(), &ex).unwrap(),
            0.0
        );
    }

    #[test]
    fn illum_total_vanishes_on_ideal_config() {
        let w = IllumLossWeights {
            alpha: 0.0,
            ..IllumLossWeights::default()
        };
        let illum = img(16, 16, 0.9);
        let enhanced = img(16, 16, w.exposure_target);
        let input = img(16, 16, 0.5);
        let l = loss_illum_total(&illum, &enhanced, &input, &w).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn illum_total_terms_match_standalone_ops() {
        let w = IllumLossWeights::default();
        let illum = img(16, 16, 0.8);
        let enhanced = img(16, 16, 0.3);
        let input = img(16, 16, 0.55);
        let total = loss_illum_total(&illum, &enhanced, &input, &w).unwrap();
        let expect = w.alpha * loss_fidelity(&illum, &input).unwrap()
            + loss_smooth(&illum, &input, w.sigma_w).unwrap()
            + loss_exposure(&enhanced, w.exposure_target, w.patch).unwrap();
        assert!((total - expect).abs() < 1e-12);
    }
}
