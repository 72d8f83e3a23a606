//! Property tests over the tensor primitives and the two networks.

use ndarray::Array3;
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use uwf_enhance::degradation::{degrade, sample_blur, BlurSpec};
use uwf_enhance::fred::{FredConfig, FredNet};
use uwf_enhance::frequency::{aps_decompose, dwt_forward, dwt_inverse};
use uwf_enhance::imaging::{crop_back, pad_to_multiple, ImageTensor, RangeTag};
use uwf_enhance::nn::{image_to_nchw, Init, Tape};
use uwf_enhance::rice::{apply_retinex, RATIO_FLOOR};

fn image_from_values(h: usize, w: usize, c: usize, values: &[f64], range: RangeTag) -> ImageTensor {
    let mut data = Array3::zeros((h, w, c));
    for (e, v) in data.iter_mut().zip(values.iter().cycle()) {
        *e = *v;
    }
    ImageTensor::new(data, range).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pad_then_crop_is_identity(
        h in 1usize..64,
        w in 1usize..64,
        c in prop::sample::select(vec![1usize, 3]),
        m in 1usize..9,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..h * w * c).map(|_| rng.random()).collect();
        let img = image_from_values(h, w, c, &values, RangeTag::Unit);
        let (padded, rec) = pad_to_multiple(&img, m).unwrap();
        prop_assert_eq!(padded.height() % m, 0);
        prop_assert_eq!(padded.width() % m, 0);
        let back = crop_back(&padded, rec);
        prop_assert_eq!(back.data, img.data);
    }

    #[test]
    fn dwt_reconstruction_and_energy(
        hh in 1usize..32,
        ww in 1usize..32,
        c in 1usize..9,
        seed in 0u64..1000,
    ) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..h * w * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let x = image_from_values(h, w, c, &values, RangeTag::Signed);
        let bands = dwt_forward(&x).unwrap();
        let rec = dwt_inverse(&bands).unwrap();
        prop_assert!(rec.max_abs_diff(&x) <= 1e-5);
        let ex: f64 = x.data.iter().map(|v| v * v).sum();
        let eb: f64 = [&bands.ll, &bands.lh, &bands.hl, &bands.hh]
            .iter()
            .map(|b| b.data.iter().map(|v| v * v).sum::<f64>())
            .sum();
        prop_assert!((ex - eb).abs() <= 1e-4 * ex.max(1.0));
    }

    #[test]
    fn aps_sum_and_identity(
        hp in 1usize..16,
        wp in 1usize..16,
        pool in 1usize..5,
        seed in 0u64..1000,
    ) {
        let (h, w) = (hp * pool, wp * pool);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..h * w * 3).map(|_| rng.random()).collect();
        let x = image_from_values(h, w, 3, &values, RangeTag::Unit);
        let pair = aps_decompose(&x, pool).unwrap();
        let err = (&pair.low.data + &pair.high.data - &x.data)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        prop_assert!(err <= 1e-6);
        if pool == 1 {
            prop_assert_eq!(&pair.low.data, &x.data);
            prop_assert!(pair.high.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blur_never_increases_total_variation(
        h in 12usize..28,
        w in 12usize..28,
        sigma_milli in 500u64..2000,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..h * w * 3).map(|_| rng.random()).collect();
        let img = image_from_values(h, w, 3, &values, RangeTag::Unit);
        let sigma = sigma_milli as f64 / 1000.0;
        let spec = BlurSpec {
            sigma_range: (sigma, sigma),
            kernel_size_range: (3, 11),
            ..BlurSpec::default()
        };
        let kernel = sample_blur(&spec, &mut rng).unwrap();
        let out = degrade(&img, &kernel).unwrap();
        let tv = |t: &ImageTensor| -> f64 {
            let (hh, ww, cc) = t.data.dim();
            let mut s = 0.0;
            for ch in 0..cc {
                for y in 0..hh {
                    for x in 0..ww - 1 {
                        s += (t.data[[y, x + 1, ch]] - t.data[[y, x, ch]]).abs();
                    }
                }
                for y in 0..hh - 1 {
                    for x in 0..ww {
                        s += (t.data[[y + 1, x, ch]] - t.data[[y, x, ch]]).abs();
                    }
                }
            }
            s
        };
        prop_assert!(tv(&out) <= tv(&img) + 1e-9);
    }

    #[test]
    fn retinex_division_monotone_and_bounded(
        seed in 0u64..2000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..48).map(|_| rng.random()).collect();
        let img = image_from_values(4, 4, 3, &values, RangeTag::Unit);
        let rvals: Vec<f64> = (0..48)
            .map(|_| RATIO_FLOOR + rng.random::<f64>() * (1.0 - RATIO_FLOOR))
            .collect();
        let ratio = image_from_values(4, 4, 3, &rvals, RangeTag::Unit);
        let out = apply_retinex(&img, &ratio).unwrap();
        prop_assert!(out.min() >= 0.0 && out.max() <= 1.0);
        // Never darkens: r <= 1 everywhere.
        prop_assert!(out
            .data
            .iter()
            .zip(img.data.iter())
            .all(|(o, i)| *o >= i.min(1.0) - 1e-12));
    }
}

/// Re-decomposing the extracted low band leaves far less high-frequency
/// residue than the original carried: the separation is a contraction.
/// (Exact idempotence does not hold for half-pixel bilinear upsampling.)
#[test]
fn aps_low_band_redecomposition_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..30 {
        let h = 2 * rng.random_range(4..32usize);
        let w = 2 * rng.random_range(4..32usize);
        let values: Vec<f64> = (0..h * w * 3).map(|_| rng.random()).collect();
        let x = image_from_values(h, w, 3, &values, RangeTag::Unit);
        let first = aps_decompose(&x, 2).unwrap();
        let h1 = first.high.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let second = aps_decompose(&first.low, 2).unwrap();
        let h2 = second.high.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(h2 <= 0.5 * h1, "contraction violated: {h2} vs {h1}");
    }
    // Constants are exactly idempotent.
    let c = ImageTensor::constant(16, 16, 3, 0.42, RangeTag::Unit);
    let pair = aps_decompose(&c, 2).unwrap();
    let again = aps_decompose(&pair.low, 2).unwrap();
    assert!(again.high.data.iter().all(|&v| v.abs() <= 1e-12));
}

/// Spot-check network gradients against central finite differences and
/// confirm every parameter's gradient is finite.
#[test]
fn fred_gradient_flow_matches_finite_differences() {
    let net = FredNet::with_head_init(FredConfig::default(), true, 33, Init::He).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = Array3::zeros((16, 16, 3));
    for e in data.iter_mut() {
        *e = rng.random::<f64>();
    }
    let img = ImageTensor::unit(data).unwrap();
    let input_arr = image_to_nchw(&img);

    let forward_loss = |params_override: Option<(usize, usize, f64)>| -> f64 {
        // params_override: (param index, flat element, delta)
        let mut t = Tape::new();
        let reg = match params_override {
            None => net.params.register(&mut t),
            Some((pi, flat, delta)) => {
                let mut t2 = Tape::new();
                let mut ids = Vec::new();
                for i in 0..net.params.len() {
                    let mut v = net.params.value_by_index(i).clone();
                    if i == pi {
                        v.as_slice_mut().unwrap()[flat] += delta;
                    }
                    ids.push(t2.var(v));
                }
                t = t2;
                uwf_enhance::nn::Registered::from_ids(ids)
            }
        };
        let input = t.constant(input_arr.clone());
        let fwd = net.forward(&mut t, &reg, input).unwrap();
        let finest = *fwd.outputs.last().unwrap();
        let loss = t.mean_all(finest);
        t.scalar_value(loss)
    };

    // Analytic gradients once.
    let mut t = Tape::new();
    let reg = net.params.register(&mut t);
    let input = t.constant(input_arr.clone());
    let fwd = net.forward(&mut t, &reg, input).unwrap();
    let finest = *fwd.outputs.last().unwrap();
    let loss = t.mean_all(finest);
    let grads = t.backward(loss).unwrap();
    for i in 0..net.params.len() {
        let g = grads
            .get(reg.node_by_index(i))
            .expect("every parameter receives a gradient");
        assert!(g.iter().all(|v| v.is_finite()));
    }

    // Ten random spot checks at step 1e-5, tolerance 1e-4 relative.
    let step = 1e-5;
    for _ in 0..10 {
        let pi = rng.random_range(0..net.params.len());
        let len = net.params.value_by_index(pi).len();
        let flat = rng.random_range(0..len);
        let plus = forward_loss(Some((pi, flat, step)));
        let minus = forward_loss(Some((pi, flat, -step)));
        let fd = (plus - minus) / (2.0 * step);
        let an = grads.get(reg.node_by_index(pi)).unwrap().as_slice().unwrap()[flat];
        let denom = fd.abs().max(an.abs()).max(1e-8);
        assert!(
            (fd - an).abs() / denom <= 1e-4,
            "param {pi} coord {flat}: fd={fd:.10e} tape={an:.10e}"
        );
    }
}
