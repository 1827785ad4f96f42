use mlb_core::attention::{attend, classify, forward, glimpse_pool, AttentionModelParams, ModelDims};
use mlb_core::data::AnswerMultiset;
use mlb_core::pooling::{full_bilinear, low_rank_pool, nonlinear_pool, FullBilinearParams, Placement, PoolingParams};
use mlb_core::sketch::{
    circular_convolve_direct, circular_convolve_fft, compact_bilinear_pool, outer_product_sketch, SketchParams,
};
use mlb_core::tensor::{read_tensor, write_tensor};
use mlb_core::training::clip_gradients;
use mlb_core::{Activation, Rng, Tensor};
use proptest::prelude::*;

fn random_pooling(n: usize, m: usize, d: usize, c: usize, rng: &mut Rng) -> PoolingParams {
    PoolingParams::new(
        rng.uniform_tensor(&[n, d], 1.0),
        rng.uniform_tensor(&[m, d], 1.0),
        rng.uniform_tensor(&[d, c], 1.0),
        rng.uniform_tensor(&[c], 1.0),
    )
    .unwrap()
}

// W_i[j][k] = Σ_r U[j,r] P[r,i] V[k,r], built with plain loops.
fn reconstructed(p: &PoolingParams) -> FullBilinearParams {
    let (n, d) = p.u.dims2().unwrap();
    let (m, _) = p.v.dims2().unwrap();
    let c = p.b.len();
    let mut w = vec![0.0; c * n * m];
    for i in 0..c {
        for j in 0..n {
            for k in 0..m {
                w[(i * n + j) * m + k] = (0..d).map(|r| p.u.at(j, r) * p.p.at(r, i) * p.v.at(k, r)).sum();
            }
        }
    }
    FullBilinearParams::new(Tensor::new(vec![c, n, m], w).unwrap(), p.b.clone()).unwrap()
}

fn small_model(seed: u64, glimpses: usize, answers: usize) -> (AttentionModelParams, Tensor, Tensor) {
    let dims = ModelDims { n: 5, m: 4, d: 3, glimpses, lattice: 2, answers };
    let mut rng = Rng::new(seed);
    let mut params = AttentionModelParams::init(dims, true, 0.0, &mut rng).unwrap();
    for t in params.tensors_mut() {
        *t = rng.uniform_tensor(t.shape(), 1.5);
    }
    let q = rng.uniform_tensor(&[dims.n], 2.0);
    let f = rng.uniform_tensor(&[dims.cells(), dims.m], 2.0);
    (params, q, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn low_rank_matches_reconstructed_bilinear(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, d in 1usize..5, c in 1usize..4) {
        let mut rng = Rng::new(seed);
        let p = random_pooling(n, m, d, c, &mut rng);
        let x = rng.uniform_tensor(&[n], 1.0);
        let y = rng.uniform_tensor(&[m], 1.0);
        let lr = low_rank_pool(&p, &x, &y).unwrap();
        let full = full_bilinear(&reconstructed(&p), &x, &y).unwrap();
        prop_assert!(lr.max_abs_diff(&full).unwrap() < 1e-12);
    }

    #[test]
    fn identity_activation_placements_agree(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let p = random_pooling(n, m, d, 2, &mut rng);
        let x = rng.uniform_tensor(&[n], 1.0);
        let y = rng.uniform_tensor(&[m], 1.0);
        let none = nonlinear_pool(&p, &x, &y, Placement::None).unwrap();
        let before = nonlinear_pool(&p.clone().with_activation(Activation::Identity), &x, &y, Placement::Before).unwrap();
        prop_assert!(none.max_abs_diff(&before).unwrap() < 1e-14);
        prop_assert!(none.max_abs_diff(&low_rank_pool(&p, &x, &y).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn fft_convolution_matches_direct(a in prop::collection::vec(-10.0f64..10.0, 1..80), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let b: Vec<f64> = (0..a.len()).map(|_| rng.uniform(-10.0, 10.0)).collect();
        let fast = circular_convolve_fft(&a, &b);
        let slow = circular_convolve_direct(&a, &b);
        for (u, v) in fast.iter().zip(&slow) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn compact_pool_is_the_outer_product_sketch(seed in any::<u64>(), nx in 1usize..6, ny in 1usize..6, d in 1usize..8) {
        let mut rng = Rng::new(seed);
        let sp = SketchParams::sample(nx, ny, d, &mut rng).unwrap();
        let x = rng.uniform_tensor(&[nx], 1.0);
        let y = rng.uniform_tensor(&[ny], 1.0);
        let a = compact_bilinear_pool(&x, &y, &sp).unwrap();
        let b = outer_product_sketch(&x, &y, &sp).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
        for (v, hit) in a.data().iter().zip(sp.reachable()) {
            if !hit {
                prop_assert_eq!(v.to_bits(), 0f64.to_bits());
            }
        }
    }

    #[test]
    fn attention_and_answers_are_distributions(seed in any::<u64>(), glimpses in 1usize..3, answers in 2usize..5) {
        let (params, q, f) = small_model(seed, glimpses, answers);
        let alpha = attend(&params, &q, &f).unwrap();
        prop_assert_eq!(alpha.shape(), &[glimpses, 4][..]);
        for g in 0..glimpses {
            prop_assert!((alpha.row(g).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(alpha.row(g).iter().all(|&a| a >= 0.0));
        }
        let probs = forward(&params, &q, &f).unwrap();
        prop_assert!((probs.sum() - 1.0).abs() < 1e-12);
        let vhat = glimpse_pool(&alpha, &f).unwrap();
        let direct = classify(&params, &q, &vhat).unwrap();
        prop_assert!(direct.max_abs_diff(&probs).unwrap() < 1e-12);
    }

    #[test]
    fn clipping_is_bounded_and_idempotent(values in prop::collection::vec(-1e6f64..1e6, 1..40), theta in 0.0f64..100.0) {
        let g = Tensor::from_vec(values.clone());
        let once = clip_gradients(std::slice::from_ref(&g), theta);
        let twice = clip_gradients(&once, theta);
        prop_assert_eq!(&once, &twice);
        for (c, v) in once[0].data().iter().zip(&values) {
            prop_assert!(c.abs() <= theta);
            if v.abs() <= theta {
                prop_assert_eq!(c, v);
            }
        }
    }

    #[test]
    fn multiset_is_ordered_and_sampling_probability_is_closed_form(counts in prop::collection::vec(0u32..12, 1..6)) {
        let ms = AnswerMultiset::new(counts.iter().enumerate().map(|(i, &c)| (i, c)));
        let entries = ms.entries();
        for w in entries.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        prop_assert_eq!(ms.total(), counts.iter().sum::<u32>());
        let expected = match entries {
            [_, (_, c1), ..] if *c1 >= 3 => f64::from(*c1) / f64::from(ms.total()),
            _ => 0.0,
        };
        prop_assert_eq!(ms.runner_up_probability(), expected);
    }

    #[test]
    fn tensor_bytes_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let t = Rng::new(seed).uniform_tensor(&shape, 1e3);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(t.shape(), back.shape());
        prop_assert!(t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
