use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidtag_core::gating::{gamma_fixed_point, gamma_slope, gamma_step, iterate_gamma, ChainSpec};
use vidtag_core::layers::{BatchNorm, Mode};
use vidtag_core::recurrent::{CellKind, LstmStack, NormSettings};
use vidtag_core::tensor::{sigmoid, softmax_in_place};
use vidtag_core::translator::WordSequence;
use vidtag_core::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn chain3() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    (1usize..=8, 1usize..=8, 1usize..=8, 1usize..=8)
        .prop_flat_map(|(m, n, k, l)| (matrix(m, n), matrix(n, k), matrix(k, l)))
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in chain3()) {
        let left = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let right = a.matmul(&b).unwrap().matmul(&c).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn transposed_products_agree((a, b, _c) in chain3()) {
        let ab = a.matmul(&b).unwrap();
        prop_assert_eq!(a.transpose().unwrap().matmul_tn(&b).unwrap(), ab.clone());
        prop_assert_eq!(a.matmul_nt(&b.transpose().unwrap()).unwrap(), ab);
    }

    #[test]
    fn softmax_sums_to_one(mut row in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        softmax_in_place(&mut row);
        let total: f64 = row.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn sigmoid_is_symmetric(x in -1e3f64..1e3) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode(x in (2usize..8, 1usize..5).prop_flat_map(|(b, d)| matrix(b, d))) {
        let (b, d) = (x.rows(), x.cols());
        let bn = BatchNorm::new(d, 1, 1.0, true, 0.999, 1e-5);
        let (y, _) = bn.forward(&x.scale(3.0), 0, Mode::Train).unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..b).map(|i| x.row(i)[j] * 3.0).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
            let out: Vec<f64> = (0..b).map(|i| y.row(i)[j]).collect();
            let m = out.iter().sum::<f64>() / b as f64;
            let v = out.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / b as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - var / (var + 1e-5)).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_inference_is_pure(x in matrix(3, 4)) {
        let bn = BatchNorm::new(4, 2, 0.1, true, 0.999, 1e-5);
        let before = bn.stats.clone();
        let (a, _) = bn.forward(&x, 1, Mode::Infer).unwrap();
        let (b, _) = bn.forward(&x, 1, Mode::Infer).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(&bn.stats, &before);
    }

    #[test]
    fn hidden_states_stay_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for kind in [CellKind::Lstm, CellKind::BnLstm] {
            let stack = LstmStack::new(&mut r, 3, 4, 2, kind, NormSettings::default());
            let inputs: Vec<Tensor> = (0..4)
                .map(|_| vidtag_core::init::gaussian(&mut r, &[2, 3], scale))
                .collect();
            let out = stack.run_sequence(&inputs, Mode::Infer).unwrap();
            prop_assert!(out.hiddens.iter().all(|h| h.data().iter().all(|v| v.abs() < 1.0)));
        }
    }

    #[test]
    fn canonical_sentences_are_ascending_and_idempotent(labels in prop::collection::vec(0usize..30, 1..12)) {
        let s = WordSequence::canonicalize(&labels, 30).unwrap();
        prop_assert!(s.labels().windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(s.ids()[0], 30);
        prop_assert_eq!(*s.ids().last().unwrap(), 31);
        prop_assert_eq!(WordSequence::canonicalize(s.labels(), 30).unwrap(), s);
    }

    #[test]
    fn fixed_point_is_a_fixed_point(p in 0.0f64..=1.0, q in 0.0f64..=1.0, beta in 0.0f64..=1.0) {
        let spec = ChainSpec::new(p, q, beta).unwrap();
        if let Ok(g) = gamma_fixed_point(&spec) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
            prop_assert!((gamma_step(g.min(1.0), &spec).unwrap() - g).abs() < 1e-12);
        }
    }

    #[test]
    fn recursion_converges_from_any_start(
        p in 0.05f64..0.95, q in 0.05f64..0.95, beta in 0.0f64..=1.0, g0 in 0.0f64..=1.0,
    ) {
        let mut spec = ChainSpec::new(p, q, beta).unwrap();
        spec.gamma0_init = g0;
        let closed = gamma_fixed_point(&spec).unwrap();
        prop_assert!((iterate_gamma(&spec, 10_000).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn slope_sign_follows_the_correctness_gap(p in 0.0f64..0.99, q in 0.0f64..=1.0, beta in 0.01f64..=1.0) {
        let slope = gamma_slope(&ChainSpec::new(p, q, beta).unwrap()).unwrap();
        if p > q {
            prop_assert!(slope > 0.0);
        } else if p < q {
            prop_assert!(slope < 0.0);
        } else {
            prop_assert_eq!(slope, 0.0);
        }
    }
}
