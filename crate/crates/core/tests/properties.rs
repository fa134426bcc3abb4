//! Randomized properties of the factorization, the checkpoint codec and the
//! cosine used by the similarity estimator.

use proptest::prelude::*;

use kdlab::kernel_machine::DEFAULT_MAX_JITTER;
use kdlab::linalg::{self, SymMatrix};
use kdlab::model::{self, Activation, Checkpoint, MlpSpec, ParamVector};
use kdlab::ntk;
use kdlab::rng;

/// `A Aᵀ / n + c I` for a seeded Gaussian `A`.
fn random_pd(n: usize, c: f64, seed: u64) -> SymMatrix {
    let a = rng::normal_vec(&mut rng::seeded(seed), n * n);
    SymMatrix::gram(n, n, &a).scaled(1.0 / n as f64).add_diagonal(c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solve_round_trips(n in 1usize..=512, seed in any::<u64>(), c in 1e-2f64..1.0) {
        let m = random_pd(n, c, seed);
        let x = rng::normal_vec(&mut rng::seeded(seed ^ 1), n);
        let b = m.matvec(&x).unwrap();
        let f = linalg::factor_psd(&m, DEFAULT_MAX_JITTER).unwrap();
        let solved = linalg::solve_psd(&f, &b).unwrap();
        let err = solved.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        // cond(m) ≤ (4 + c) / c for this construction
        prop_assert!(err <= 1e-9 * scale * (4.0 + c) / c, "n={n} err={err}");
    }
}

fn spec_strategy() -> impl Strategy<Value = MlpSpec> {
    (
        prop::collection::vec(1usize..9, 2..5),
        prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)],
        any::<u64>(),
    )
        .prop_map(|(w, a, s)| MlpSpec::new(w, a, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_codec_round_trips(spec in spec_strategy(), fill in any::<u64>()) {
        let p = spec.num_params();
        let mut params = rng::normal_vec(&mut rng::seeded(fill), p);
        if p > 2 {
            params[0] = f64::INFINITY;
            params[1] = -0.0;
        }
        let c = Checkpoint::new(spec, ParamVector(params)).unwrap();
        let back = model::decode(&model::encode(&c)).unwrap();
        prop_assert_eq!(&back.spec.layer_widths, &c.spec.layer_widths);
        prop_assert_eq!(back.spec.activation, c.spec.activation);
        prop_assert_eq!(back.spec.seed, c.spec.seed);
        let bits = |v: &ParamVector| v.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.params), bits(&c.params));
    }

    #[test]
    fn truncated_checkpoints_are_rejected(spec in spec_strategy(), cut in 1usize..64) {
        let c = model::init(&spec).unwrap();
        let bytes = model::encode(&c);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(model::decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        a in prop::collection::vec(-1e3f64..1e3, 1..40),
        seed in any::<u64>(),
    ) {
        let b = rng::normal_vec(&mut rng::seeded(seed), a.len());
        prop_assume!(linalg::norm2(&a) > 0.0);
        let c = ntk::cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, ntk::cosine(&b, &a));
        prop_assert_eq!(ntk::cosine(&a, &a), 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!((ntk::cosine(&a, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_bounded(s in any::<u64>(), t in any::<u64>()) {
        let f = model::init(&MlpSpec::new(vec![3, 6, 2], Activation::Tanh, s)).unwrap();
        let g = model::init(&MlpSpec::new(vec![3, 5, 5, 2], Activation::Tanh, t)).unwrap();
        let xs: Vec<Vec<f64>> = (0..4).map(|i| rng::normal_vec(&mut rng::seeded(s ^ i), 3)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let est = ntk::ntk_similarity(&f, &g, &refs, 8, t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&est.mean));
        prop_assert!(est.std_error >= 0.0);
    }
}
