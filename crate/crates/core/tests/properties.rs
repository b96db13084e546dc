//! Property tests for the invariants of the numerical building blocks.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;

use streamal_core::active::{
    bald_scores_from_probs, batchbald_from_probs, filter_update, normalized_entropy, FilterState,
};
use streamal_core::datagen::{
    generate_scenario, parse_stream, stream_to_csv, DriftScenarioParams, FeatureVector,
    LabeledExample, ScenarioConfig,
};
use streamal_core::heads::argmax;
use streamal_core::laplace::{
    kron_matvec, likelihood_curvature, predictive_from_samples, GaussianBelief, KroneckerFactorPair,
};
use streamal_core::metrics::{auc, ece};
use streamal_core::mlp::{predict_proba, Activation, LayerShape, MlpArch, ParamVector};
use streamal_core::pacbayes::{kl_gaussians, mcallester_bound, optimize_hyperparams, BoundConfig};

fn prob() -> impl Strategy<Value = f64> {
    0.001f64..0.999
}

fn matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n).prop_map(move |m| &m * m.transpose() + DMatrix::identity(n, n) * 0.3)
}

/// A random belief over a single `rows x (cols - 1)` layer.
fn belief(rows: usize, inputs: usize) -> impl Strategy<Value = GaussianBelief> {
    let shape = LayerShape::new(inputs, rows);
    (
        spd(shape.cols),
        spd(shape.rows),
        prop::collection::vec(-1.0f64..1.0, shape.len()),
    )
        .prop_map(move |(a, g, m)| {
            GaussianBelief::new(
                vec![shape],
                ParamVector::new(m),
                vec![KroneckerFactorPair::new(a, g)],
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_is_order_independent(ps in prop::collection::vec(prob(), 1..30), seed in any::<u64>()) {
        let run = |xs: &[f64]| xs.iter().fold(FilterState::new(0.5), |s, &p| filter_update(s, p));
        let mut shuffled = ps.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = run(&ps);
        let b = run(&shuffled);
        prop_assert!((a.log_odds - b.log_odds).abs() < 1e-12);
        let direct: f64 = ps.iter().map(|p| (p / (1.0 - p)).ln()).sum();
        prop_assert!((a.log_odds - direct).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_symmetric_and_bounded(p in 0.0f64..=1.0) {
        let h = normalized_entropy(p);
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((h - normalized_entropy(1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn bald_is_nonnegative_and_per_candidate(
        s in 2usize..9,
        n in 1usize..7,
        values in prop::collection::vec(prob(), 64),
    ) {
        let probs = DMatrix::from_fn(s, n, |r, c| values[(r * 7 + c) % values.len()]);
        let scores = bald_scores_from_probs(&probs);
        prop_assert!(scores.iter().all(|&x| x >= -1e-9));
        let reversed = DMatrix::from_fn(s, n, |r, c| probs[(r, n - 1 - c)]);
        let rev_scores = bald_scores_from_probs(&reversed);
        for c in 0..n {
            prop_assert_eq!(scores[c], rev_scores[n - 1 - c]);
        }
    }

    #[test]
    fn greedy_gains_never_increase(
        s in 2usize..9,
        n in 2usize..8,
        values in prop::collection::vec(prob(), 72),
    ) {
        let probs = DMatrix::from_fn(s, n, |r, c| values[r * 8 + c]);
        let sel = batchbald_from_probs(&probs, n, 12, 4096, 0).unwrap();
        let gains = sel.gains();
        for w in gains.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn kron_matvec_matches_dense(ra in 1usize..9, rg in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(ra, ra, |_, _| rng.random_range(-1.0..1.0));
        let g = DMatrix::from_fn(rg, rg, |_, _| rng.random_range(-1.0..1.0));
        let v: Vec<f64> = (0..ra * rg).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = kron_matvec(&a, &g, &v).unwrap();
        let dense = a.kronecker(&g) * DVector::from_vec(v);
        for (x, y) in fast.iter().zip(dense.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_identity(rho in belief(2, 2), pi in belief(2, 2)) {
        prop_assert!(kl_gaussians(&rho, &pi).unwrap() >= 0.0);
        prop_assert!(kl_gaussians(&rho, &rho).unwrap().abs() < 1e-10);
    }

    #[test]
    fn bound_dominates_risk_and_grows_with_kl(
        emp in 0.0f64..=1.0,
        kl in 0.0f64..100.0,
        extra in 1e-6f64..10.0,
        n in 1usize..10_000,
        eps in 0.001f64..0.999,
    ) {
        let b = mcallester_bound(emp, kl, n, eps);
        prop_assert!(b >= emp);
        prop_assert!(mcallester_bound(emp, kl + extra, n, eps) > b);
    }

    #[test]
    fn predictive_is_a_convex_combination(
        samples in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..8),
        x in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let arch = MlpArch::new(vec![3, 1], Activation::Relu).unwrap();
        let params: Vec<ParamVector> = samples.into_iter().map(ParamVector::new).collect();
        let fv = FeatureVector::new(x).unwrap();
        let p = predictive_from_samples(&fv, &params, &arch).unwrap();
        let each: Vec<f64> = params.iter().map(|s| predict_proba(&fv, s, &arch).unwrap()).collect();
        let lo = each.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = each.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(p >= lo - 1e-15 && p <= hi + 1e-15);
    }

    #[test]
    fn single_layer_predictive_is_monotone_in_bias(
        w in prop::collection::vec(-2.0f64..2.0, 3),
        bias in -3.0f64..3.0,
        shift in 0.0f64..3.0,
    ) {
        let arch = MlpArch::new(vec![2, 1], Activation::Relu).unwrap();
        let x = FeatureVector::new(w[..2].to_vec()).unwrap();
        let a = ParamVector::new(vec![w[2], -w[0], bias]);
        let b = ParamVector::new(vec![w[2], -w[0], bias + shift]);
        prop_assert!(predict_proba(&x, &b, &arch).unwrap() >= predict_proba(&x, &a, &arch).unwrap());
    }

    #[test]
    fn argmax_ignores_head_order(ps in prop::collection::vec((0u32..6, 0.0f64..1.0), 1..6)) {
        let mut dedup = ps.clone();
        dedup.sort_by_key(|e| e.0);
        dedup.dedup_by_key(|e| e.0);
        let mut reversed = dedup.clone();
        reversed.reverse();
        prop_assert_eq!(argmax(&dedup), argmax(&reversed));
    }

    #[test]
    fn ece_and_auc_stay_in_the_unit_interval(
        rows in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 2..40),
        bins in 1usize..20,
    ) {
        let e = ece(&rows, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.1).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let a = auc(&scores, &labels).unwrap();
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a + auc(&flipped, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

fn small_scenario(seed: u64, drift: f64) -> ScenarioConfig {
    ScenarioConfig::synthetic_drift(&DriftScenarioParams {
        dim: 4,
        n_classes: 2,
        n_tasks: 3,
        frames_per_demo: 8,
        drift_per_task: drift,
        seed,
        ..Default::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn streams_are_deterministic_and_round_trip(seed in any::<u64>(), drift in 0.0f64..3.0) {
        let cfg = small_scenario(seed, drift);
        let a = generate_scenario(&cfg).unwrap();
        prop_assert_eq!(&a, &generate_scenario(&cfg).unwrap());
        let text = stream_to_csv(&a).unwrap();
        let back = parse_stream(&text, std::path::Path::new("mem.csv")).unwrap();
        prop_assert_eq!(a, back);
    }

    #[test]
    fn grid_search_ignores_grid_order(seed in 0u64..1000, rotate in 0usize..3) {
        use rand::Rng;
        let arch = MlpArch::new(vec![2, 2, 1], Activation::Relu).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<LabeledExample> = (0..12)
            .map(|i| {
                let y = i % 2 == 0;
                let c = if y { 1.0 } else { -1.0 };
                let x = vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                LabeledExample::new(FeatureVector::new(x).unwrap(), 0, y)
            })
            .collect();
        let theta = ParamVector::new((0..arch.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let lik = likelihood_curvature(&data, &theta, &arch).unwrap();
        let prior = GaussianBelief::isotropic_zero(&arch, 1.0).unwrap();
        let grid = vec![0.1, 1.0, 10.0];
        let cfg = BoundConfig {
            tau_grid: grid.clone(),
            alpha_grid: grid.clone(),
            beta_grid: grid.clone(),
            samples: 16,
            ..BoundConfig::default()
        };
        let mut permuted = grid.clone();
        permuted.rotate_left(rotate);
        let mut reversed = grid.clone();
        reversed.reverse();
        let cfg2 = BoundConfig {
            tau_grid: permuted.clone(),
            alpha_grid: reversed,
            beta_grid: permuted,
            ..cfg.clone()
        };
        let a = optimize_hyperparams(&theta, &lik, &prior, &data, &arch, &cfg).unwrap();
        let b = optimize_hyperparams(&theta, &lik, &prior, &data, &arch, &cfg2).unwrap();
        prop_assert_eq!(a.best, b.best);
        prop_assert_eq!(a.posterior, b.posterior);
    }
}
