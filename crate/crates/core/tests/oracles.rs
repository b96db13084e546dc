//! Independent reference computations checked against the library.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use streamal_core::active::{
    bald_scores_from_probs, batchbald_from_probs, filter_update, normalized_entropy, FilterState,
};
use streamal_core::datagen::{FeatureVector, LabeledExample};
use streamal_core::laplace::{
    assemble_layer_dense, assemble_posterior, kron_matvec, likelihood_curvature,
    posterior_to_prior, sample_params, GaussianBelief, KroneckerFactorPair, Tempering,
};
use streamal_core::mlp::Batch;
use streamal_core::mlp::{
    forward, gradient, nll_map_loss, Activation, LayerShape, MlpArch, ParamVector,
};
use streamal_core::pacbayes::{
    evaluate_tempering, kl_gaussians, mcallester_bound, optimize_hyperparams, standard_noise,
    BoundConfig,
};

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_vec(r, c, normal_vec(rng, r * c))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

fn example(x: Vec<f64>, label: bool) -> LabeledExample {
    LabeledExample::new(FeatureVector::new(x).unwrap(), 0, label)
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| example(normal_vec(rng, d), i % 2 == 0))
        .collect()
}

fn random_belief(rng: &mut ChaCha8Rng, arch: &MlpArch) -> GaussianBelief {
    random_belief_on(rng, arch.shapes())
}

fn random_belief_on(rng: &mut ChaCha8Rng, shapes: Vec<LayerShape>) -> GaussianBelief {
    let n: usize = shapes.iter().map(|s| s.len()).sum();
    let factors = shapes
        .iter()
        .map(|s| KroneckerFactorPair::new(spd(rng, s.cols), spd(rng, s.rows)))
        .collect();
    let mean = ParamVector::new(normal_vec(rng, n));
    GaussianBelief::new(shapes, mean, factors).unwrap()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn backprop_matches_central_differences() {
    let arch = MlpArch::new(vec![4, 4, 3, 1], Activation::Relu).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for draw in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let data = random_data(&mut rng, 12, 4);
        let prior = GaussianBelief::isotropic(
            arch.shapes(),
            ParamVector::new(normal_vec(&mut rng, arch.n_params())),
            0.5 + rng.random::<f64>(),
        )
        .unwrap();
        let theta = ParamVector::new(normal_vec(&mut rng, arch.n_params()));
        let g = gradient(&data, &theta, &arch, &prior).unwrap();
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = theta.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (nll_map_loss(&data, &plus, &arch, &prior).unwrap()
                - nll_map_loss(&data, &minus, &arch, &prior).unwrap())
                / (2.0 * h);
            let a = g.as_slice()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn prior_gradient_vanishes_at_prior_mean_without_data_pull() {
    let arch = MlpArch::new(vec![3, 2, 1], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prior = random_belief(&mut rng, &arch);
    let (value, grad) = streamal_core::mlp::prior_term(prior.mean(), &prior).unwrap();
    assert_eq!(value, 0.0);
    assert!(grad.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn single_layer_curvature_is_exact_logistic_hessian() {
    let arch = MlpArch::new(vec![3, 1], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let x = normal_vec(&mut rng, 3);
        let theta = ParamVector::new(normal_vec(&mut rng, arch.n_params()));
        let data = vec![example(x.clone(), true)];
        let f = likelihood_curvature(&data, &theta, &arch).unwrap();
        let kfac = f[0].dense();

        let mut xt = x.clone();
        xt.push(1.0);
        let z: f64 = xt.iter().zip(theta.as_slice()).map(|(a, b)| a * b).sum();
        let p = sigmoid(z);
        let xv = DVector::from_vec(xt);
        let exact = &xv * xv.transpose() * (p * (1.0 - p));
        assert!((kfac - exact).amax() < 1e-8);
    }
}

/// Per-layer blocks of `p (1 - p) J J^T` with `J` the finite-difference
/// Jacobian of the logit: for one example KFAC is exact block-wise.
#[test]
fn multilayer_single_example_curvature_matches_ggn_blocks() {
    let arch = MlpArch::new(vec![3, 4, 2, 1], Activation::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = normal_vec(&mut rng, 3);
    let theta = ParamVector::new(normal_vec(&mut rng, arch.n_params()));
    let fv = FeatureVector::new(x.clone()).unwrap();
    let h = 1e-6;
    let jac: Vec<f64> = (0..theta.len())
        .map(|i| {
            let mut plus = theta.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = theta.clone();
            minus.as_mut_slice()[i] -= h;
            (forward(&fv, &plus, &arch).unwrap() - forward(&fv, &minus, &arch).unwrap()) / (2.0 * h)
        })
        .collect();
    let p = sigmoid(forward(&fv, &theta, &arch).unwrap());
    let factors = likelihood_curvature(&[example(x, false)], &theta, &arch).unwrap();
    let mut offset = 0;
    for (f, s) in factors.iter().zip(arch.shapes()) {
        let j = DVector::from_column_slice(&jac[offset..offset + s.len()]);
        let ggn = &j * j.transpose() * (p * (1.0 - p));
        assert!((f.dense() - ggn).amax() < 1e-7);
        offset += s.len();
    }
}

fn dense_kl(rho: &GaussianBelief, pi: &GaussianBelief) -> f64 {
    let mut kl = 0.0;
    let mut offset = 0;
    for (l, s) in rho.shapes().iter().enumerate() {
        let pr = rho.dense_precision(l);
        let pp = pi.dense_precision(l);
        let k = s.len();
        let d = DVector::from_iterator(
            k,
            (0..k).map(|i| rho.mean().as_slice()[offset + i] - pi.mean().as_slice()[offset + i]),
        );
        let cov_rho = pr.clone().try_inverse().unwrap();
        let trace = (&pp * cov_rho).trace();
        let quad = (d.transpose() * &pp * &d)[(0, 0)];
        kl += 0.5 * (trace + quad - k as f64 + pr.determinant().ln() - pp.determinant().ln());
        offset += k;
    }
    kl
}

#[test]
fn kronecker_kl_matches_dense_kl() {
    for (seed, sizes) in [
        (1u64, vec![3, 2, 1]),
        (2, vec![7, 1]),
        (3, vec![2, 3, 2, 1]),
        (4, vec![4, 4, 1]),
    ] {
        let arch = MlpArch::new(sizes, Activation::Relu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = random_belief(&mut rng, &arch);
        let pi = random_belief(&mut rng, &arch);
        let fast = kl_gaussians(&rho, &pi).unwrap();
        let slow = dense_kl(&rho, &pi);
        assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
        assert!(kl_gaussians(&rho, &rho).unwrap().abs() < 1e-10);
    }
}

#[test]
fn kron_matvec_matches_dense_product_on_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ra in 1..=8 {
        for rg in 1..=8 {
            let a = random_matrix(&mut rng, ra, ra);
            let g = random_matrix(&mut rng, rg, rg);
            let v = normal_vec(&mut rng, ra * rg);
            let fast = kron_matvec(&a, &g, &v).unwrap();
            let dense = a.kronecker(&g) * DVector::from_vec(v);
            let err = fast
                .iter()
                .zip(dense.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "{ra}x{rg}: {err}");
        }
    }
}

#[test]
fn factor_wise_assembly_is_positive_definite_and_its_gap_is_measured() {
    let arch = MlpArch::new(vec![1, 1], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = random_data(&mut rng, 6, 1);
    let theta = ParamVector::new(normal_vec(&mut rng, 2));
    let lik = likelihood_curvature(&data, &theta, &arch).unwrap();
    let prior = GaussianBelief::isotropic_zero(&arch, 2.0).unwrap();
    let t = Tempering::new(1.0, 1.0, 1.0).unwrap();
    let post = assemble_posterior(&theta, &lik, &prior, t).unwrap();
    let dense = assemble_layer_dense(&lik[0], &prior.factors()[0], t).unwrap();
    assert!(dense.clone().cholesky().is_some());
    assert!(post.dense_precision(0).cholesky().is_some());
    let gap = (post.dense_precision(0) - &dense).norm() / dense.norm();
    assert!(gap.is_finite());
}

#[test]
fn sequential_chaining_adds_curvature_factor_wise() {
    let arch = MlpArch::new(vec![3, 2, 1], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let theta = ParamVector::new(normal_vec(&mut rng, arch.n_params()));
    let d1 = random_data(&mut rng, 5, 3);
    let d2 = random_data(&mut rng, 7, 3);
    let prior = GaussianBelief::isotropic_zero(&arch, 1.0).unwrap();
    let one = Tempering::new(1.0, 1.0, 1.0).unwrap();
    let l1 = likelihood_curvature(&d1, &theta, &arch).unwrap();
    let l2 = likelihood_curvature(&d2, &theta, &arch).unwrap();

    let first = assemble_posterior(&theta, &l1, &prior, one).unwrap();
    let second = assemble_posterior(&theta, &l2, &posterior_to_prior(&first), one).unwrap();
    for (l, f) in second.factors().iter().enumerate() {
        let a = &prior.factors()[l].a + &l1[l].a + &l2[l].a;
        let g = &prior.factors()[l].g + &l1[l].g + &l2[l].g;
        assert!((&f.a - a).amax() < 1e-8);
        assert!((&f.g - g).amax() < 1e-8);
    }
    assert_eq!(second.mean(), &theta);
}

#[test]
fn sample_moments_match_the_belief() {
    let arch = MlpArch::new(vec![2, 2, 1], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let belief = random_belief(&mut rng, &arch);
    let n = 10_000;
    let draws = sample_params(&belief, n, &mut rng).unwrap();
    let mut offset = 0;
    for (l, s) in belief.shapes().iter().enumerate() {
        let cov = belief.dense_precision(l).try_inverse().unwrap();
        for i in 0..s.len() {
            let mean: f64 = draws.iter().map(|d| d.as_slice()[offset + i]).sum::<f64>() / n as f64;
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((mean - belief.mean().as_slice()[offset + i]).abs() < 4.0 * se);
        }
        offset += s.len();
    }
}

#[test]
fn sample_covariance_matches_dense_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let belief = random_belief_on(&mut rng, vec![LayerShape::new(2, 2)]);
    let n = 50_000;
    let draws = sample_params(&belief, n, &mut rng).unwrap();
    let k = belief.n_params();
    let mu = DVector::from_column_slice(belief.mean().as_slice());
    let mut emp = DMatrix::zeros(k, k);
    for d in &draws {
        let c = DVector::from_column_slice(d.as_slice()) - &mu;
        emp += &c * c.transpose();
    }
    emp /= n as f64;
    let cov = belief.dense_precision(0).try_inverse().unwrap();
    assert!((emp - &cov).norm() / cov.norm() < 0.1);
}

#[test]
fn huge_precision_pins_samples_to_the_mean() {
    let arch = MlpArch::new(vec![3, 2, 1], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let b = random_belief(&mut rng, &arch);
    let factors = b
        .factors()
        .iter()
        .map(|f| KroneckerFactorPair::new(&f.a * 1e6, &f.g * 1e6))
        .collect();
    let sharp = GaussianBelief::new(arch.shapes(), b.mean().clone(), factors).unwrap();
    for d in sample_params(&sharp, 20, &mut rng).unwrap() {
        assert!(d.distance(sharp.mean()) < 1e-4);
    }
}

/// Exact joint mutual information of a candidate subset by enumerating every
/// label configuration.
fn brute_joint_mi(probs: &DMatrix<f64>, subset: &[usize]) -> f64 {
    let s = probs.nrows();
    let b = subset.len();
    let mut joint = 0.0;
    for config in 0..(1usize << b) {
        let mut avg = 0.0;
        for row in 0..s {
            let mut lik = 1.0;
            for (bit, &j) in subset.iter().enumerate() {
                let p = probs[(row, j)];
                lik *= if config >> bit & 1 == 1 { p } else { 1.0 - p };
            }
            avg += lik / s as f64;
        }
        if avg > 0.0 {
            joint -= avg * avg.log2();
        }
    }
    let cond: f64 = subset
        .iter()
        .map(|&j| {
            (0..s)
                .map(|r| normalized_entropy(probs[(r, j)]))
                .sum::<f64>()
                / s as f64
        })
        .sum();
    joint - cond
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..(1usize << n))
        .filter(|m: &usize| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

#[test]
fn greedy_batchbald_agrees_with_brute_force_enumeration() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 + (seed as usize % 4);
        let s = 2 + (seed as usize % 7);
        let probs = DMatrix::from_fn(s, n, |_, _| rng.random_range(0.02..0.98));
        let sel = batchbald_from_probs(&probs, n, 12, 4096, seed).unwrap();
        for b in 0..n {
            let prefix = &sel.indices[..=b];
            assert!((sel.joint_mi[b] - brute_joint_mi(&probs, prefix)).abs() < 1e-9);
            // Each greedy step picks the best extension of the current set.
            let best_ext = (0..n)
                .filter(|j| !sel.indices[..b].contains(j))
                .map(|j| {
                    let mut ext = sel.indices[..b].to_vec();
                    ext.push(j);
                    brute_joint_mi(&probs, &ext)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((sel.joint_mi[b] - best_ext).abs() < 1e-9);
        }
        let gains = sel.gains();
        for w in gains.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "gains increase: {gains:?}");
        }
        // The greedy pair is within the (1 - 1/e) guarantee of the best pair.
        let best_pair = subsets(n, 2)
            .iter()
            .map(|p| brute_joint_mi(&probs, p))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(sel.joint_mi[1] >= (1.0 - (-1.0f64).exp()) * best_pair - 1e-9);
    }
}

#[test]
fn single_point_batchbald_is_bald_argmax() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = DMatrix::from_fn(8, 6, |_, _| rng.random_range(0.01..0.99));
        let scores = bald_scores_from_probs(&probs);
        let argmax = (0..6).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        let sel = batchbald_from_probs(&probs, 1, 12, 4096, seed).unwrap();
        assert_eq!(sel.indices, vec![argmax]);
        assert!((sel.joint_mi[0] - scores[argmax]).abs() < 1e-12);
    }
}

#[test]
fn duplicate_of_first_pick_is_not_chosen_second() {
    // Column 1 duplicates column 0; column 2 carries independent information.
    let probs = DMatrix::from_row_slice(
        4,
        3,
        &[
            0.9, 0.9, 0.2, //
            0.1, 0.1, 0.8, //
            0.9, 0.9, 0.8, //
            0.1, 0.1, 0.2,
        ],
    );
    let sel = batchbald_from_probs(&probs, 2, 12, 4096, 0).unwrap();
    assert_eq!(sel.indices, vec![0, 2]);
}

#[test]
fn filter_matches_one_pass_log_odds_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let ps: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
        let l0 = rng.random_range(-1.0..1.0);
        let prior_p = sigmoid(l0);
        let mut st = FilterState::new(prior_p);
        for &p in &ps {
            st = filter_update(st, p);
        }
        let l0 = (prior_p / (1.0 - prior_p)).ln();
        let one_pass = l0 + ps.iter().map(|p| (p / (1.0 - p)).ln() - l0).sum::<f64>();
        assert!((st.log_odds - one_pass).abs() < 1e-12);
        assert_eq!(st.frames, ps.len());
    }
}

#[test]
fn two_by_two_by_two_grid_argmin_matches_recomputation() {
    let arch = MlpArch::new(vec![2, 3, 1], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let data: Vec<LabeledExample> = (0..30)
        .map(|i| {
            let label = i % 2 == 0;
            let c = if label { 1.0 } else { -1.0 };
            example(
                vec![
                    c + 0.7 * normal_vec(&mut rng, 1)[0],
                    0.5 * normal_vec(&mut rng, 1)[0],
                ],
                label,
            )
        })
        .collect();
    let theta = ParamVector::new(normal_vec(&mut rng, arch.n_params()));
    let lik = likelihood_curvature(&data, &theta, &arch).unwrap();
    let prior = GaussianBelief::isotropic_zero(&arch, 1.0).unwrap();
    let cfg = BoundConfig {
        tau_grid: vec![0.1, 10.0],
        alpha_grid: vec![0.5, 2.0],
        beta_grid: vec![0.01, 1.0],
        samples: 64,
        ..BoundConfig::default()
    };
    let search = optimize_hyperparams(&theta, &lik, &prior, &data, &arch, &cfg).unwrap();

    let batch = Batch::from_examples(&data, 2).unwrap();
    let noise = standard_noise(arch.n_params(), cfg.samples, cfg.seed);
    let mut best: Option<(f64, Tempering)> = None;
    for &tau in &cfg.tau_grid {
        for &alpha in &cfg.alpha_grid {
            for &beta in &cfg.beta_grid {
                let t = Tempering::new(tau, alpha, beta).unwrap();
                let (r, _) =
                    evaluate_tempering(&theta, &lik, &prior, &batch, &arch, &noise, cfg.epsilon, t)
                        .unwrap();
                assert_eq!(
                    r.bound,
                    mcallester_bound(r.emp_risk, r.kl, data.len(), cfg.epsilon)
                );
                assert!(r.bound >= r.emp_risk);
                if best.is_none_or(|(b, _)| r.bound < b) {
                    best = Some((r.bound, t));
                }
            }
        }
    }
    let (bound, t) = best.unwrap();
    assert_eq!(search.best.bound, bound);
    assert_eq!(search.best.tempering(), t);
    assert_eq!(search.evaluated.len(), 8);
}

#[test]
fn dense_layer_helper_is_the_exact_tempered_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let shape = LayerShape::new(2, 2);
    let lik = KroneckerFactorPair::new(spd(&mut rng, 3), spd(&mut rng, 2));
    let pri = KroneckerFactorPair::isotropic(shape, 3.0);
    let t = Tempering::new(2.0, 0.5, 4.0).unwrap();
    let dense = assemble_layer_dense(&lik, &pri, t).unwrap();
    let expect = (lik.a.kronecker(&lik.g) * 4.0 + DMatrix::identity(6, 6) * 1.5) * 2.0;
    assert!((dense - expect).amax() < 1e-12);
}
