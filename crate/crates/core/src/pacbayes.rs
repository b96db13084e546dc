//! PAC-Bayes bound and the grid search over posterior tempering.
//!
//! The bound is the McAllester form for a loss bounded in `[0, 1]`:
//!
//! ```text
//! risk <= emp_risk + sqrt((KL(rho || pi) + ln(2 sqrt(N) / eps)) / (2 N))
//! ```
//!
//! with the 0-1 classification error as the loss.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledExample;
use crate::error::{Error, Result};
use crate::laplace::{
    assemble_posterior, kron_matvec, sample_params, GaussianBelief, KroneckerFactorPair, Tempering,
};
use crate::mlp::{forward_batch, layer_offsets, Batch, MlpArch, ParamVector};

pub const DEFAULT_BOUND_SAMPLES: usize = 128;

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            let e = a + (b - a) * i as f64 / (n - 1) as f64;
            // round so that 1e-2, 1e-1, .. come out exact
            let v = 10f64.powf(e);
            format!("{v:.12e}").parse::<f64>().unwrap_or(v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub epsilon: f64,
    /// Posterior samples for the empirical risk.
    pub samples: usize,
    pub tau_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Seed of the standard-normal draws shared by all grid points.
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        let grid = log_grid(1e-2, 1e2, 5);
        Self {
            epsilon: 0.05,
            samples: DEFAULT_BOUND_SAMPLES,
            tau_grid: grid.clone(),
            alpha_grid: grid.clone(),
            beta_grid: grid,
            seed: 0,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.samples == 0 {
            return bad("bound samples must be at least 1");
        }
        if self.tau_grid.is_empty() || self.alpha_grid.is_empty() || self.beta_grid.is_empty() {
            return bad("hyperparameter grids must be nonempty");
        }
        if self.tau_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return bad("tau grid values must be positive and finite");
        }
        let nonneg = |g: &[f64]| g.iter().all(|&v| v >= 0.0 && v.is_finite());
        if !nonneg(&self.alpha_grid) || !nonneg(&self.beta_grid) {
            return bad("alpha and beta grid values must be non-negative and finite");
        }
        Ok(())
    }

    /// Valid `(tau, alpha, beta)` triples in grid order.
    pub fn triples(&self) -> Vec<Tempering> {
        let mut out = Vec::new();
        for &tau in &self.tau_grid {
            for &alpha in &self.alpha_grid {
                for &beta in &self.beta_grid {
                    if let Ok(t) = Tempering::new(tau, alpha, beta) {
                        out.push(t);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub emp_risk: f64,
    pub kl: f64,
    pub bound: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<u32>,
}

impl BoundReport {
    pub fn tempering(&self) -> Tempering {
        Tempering {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

type Chol = nalgebra::Cholesky<f64, nalgebra::Dyn>;

fn logdet(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn layer_chol(f: &KroneckerFactorPair, layer: usize) -> Result<(Chol, Chol)> {
    let not_pd = || Error::NotPositiveDefinite {
        layer,
        max_jitter: 0.0,
    };
    let a = f.a.clone().cholesky().ok_or_else(not_pd)?;
    let g = f.g.clone().cholesky().ok_or_else(not_pd)?;
    Ok((a, g))
}

/// Closed-form `KL(rho || pi)` between two Kronecker-factored Gaussians,
/// summed over layers. Per layer, with `k = rows * cols`:
///
/// ```text
/// 0.5 [ tr(A_pi A_rho^-1) tr(G_pi G_rho^-1) + d^T (A_pi ⊗ G_pi) d - k
///       + ln det(A_rho ⊗ G_rho) - ln det(A_pi ⊗ G_pi) ]
/// ```
///
/// where `ln det(A ⊗ G) = rows ln det A + cols ln det G`.
pub fn kl_gaussians(rho: &GaussianBelief, pi: &GaussianBelief) -> Result<f64> {
    if rho.shapes() != pi.shapes() {
        return Err(Error::InvalidConfig(
            "beliefs have different architectures".into(),
        ));
    }
    let offsets = layer_offsets(rho.shapes());
    let mut kl = 0.0;
    for (l, s) in rho.shapes().iter().enumerate() {
        let fr = &rho.factors()[l];
        let fp = &pi.factors()[l];
        let (pa, pg) = layer_chol(fp, l)?;
        let (ra, rg) = layer_chol(fr, l)?;
        let trace = ra.solve(&fp.a).trace() * rg.solve(&fp.g).trace();
        let delta: Vec<f64> = rho.mean().as_slice()[offsets[l]..offsets[l + 1]]
            .iter()
            .zip(&pi.mean().as_slice()[offsets[l]..offsets[l + 1]])
            .map(|(a, b)| a - b)
            .collect();
        let hd = kron_matvec(&fp.a, &fp.g, &delta)?;
        let quad: f64 = delta.iter().zip(&hd).map(|(a, b)| a * b).sum();
        let k = s.len() as f64;
        let logdet_rho = s.rows as f64 * logdet(&ra) + s.cols as f64 * logdet(&rg);
        let logdet_pi = s.rows as f64 * logdet(&pa) + s.cols as f64 * logdet(&pg);
        kl += 0.5 * (trace + quad - k + logdet_rho - logdet_pi);
    }
    Ok(kl.max(0.0))
}

/// Fraction of (sample, example) pairs misclassified, thresholding the
/// sigmoid at 0.5 with ties going to the positive class.
pub fn empirical_risk_from_samples(
    samples: &[ParamVector],
    batch: &Batch,
    arch: &MlpArch,
) -> Result<f64> {
    if samples.is_empty() || batch.is_empty() {
        return Err(Error::InvalidConfig(
            "empirical risk needs samples and data".into(),
        ));
    }
    let mut errors = 0usize;
    for s in samples {
        let logits = forward_batch(&batch.inputs, s, arch)?;
        errors += logits
            .iter()
            .zip(&batch.targets)
            .filter(|(&z, &y)| (z >= 0.0) != (y >= 0.5))
            .count();
    }
    Ok(errors as f64 / (samples.len() * batch.len()) as f64)
}

pub fn empirical_risk(
    posterior: &GaussianBelief,
    data: &[LabeledExample],
    arch: &MlpArch,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empirical risk needs data".into()));
    }
    let draws = sample_params(posterior, samples, rng)?;
    let batch = Batch::from_examples(data, arch.input_dim())?;
    empirical_risk_from_samples(&draws, &batch, arch)
}

pub fn mcallester_bound(emp_risk: f64, kl: f64, n: usize, epsilon: f64) -> f64 {
    let n = n.max(1) as f64;
    emp_risk + ((kl + (2.0 * n.sqrt() / epsilon).ln()) / (2.0 * n)).sqrt()
}

/// `a` beats `b`: lower bound, then smaller tau, beta, alpha.
fn better(a: &BoundReport, b: &BoundReport) -> bool {
    let key = |r: &BoundReport| (r.bound, r.tau, r.beta, r.alpha);
    let (ka, kb) = (key(a), key(b));
    ka.partial_cmp(&kb) == Some(std::cmp::Ordering::Less)
}

#[derive(Debug, Clone)]
pub struct HyperSearch {
    pub best: BoundReport,
    pub posterior: GaussianBelief,
    /// Every grid point that produced a valid posterior, in grid order.
    pub evaluated: Vec<BoundReport>,
}

/// Evaluates the bound for one tempering using shared standard-normal
/// draws.
pub fn evaluate_tempering(
    map_params: &ParamVector,
    likelihood: &[KroneckerFactorPair],
    prior: &GaussianBelief,
    batch: &Batch,
    arch: &MlpArch,
    noise: &[Vec<f64>],
    epsilon: f64,
    tempering: Tempering,
) -> Result<(BoundReport, GaussianBelief)> {
    let post = assemble_posterior(map_params, likelihood, prior, tempering)?;
    let draws = noise
        .iter()
        .map(|z| post.transform_standard(z))
        .collect::<Result<Vec<_>>>()?;
    let emp_risk = empirical_risk_from_samples(&draws, batch, arch)?;
    let kl = kl_gaussians(&post, prior)?;
    let n = batch.len();
    let report = BoundReport {
        emp_risk,
        kl,
        bound: mcallester_bound(emp_risk, kl, n, epsilon),
        tau: tempering.tau,
        alpha: tempering.alpha,
        beta: tempering.beta,
        n,
        class_id: None,
        task_id: None,
    };
    Ok((report, post))
}

pub fn standard_noise(n_params: usize, samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            (0..n_params)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Exhaustive grid search for the tempering that minimises the bound.
pub fn optimize_hyperparams(
    map_params: &ParamVector,
    likelihood: &[KroneckerFactorPair],
    prior: &GaussianBelief,
    data: &[LabeledExample],
    arch: &MlpArch,
    cfg: &BoundConfig,
) -> Result<HyperSearch> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("bound optimisation needs data".into()));
    }
    let batch = Batch::from_examples(data, arch.input_dim())?;
    let noise = standard_noise(map_params.len(), cfg.samples, cfg.seed);
    // Triples with equal sqrt(tau beta) and sqrt(tau alpha) assemble the same
    // posterior, so their risk and KL are computed once.
    let mut cache: HashMap<(u64, u64), Option<(f64, f64)>> = HashMap::new();
    let mut evaluated = Vec::new();
    let mut best: Option<BoundReport> = None;
    let mut last_err = None;
    let n = batch.len();
    for t in cfg.triples() {
        let key = (
            (t.tau * t.beta).sqrt().to_bits(),
            (t.tau * t.alpha).sqrt().to_bits(),
        );
        let risk_kl = match cache.get(&key) {
            Some(v) => *v,
            None => {
                let v = match evaluate_tempering(
                    map_params,
                    likelihood,
                    prior,
                    &batch,
                    arch,
                    &noise,
                    cfg.epsilon,
                    t,
                ) {
                    Ok((r, _)) => Some((r.emp_risk, r.kl)),
                    Err(e @ Error::NotPositiveDefinite { .. }) => {
                        last_err = Some(e);
                        None
                    }
                    Err(e) => return Err(e),
                };
                cache.insert(key, v);
                v
            }
        };
        let Some((emp_risk, kl)) = risk_kl else {
            continue;
        };
        let report = BoundReport {
            emp_risk,
            kl,
            bound: mcallester_bound(emp_risk, kl, n, cfg.epsilon),
            tau: t.tau,
            alpha: t.alpha,
            beta: t.beta,
            n,
            class_id: None,
            task_id: None,
        };
        if best.as_ref().is_none_or(|b| better(&report, b)) {
            best = Some(report.clone());
        }
        evaluated.push(report);
    }
    match best {
        Some(best) => {
            let posterior = assemble_posterior(map_params, likelihood, prior, best.tempering())?;
            Ok(HyperSearch {
                best,
                posterior,
                evaluated,
            })
        }
        None => Err(last_err
            .unwrap_or_else(|| Error::InvalidConfig("grid contains no valid triple".into()))
            .with_context("every grid point produced an invalid posterior")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::LayerShape;
    use nalgebra::DMatrix;

    fn scalar_belief(mean: f64, var: f64) -> GaussianBelief {
        // one layer holding a single parameter: rows = 1, cols = 1
        let shape = LayerShape { rows: 1, cols: 1 };
        let p = 1.0 / var;
        let f = KroneckerFactorPair::new(
            DMatrix::from_element(1, 1, p.sqrt()),
            DMatrix::from_element(1, 1, p.sqrt()),
        );
        GaussianBelief::new(vec![shape], ParamVector::new(vec![mean]), vec![f]).unwrap()
    }

    #[test]
    fn default_grid_values() {
        let cfg = BoundConfig::default();
        assert_eq!(cfg.tau_grid, vec![0.01, 0.1, 1.0, 10.0, 100.0]);
        assert_eq!(cfg.triples().len(), 125);
        assert_eq!(cfg.samples, 128);
    }

    #[test]
    fn scalar_kl_cases() {
        let a = scalar_belief(0.0, 1.0);
        let b = scalar_belief(1.0, 1.0);
        assert!((kl_gaussians(&a, &b).unwrap() - 0.5).abs() < 1e-10);
        let c = scalar_belief(0.0, 2.0);
        let expected = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_gaussians(&c, &a).unwrap() - expected).abs() < 1e-10);
        assert!((expected - 0.1534).abs() < 1e-4);
        assert!(kl_gaussians(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_pd_prior() {
        let a = scalar_belief(0.0, 1.0);
        let shape = LayerShape { rows: 1, cols: 1 };
        let zero = GaussianBelief::new(
            vec![shape],
            ParamVector::new(vec![0.0]),
            vec![KroneckerFactorPair::zeros(shape)],
        )
        .unwrap();
        assert!(matches!(
            kl_gaussians(&a, &zero),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn hand_computed_bounds() {
        let b1 = mcallester_bound(0.0, 0.0, 100, 0.05);
        assert!((b1 - (400f64.ln() / 200.0).sqrt()).abs() < 1e-15);
        assert!((b1 - 0.1731).abs() < 1e-4);
        let b2 = mcallester_bound(0.1, 1.0, 1000, 0.05);
        assert!((b2 - 0.1638).abs() < 1e-4);
        assert!(mcallester_bound(0.1, 2.0, 1000, 0.05) > b2);
    }

    #[test]
    fn tie_break_prefers_small_tau_then_beta_then_alpha() {
        let r = |tau, alpha, beta| BoundReport {
            emp_risk: 0.0,
            kl: 0.0,
            bound: 0.3,
            tau,
            alpha,
            beta,
            n: 1,
            class_id: None,
            task_id: None,
        };
        assert!(better(&r(0.1, 9.0, 9.0), &r(1.0, 0.1, 0.1)));
        assert!(better(&r(1.0, 9.0, 0.1), &r(1.0, 0.1, 1.0)));
        assert!(better(&r(1.0, 0.1, 1.0), &r(1.0, 1.0, 1.0)));
        assert!(!better(&r(1.0, 1.0, 1.0), &r(1.0, 1.0, 1.0)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BoundConfig::default();
        cfg.epsilon = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = BoundConfig::default();
        cfg.tau_grid = vec![0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = BoundConfig::default();
        cfg.beta_grid.clear();
        assert!(cfg.validate().is_err());
    }
}
