//! Temporal fusion of head outputs, query decisions, and data selection.
//!
//! The filter is a binary-state Bayes filter in log-odds form: after frame
//! `k` the accumulated log-odds are `l_k = logit(p_k) + l_{k-1} - l_0`.
//! Selection scores candidates by the mutual information between their
//! predicted labels and the network parameters (BALD for single points,
//! BatchBALD for greedy batches), estimated from a fixed set of posterior
//! samples.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledExample;
use crate::error::{Error, Result};
use crate::laplace::{sample_params, GaussianBelief};
use crate::mlp::{forward_batch, sigmoid, Batch, MlpArch, ParamVector};

/// Measurements are clamped to `[P_CLAMP, 1 - P_CLAMP]` before the logit.
pub const P_CLAMP: f64 = 1e-6;

/// Log-odds are clamped to this magnitude only when converted back to a
/// probability, so the retrieved value stays strictly inside (0, 1).
const LOG_ODDS_READOUT_LIMIT: f64 = 30.0;

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Filter state of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub log_odds: f64,
    pub prior_log_odds: f64,
    pub frames: usize,
}

impl FilterState {
    /// Fresh state for a class prior `p(y = 1)`.
    pub fn new(prior_p: f64) -> Self {
        let l0 = logit(prior_p);
        Self {
            log_odds: l0,
            prior_log_odds: l0,
            frames: 0,
        }
    }

    pub fn probability(&self) -> f64 {
        sigmoid(
            self.log_odds
                .clamp(-LOG_ODDS_READOUT_LIMIT, LOG_ODDS_READOUT_LIMIT),
        )
    }
}

impl Default for FilterState {
    fn default() -> Self {
        Self::new(0.5)
    }
}

pub fn filter_update(state: FilterState, p: f64) -> FilterState {
    FilterState {
        log_odds: logit(p) + state.log_odds - state.prior_log_odds,
        prior_log_odds: state.prior_log_odds,
        frames: state.frames + 1,
    }
}

/// Filter states for every class of an episode.
#[derive(Debug, Clone, Default)]
pub struct FilterBank {
    prior_p: f64,
    states: BTreeMap<u32, FilterState>,
}

impl FilterBank {
    pub fn new(prior_p: f64) -> Self {
        Self {
            prior_p,
            states: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.states.clear();
    }

    pub fn update(&mut self, class_id: u32, p: f64) -> f64 {
        let prior = self.prior_p;
        let s = self
            .states
            .entry(class_id)
            .or_insert_with(|| FilterState::new(prior));
        *s = filter_update(*s, p);
        s.probability()
    }

    pub fn get(&self, class_id: u32) -> Option<&FilterState> {
        self.states.get(&class_id)
    }

    pub fn frames(&self) -> usize {
        self.states.values().map(|s| s.frames).max().unwrap_or(0)
    }
}

/// Binary entropy in bits, which is already normalised to `[0, 1]`.
pub fn normalized_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    let p = p.clamp(0.0, 1.0);
    h(p) + h(1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "snake_case")]
pub enum QueryRule {
    /// Query when the winning filtered probability is below the threshold.
    Confidence(f64),
    /// Query when the winner's normalised entropy exceeds the threshold.
    Entropy(f64),
}

impl Default for QueryRule {
    fn default() -> Self {
        QueryRule::Confidence(0.85)
    }
}

impl QueryRule {
    pub fn should_query(&self, winner_p: f64) -> bool {
        match *self {
            QueryRule::Confidence(t) => should_query(winner_p, t),
            QueryRule::Entropy(t) => normalized_entropy(winner_p) > t,
        }
    }
}

/// True iff the winner's filtered probability is below `threshold`.
pub fn should_query(winner_p: f64, threshold: f64) -> bool {
    winner_p < threshold
}

/// `probs[(s, i)]`: probability of the positive label for candidate `i`
/// under parameter sample `s`.
pub fn probability_matrix(
    candidates: &Batch,
    samples: &[ParamVector],
    arch: &MlpArch,
) -> Result<DMatrix<f64>> {
    let mut probs = DMatrix::zeros(samples.len(), candidates.len());
    for (s, params) in samples.iter().enumerate() {
        let logits = forward_batch(&candidates.inputs, params, arch)?;
        for (i, z) in logits.iter().enumerate() {
            probs[(s, i)] = sigmoid(*z);
        }
    }
    Ok(probs)
}

/// BALD score per candidate: `H(mean_s p_s) - mean_s H(p_s)`, in bits.
pub fn bald_scores_from_probs(probs: &DMatrix<f64>) -> Vec<f64> {
    let s = probs.nrows() as f64;
    probs
        .column_iter()
        .map(|col| {
            let mean = col.sum() / s;
            let cond = col.iter().map(|&p| normalized_entropy(p)).sum::<f64>() / s;
            normalized_entropy(mean) - cond
        })
        .collect()
}

pub fn bald_scores(
    candidates: &[LabeledExample],
    posterior: &GaussianBelief,
    arch: &MlpArch,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::InvalidConfig(
            "BALD needs at least two samples".into(),
        ));
    }
    let draws = sample_params(posterior, samples, rng)?;
    let batch = Batch::from_examples(candidates, arch.input_dim())?;
    Ok(bald_scores_from_probs(&probability_matrix(
        &batch, &draws, arch,
    )?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMethod {
    Uniform,
    Bald,
    Batchbald,
    #[default]
    BatchbaldSubsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub method: AcquisitionMethod,
    /// Number of points kept.
    pub batch_size: usize,
    /// Size of the random subset scored by BatchBALD.
    pub subsample: usize,
    /// Posterior samples used for scoring.
    pub samples: usize,
    /// Joint entropies of up to this many points are enumerated exactly.
    pub exact_limit: usize,
    /// Sampled label configurations above `exact_limit`.
    pub joint_samples: usize,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            method: AcquisitionMethod::BatchbaldSubsample,
            batch_size: 32,
            subsample: 64,
            samples: 32,
            exact_limit: 12,
            joint_samples: 4096,
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self, n_candidates: usize) -> Result<()> {
        let sub = self.effective_subsample(n_candidates);
        if self.batch_size == 0 || self.batch_size > sub || sub > n_candidates {
            return Err(Error::InvalidConfig(format!(
                "acquisition sizes must satisfy 1 <= batch ({}) <= subsample ({sub}) <= candidates ({n_candidates})",
                self.batch_size
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig(
                "acquisition needs posterior samples".into(),
            ));
        }
        if self.joint_samples == 0 {
            return Err(Error::InvalidConfig(
                "joint_samples must be positive".into(),
            ));
        }
        Ok(())
    }

    fn effective_subsample(&self, n_candidates: usize) -> usize {
        match self.method {
            AcquisitionMethod::BatchbaldSubsample | AcquisitionMethod::Uniform => self.subsample,
            AcquisitionMethod::Bald | AcquisitionMethod::Batchbald => n_candidates,
        }
    }
}

/// Greedy BatchBALD result.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected candidate indices in selection order.
    pub indices: Vec<usize>,
    /// Joint mutual information after each addition.
    pub joint_mi: Vec<f64>,
}

impl Selection {
    /// Marginal gains in selection order.
    pub fn gains(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.joint_mi
            .iter()
            .map(|&mi| {
                let g = mi - prev;
                prev = mi;
                g
            })
            .collect()
    }
}

fn plogp2(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.log2()
    }
}

/// Per-sample likelihoods of the label configurations of the selected set.
enum Joint {
    /// `w[(s, c)]` for all `2^b` configurations.
    Exact(DMatrix<f64>),
    /// `w[(s, m)]` for sampled configurations, with per-configuration
    /// `log2` scale factors.
    Sampled {
        w: DMatrix<f64>,
        log2_scale: Vec<f64>,
    },
}

impl Joint {
    /// Joint entropy of the selected set extended with candidate `col`.
    fn entropy_with(&self, p: &[f64]) -> f64 {
        match self {
            Joint::Exact(w) => {
                let s = w.nrows() as f64;
                let mut h = 0.0;
                for c in 0..w.ncols() {
                    let (mut p1, mut p0) = (0.0, 0.0);
                    for (r, &pr) in p.iter().enumerate() {
                        let wc = w[(r, c)];
                        p1 += wc * pr;
                        p0 += wc * (1.0 - pr);
                    }
                    h += plogp2(p0 / s) + plogp2(p1 / s);
                }
                h
            }
            Joint::Sampled { w, log2_scale } => {
                let s = w.nrows() as f64;
                let m = w.ncols();
                let mut h = 0.0;
                for c in 0..m {
                    let (mut base, mut p1, mut p0) = (0.0, 0.0, 0.0);
                    for (r, &pr) in p.iter().enumerate() {
                        let wc = w[(r, c)];
                        base += wc;
                        p1 += wc * pr;
                        p0 += wc * (1.0 - pr);
                    }
                    let (base, p1, p0) = (base / s, p1 / s, p0 / s);
                    for q in [p0, p1] {
                        if q > 0.0 {
                            h -= (q / base) * (q.log2() + log2_scale[c]);
                        }
                    }
                }
                h / m as f64
            }
        }
    }

    fn extend(&mut self, p: &[f64], rng: &mut ChaCha8Rng) {
        match self {
            Joint::Exact(w) => {
                let (s, c) = w.shape();
                let mut next = DMatrix::zeros(s, 2 * c);
                for col in 0..c {
                    for (r, &pr) in p.iter().enumerate() {
                        next[(r, col)] = w[(r, col)] * (1.0 - pr);
                        next[(r, c + col)] = w[(r, col)] * pr;
                    }
                }
                *w = next;
            }
            Joint::Sampled { w, log2_scale } => {
                for c in 0..w.ncols() {
                    let (mut base, mut p1) = (0.0, 0.0);
                    for (r, &pr) in p.iter().enumerate() {
                        base += w[(r, c)];
                        p1 += w[(r, c)] * pr;
                    }
                    let y = rng.random::<f64>() < p1 / base;
                    let mut max: f64 = 0.0;
                    for (r, &pr) in p.iter().enumerate() {
                        w[(r, c)] *= if y { pr } else { 1.0 - pr };
                        max = max.max(w[(r, c)]);
                    }
                    if max > 0.0 {
                        for r in 0..w.nrows() {
                            w[(r, c)] /= max;
                        }
                        log2_scale[c] += max.log2();
                    }
                }
            }
        }
    }

    /// Switches to sampled configurations drawn from the joint of `selected`.
    fn sampled_from(
        probs: &DMatrix<f64>,
        selected: &[usize],
        n_configs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Joint {
        let s = probs.nrows();
        let mut w = DMatrix::from_element(s, n_configs, 1.0);
        let mut log2_scale = vec![0.0; n_configs];
        for c in 0..n_configs {
            let src = rng.random_range(0..s);
            for &i in selected {
                let y = rng.random::<f64>() < probs[(src, i)];
                let mut max: f64 = 0.0;
                for r in 0..s {
                    let pr = probs[(r, i)];
                    w[(r, c)] *= if y { pr } else { 1.0 - pr };
                    max = max.max(w[(r, c)]);
                }
                if max > 0.0 {
                    for r in 0..s {
                        w[(r, c)] /= max;
                    }
                    log2_scale[c] += max.log2();
                }
            }
        }
        Joint::Sampled { w, log2_scale }
    }
}

/// Greedy maximisation of the joint mutual information
/// `I(y_1..y_b; theta) = H(y_1..y_b) - E_theta H(y_1..y_b | theta)`.
pub fn batchbald_from_probs(
    probs: &DMatrix<f64>,
    batch_size: usize,
    exact_limit: usize,
    joint_samples: usize,
    seed: u64,
) -> Result<Selection> {
    let n = probs.ncols();
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidConfig(format!(
            "cannot select {batch_size} of {n} candidates"
        )));
    }
    let s = probs.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cond: Vec<f64> = probs
        .column_iter()
        .map(|c| c.iter().map(|&p| normalized_entropy(p)).sum::<f64>() / s as f64)
        .collect();
    let columns: Vec<Vec<f64>> = probs
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();

    let mut joint = Joint::Exact(DMatrix::from_element(s, 1, 1.0));
    let mut chosen = vec![false; n];
    let mut selection = Selection {
        indices: Vec::with_capacity(batch_size),
        joint_mi: Vec::with_capacity(batch_size),
    };
    let mut cond_sum = 0.0;
    for step in 0..batch_size {
        if step == exact_limit {
            joint = Joint::sampled_from(probs, &selection.indices, joint_samples, &mut rng);
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if chosen[j] {
                continue;
            }
            let mi = joint.entropy_with(&columns[j]) - (cond_sum + cond[j]);
            if best.is_none_or(|(_, b)| mi > b) {
                best = Some((j, mi));
            }
        }
        let (j, mi) = best.expect("batch_size <= n leaves a candidate");
        chosen[j] = true;
        cond_sum += cond[j];
        joint.extend(&columns[j], &mut rng);
        selection.indices.push(j);
        selection.joint_mi.push(mi);
    }
    Ok(selection)
}

pub fn batchbald_select(
    candidates: &[LabeledExample],
    samples: &[ParamVector],
    arch: &MlpArch,
    cfg: &AcquisitionConfig,
) -> Result<Selection> {
    if cfg.batch_size > candidates.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds {} candidates",
            cfg.batch_size,
            candidates.len()
        )));
    }
    let batch = Batch::from_examples(candidates, arch.input_dim())?;
    let probs = probability_matrix(&batch, samples, arch)?;
    batchbald_from_probs(
        &probs,
        cfg.batch_size,
        cfg.exact_limit,
        cfg.joint_samples,
        cfg.seed,
    )
}

/// Random subset of size `cfg.subsample` (for the subsampling methods),
/// then selection of `cfg.batch_size` points by the configured method.
/// Returns selected examples in selection order.
pub fn subsample_then_select(
    demo_data: &[LabeledExample],
    samples: &[ParamVector],
    arch: &MlpArch,
    cfg: &AcquisitionConfig,
) -> Result<Vec<LabeledExample>> {
    cfg.validate(demo_data.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5AB5);
    let sub = cfg.effective_subsample(demo_data.len());
    let mut pool: Vec<usize> = if sub == demo_data.len() {
        (0..demo_data.len()).collect()
    } else {
        index::sample(&mut rng, demo_data.len(), sub).into_vec()
    };
    pool.sort_unstable();
    let subset: Vec<LabeledExample> = pool.iter().map(|&i| demo_data[i].clone()).collect();

    let picked: Vec<usize> = match cfg.method {
        AcquisitionMethod::Uniform => {
            let mut order: Vec<usize> = (0..subset.len()).collect();
            order.shuffle(&mut rng);
            order.truncate(cfg.batch_size);
            order
        }
        AcquisitionMethod::Bald => {
            let batch = Batch::from_examples(&subset, arch.input_dim())?;
            let scores = bald_scores_from_probs(&probability_matrix(&batch, samples, arch)?);
            let mut order: Vec<usize> = (0..subset.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.truncate(cfg.batch_size);
            order
        }
        AcquisitionMethod::Batchbald | AcquisitionMethod::BatchbaldSubsample => {
            batchbald_select(&subset, samples, arch, cfg)?.indices
        }
    };
    Ok(picked.into_iter().map(|i| subset[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uninformative_measurement_keeps_state() {
        let s = FilterState::default();
        let next = filter_update(s, 0.5);
        assert_eq!(next.log_odds, 0.0);
        assert_eq!(next.frames, 1);
    }

    #[test]
    fn two_confident_measurements() {
        let s = filter_update(filter_update(FilterState::default(), 0.8), 0.8);
        assert!((s.log_odds - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((s.probability() - 16.0 / 17.0).abs() < 1e-12);
        assert!((s.probability() - 0.9412).abs() < 1e-4);
        let c = filter_update(filter_update(FilterState::default(), 0.8), 0.2);
        assert!((c.probability() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn readout_stays_inside_unit_interval() {
        let mut s = FilterState::default();
        for _ in 0..500 {
            s = filter_update(s, 1.0);
        }
        let p = s.probability();
        assert!(p > 0.0 && p < 1.0);
        for _ in 0..2000 {
            s = filter_update(s, 0.0);
        }
        let p = s.probability();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(normalized_entropy(0.5), 1.0);
        assert_eq!(normalized_entropy(0.0), 0.0);
        assert_eq!(normalized_entropy(1.0), 0.0);
        assert!((normalized_entropy(0.9) - 0.4690).abs() < 1e-4);
    }

    #[test]
    fn query_rule_examples() {
        assert!(should_query(0.84, 0.85));
        assert!(!should_query(0.99, 0.85));
        assert!(!should_query(0.0, 0.0));
        assert!(QueryRule::Entropy(0.5).should_query(0.6));
        assert!(!QueryRule::Entropy(0.5).should_query(0.95));
    }

    #[test]
    fn bald_on_two_point_mock_posterior() {
        let probs = DMatrix::from_row_slice(2, 2, &[0.9, 0.7, 0.1, 0.7]);
        let scores = bald_scores_from_probs(&probs);
        assert!((scores[0] - (1.0 - normalized_entropy(0.9))).abs() < 1e-12);
        assert!((scores[0] - 0.5310).abs() < 1e-4);
        assert!(scores[1].abs() < 1e-12);
    }

    #[test]
    fn batch_size_beyond_candidates_is_an_error() {
        let probs = DMatrix::from_element(3, 2, 0.5);
        assert!(batchbald_from_probs(&probs, 3, 12, 16, 0).is_err());
        assert!(batchbald_from_probs(&probs, 0, 12, 16, 0).is_err());
    }

    #[test]
    fn sampled_joint_entropy_tracks_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probs = DMatrix::from_fn(6, 10, |_, _| rng.random_range(0.05..0.95));
        let exact = batchbald_from_probs(&probs, 5, 12, 4096, 1).unwrap();
        let sampled = batchbald_from_probs(&probs, 5, 2, 20000, 1).unwrap();
        assert_eq!(exact.indices[..2], sampled.indices[..2]);
        for (a, b) in exact.joint_mi.iter().zip(&sampled.joint_mi).take(3) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }
}
