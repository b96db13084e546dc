//! One Bayesian binary classifier per class.
//!
//! Heads never share parameters, so updating one head leaves every other
//! head untouched. The multi-class decision is the argmax over the heads'
//! unnormalised probabilities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{FeatureVector, LabeledExample};
use crate::error::{Error, Result};
use crate::laplace::{
    likelihood_curvature, posterior_to_prior, read_belief, sample_params, write_belief,
    GaussianBelief, Tempering, DEFAULT_PREDICTIVE_SAMPLES,
};
use crate::mlp::{
    forward_batch, read_params, sigmoid, train_map, write_params, Activation, Batch, MlpArch,
    ParamVector, TrainConfig,
};
use crate::pacbayes::{optimize_hyperparams, BoundConfig, BoundReport};
use crate::rng::{derive_seed, rng_for};

const TAG_TRAIN: u64 = 11;
const TAG_BOUND: u64 = 12;
const TAG_SAMPLES: u64 = 13;

/// How a head's prior evolves from one task to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Deterministic point estimate trained without a prior; no bound is
    /// optimised.
    Vanilla,
    /// The next prior is isotropic with variance `gamma` around the latest
    /// posterior mean.
    MeanOnly,
    /// The posterior becomes the next prior unchanged.
    #[default]
    Full,
}

impl PriorMode {
    pub fn is_bayesian(self) -> bool {
        self != PriorMode::Vanilla
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub mode: PriorMode,
    /// Variance of the isotropic prior of a new head.
    pub gamma: f64,
    pub train: TrainConfig,
    pub bound: BoundConfig,
    /// Posterior samples used for predictions.
    pub predictive_samples: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mode: PriorMode::Full,
            gamma: 1.0,
            train: TrainConfig::default(),
            bound: BoundConfig::default(),
            predictive_samples: DEFAULT_PREDICTIVE_SAMPLES,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.predictive_samples == 0 {
            return Err(Error::InvalidConfig(
                "predictive_samples must be at least 1".into(),
            ));
        }
        self.bound.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Posterior {
    Point(ParamVector),
    Laplace(GaussianBelief),
}

impl Posterior {
    pub fn mean(&self) -> &ParamVector {
        match self {
            Posterior::Point(p) => p,
            Posterior::Laplace(b) => b.mean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub class_id: u32,
    /// Task counter the update was trained for.
    pub task: u32,
    pub n_used: usize,
    pub final_loss: f64,
    pub train_seconds: f64,
    pub bound: Option<BoundReport>,
    /// Grid points evaluated by the bound search.
    pub grid_points: usize,
    /// Grid points whose bound fell below their empirical risk.
    pub grid_violations: usize,
}

#[derive(Debug, Clone)]
pub struct Head {
    class_id: u32,
    task_counter: u32,
    gamma: f64,
    prior: GaussianBelief,
    posterior: Option<Posterior>,
    update_log: Vec<UpdateRecord>,
    samples: Vec<ParamVector>,
}

impl Head {
    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    /// Number of completed updates.
    pub fn task_counter(&self) -> u32 {
        self.task_counter
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn prior(&self) -> &GaussianBelief {
        &self.prior
    }

    pub fn posterior(&self) -> Option<&Posterior> {
        self.posterior.as_ref()
    }

    pub fn is_trained(&self) -> bool {
        self.posterior.is_some()
    }

    pub fn update_log(&self) -> &[UpdateRecord] {
        &self.update_log
    }

    pub fn tempering(&self) -> Option<Tempering> {
        match &self.posterior {
            Some(Posterior::Laplace(b)) => b.tempering(),
            _ => None,
        }
    }

    /// Parameter draws behind the predictive probabilities (one draw for a
    /// point estimate).
    pub fn samples(&self) -> &[ParamVector] {
        &self.samples
    }

    /// Predictive probability of the positive label for every column of
    /// `batch`.
    pub fn predict_batch(&self, batch: &Batch, arch: &MlpArch) -> Result<Vec<f64>> {
        if self.samples.is_empty() {
            return Err(Error::NoTrainedHeads);
        }
        let mut acc = vec![0.0; batch.len()];
        for s in &self.samples {
            let z = forward_batch(&batch.inputs, s, arch)?;
            for (a, z) in acc.iter_mut().zip(z.iter()) {
                *a += sigmoid(*z);
            }
        }
        let k = self.samples.len() as f64;
        Ok(acc.into_iter().map(|a| (a / k).clamp(0.0, 1.0)).collect())
    }
}

fn check_labels(class_id: u32, data: &[LabeledExample]) -> Result<()> {
    let pos = data.iter().any(|e| e.binary_label);
    let neg = data.iter().any(|e| !e.binary_label);
    if data.is_empty() || !pos || !neg {
        return Err(Error::SingleLabel(class_id));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MultiHeadClassifier {
    arch: MlpArch,
    cfg: HeadConfig,
    heads: BTreeMap<u32, Head>,
    /// Prior mean for heads added later; zero when unset.
    new_head_mean: Option<ParamVector>,
}

impl MultiHeadClassifier {
    pub fn new(arch: MlpArch, cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            arch,
            cfg,
            heads: BTreeMap::new(),
            new_head_mean: None,
        })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn head(&self, class_id: u32) -> Option<&Head> {
        self.heads.get(&class_id)
    }

    pub fn heads(&self) -> impl Iterator<Item = &Head> {
        self.heads.values()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.heads.keys().copied().collect()
    }

    pub fn has_trained_heads(&self) -> bool {
        self.heads.values().any(Head::is_trained)
    }

    pub fn new_head_mean(&self) -> Option<&ParamVector> {
        self.new_head_mean.as_ref()
    }

    /// Centres the isotropic prior of heads added from now on. Existing
    /// heads are untouched.
    pub fn set_new_head_mean(&mut self, mean: Option<ParamVector>) -> Result<()> {
        if let Some(m) = &mean {
            if m.len() != self.arch.n_params() {
                return Err(Error::DimensionMismatch {
                    expected: self.arch.n_params(),
                    got: m.len(),
                });
            }
        }
        self.new_head_mean = mean;
        Ok(())
    }

    /// Adds an untrained head with the isotropic prior `N(m, gamma I)`,
    /// where `m` is the new-head mean (zero unless set); `None` uses the
    /// configured `gamma`.
    pub fn add_head(&mut self, class_id: u32, gamma: Option<f64>) -> Result<&Head> {
        if self.heads.contains_key(&class_id) {
            return Err(Error::DuplicateHead(class_id));
        }
        let gamma = gamma.unwrap_or(self.cfg.gamma);
        let mean = self
            .new_head_mean
            .clone()
            .unwrap_or_else(|| ParamVector::zeros(self.arch.n_params()));
        let prior = GaussianBelief::isotropic(self.arch.shapes(), mean, gamma)?;
        let head = Head {
            class_id,
            task_counter: 0,
            gamma,
            prior,
            posterior: None,
            update_log: Vec::new(),
            samples: Vec::new(),
        };
        Ok(self.heads.entry(class_id).or_insert(head))
    }

    /// MAP training under the head's prior, then (for Bayesian modes) the
    /// Kronecker-factored Laplace posterior with the tempering that
    /// minimises the PAC-Bayes bound. Only the named head changes, and only
    /// once every step has succeeded.
    pub fn update_head(&mut self, class_id: u32, data: &[LabeledExample]) -> Result<UpdateRecord> {
        let head = self
            .heads
            .get(&class_id)
            .ok_or(Error::UnknownHead(class_id))?;
        check_labels(class_id, data)?;
        let start = Instant::now();
        let task = head.task_counter;
        let mode = self.cfg.mode;
        let tags = [u64::from(class_id), u64::from(task)];

        // Vanilla heads are deterministic and train without any prior.
        let prior = if mode.is_bayesian() {
            head.prior.clone()
        } else {
            GaussianBelief::isotropic_zero(&self.arch, f64::INFINITY)?
        };
        let train_cfg = TrainConfig {
            seed: derive_seed(self.cfg.seed, &[TAG_TRAIN, tags[0], tags[1]]),
            ..self.cfg.train.clone()
        };
        let trained = train_map(data, &self.arch, &prior, &train_cfg)
            .map_err(|e| e.with_context(format!("training head {class_id}")))?;
        let final_loss = *trained.losses.last().unwrap_or(&trained.best_loss);

        let mut grid = (0, 0);
        let (posterior, next_prior, samples, bound) = if mode.is_bayesian() {
            let lik = likelihood_curvature(data, &trained.params, &self.arch)?;
            let bound_cfg = BoundConfig {
                seed: derive_seed(self.cfg.seed, &[TAG_BOUND, tags[0], tags[1]]),
                ..self.cfg.bound.clone()
            };
            let search =
                optimize_hyperparams(&trained.params, &lik, &prior, data, &self.arch, &bound_cfg)
                    .map_err(|e| e.with_context(format!("bound search for head {class_id}")))?;
            grid = (
                search.evaluated.len(),
                search
                    .evaluated
                    .iter()
                    .filter(|r| r.bound < r.emp_risk)
                    .count(),
            );
            let post = search.posterior;
            let mut rng = rng_for(self.cfg.seed, &[TAG_SAMPLES, tags[0], tags[1]]);
            let samples = sample_params(&post, self.cfg.predictive_samples, &mut rng)?;
            let next = match mode {
                PriorMode::Full => posterior_to_prior(&post),
                _ => {
                    GaussianBelief::isotropic(self.arch.shapes(), post.mean().clone(), head.gamma)?
                }
            };
            let mut report = search.best;
            report.class_id = Some(class_id);
            report.task_id = Some(task);
            (Posterior::Laplace(post), next, samples, Some(report))
        } else {
            let p = trained.params;
            (Posterior::Point(p.clone()), prior, vec![p], None)
        };

        let record = UpdateRecord {
            class_id,
            task,
            n_used: data.len(),
            final_loss,
            train_seconds: start.elapsed().as_secs_f64(),
            bound,
            grid_points: grid.0,
            grid_violations: grid.1,
        };
        let head = self.heads.get_mut(&class_id).expect("checked above");
        head.prior = next_prior;
        head.posterior = Some(posterior);
        head.samples = samples;
        head.task_counter += 1;
        head.update_log.push(record.clone());
        Ok(record)
    }

    /// Probability from every trained head, ordered by class id. The values
    /// are not normalised across heads.
    pub fn predict_all(&self, x: &FeatureVector) -> Result<Vec<(u32, f64)>> {
        let batch = Batch::from_features(&[x], self.dim())?;
        Ok(self
            .predict_all_batch(&batch)?
            .into_iter()
            .map(|(c, p)| (c, p[0]))
            .collect())
    }

    /// Per-head probabilities for every column of `batch`.
    pub fn predict_all_batch(&self, batch: &Batch) -> Result<Vec<(u32, Vec<f64>)>> {
        let out = self
            .heads
            .values()
            .filter(|h| h.is_trained())
            .map(|h| Ok((h.class_id, h.predict_batch(batch, &self.arch)?)))
            .collect::<Result<Vec<_>>>()?;
        if out.is_empty() {
            return Err(Error::NoTrainedHeads);
        }
        Ok(out)
    }

    /// Winning class and its own probability; ties go to the smallest id.
    pub fn predict(&self, x: &FeatureVector) -> Result<(u32, f64)> {
        argmax(&self.predict_all(x)?).ok_or(Error::NoTrainedHeads)
    }

    /// Checkpoint bytes of a trained head: its posterior belief, or its
    /// parameters for a point estimate.
    pub fn head_bytes(&self, class_id: u32) -> Result<Option<Vec<u8>>> {
        let head = self
            .heads
            .get(&class_id)
            .ok_or(Error::UnknownHead(class_id))?;
        let mut buf = Vec::new();
        match &head.posterior {
            None => return Ok(None),
            Some(Posterior::Laplace(b)) => write_belief(&mut buf, b)?,
            Some(Posterior::Point(p)) => write_params(&mut buf, &self.arch, p)?,
        }
        Ok(Some(buf))
    }

    /// Writes `manifest.json` plus one checkpoint file per trained head.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for h in self.heads.values() {
            let file = match self.head_bytes(h.class_id)? {
                None => None,
                Some(buf) => {
                    let name = format!("head_{:05}.bin", h.class_id);
                    fs::write(dir.join(&name), buf)?;
                    Some(name)
                }
            };
            entries.push(HeadManifest {
                class_id: h.class_id,
                task_counter: h.task_counter,
                gamma: h.gamma,
                tempering: h.tempering(),
                file,
                update_log: h.update_log.clone(),
            });
        }
        let new_head_mean = match &self.new_head_mean {
            None => None,
            Some(m) => {
                let name = "new_head_mean.bin".to_string();
                let mut buf = Vec::new();
                write_params(&mut buf, &self.arch, m)?;
                fs::write(dir.join(&name), buf)?;
                Some(name)
            }
        };
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            layer_sizes: self.arch.layer_sizes().to_vec(),
            activation: self.arch.activation(),
            config: self.cfg.clone(),
            new_head_mean,
            heads: entries,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::from(e).with_context(format!("reading {}", dir.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("manifest.json: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let arch = MlpArch::new(manifest.layer_sizes, manifest.activation)?;
        let mut clf = Self::new(arch, manifest.config)?;
        if let Some(file) = &manifest.new_head_mean {
            let bytes = fs::read(dir.join(file))?;
            let (sizes, m) = read_params(&mut bytes.as_slice())?;
            if sizes != clf.arch.layer_sizes() {
                return Err(Error::Checkpoint(format!(
                    "{file}: layer sizes differ from manifest"
                )));
            }
            clf.new_head_mean = Some(m);
        }
        for e in manifest.heads {
            clf.add_head(e.class_id, Some(e.gamma))?;
            let Some(file) = e.file else { continue };
            let bytes = fs::read(dir.join(&file))?;
            let (posterior, prior, samples) = if clf.cfg.mode.is_bayesian() {
                let post = read_belief(&mut bytes.as_slice())?;
                let last = e.task_counter.checked_sub(1).ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "head {} has a posterior but no updates",
                        e.class_id
                    ))
                })?;
                let mut rng = rng_for(
                    clf.cfg.seed,
                    &[TAG_SAMPLES, u64::from(e.class_id), u64::from(last)],
                );
                let samples = sample_params(&post, clf.cfg.predictive_samples, &mut rng)?;
                let prior = match clf.cfg.mode {
                    PriorMode::Full => posterior_to_prior(&post),
                    _ => {
                        GaussianBelief::isotropic(clf.arch.shapes(), post.mean().clone(), e.gamma)?
                    }
                };
                (Posterior::Laplace(post), prior, samples)
            } else {
                let (sizes, p) = read_params(&mut bytes.as_slice())?;
                if sizes != clf.arch.layer_sizes() {
                    return Err(Error::Checkpoint(format!(
                        "{file}: layer sizes differ from manifest"
                    )));
                }
                let prior = GaussianBelief::isotropic_zero(&clf.arch, e.gamma)?;
                (Posterior::Point(p.clone()), prior, vec![p])
            };
            let head = clf.heads.get_mut(&e.class_id).expect("just added");
            head.task_counter = e.task_counter;
            head.prior = prior;
            head.posterior = Some(posterior);
            head.samples = samples;
            head.update_log = e.update_log;
        }
        Ok(clf)
    }
}

/// Largest probability; the first (smallest id) entry wins ties.
pub fn argmax(probs: &[(u32, f64)]) -> Option<(u32, f64)> {
    let mut best: Option<(u32, f64)> = None;
    for &(c, p) in probs {
        match best {
            Some((bc, bp)) if p < bp || (p == bp && c > bc) => {}
            _ => best = Some((c, p)),
        }
    }
    best
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    layer_sizes: Vec<usize>,
    activation: Activation,
    config: HeadConfig,
    #[serde(default)]
    new_head_mean: Option<String>,
    heads: Vec<HeadManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadManifest {
    class_id: u32,
    task_counter: u32,
    gamma: f64,
    tempering: Option<Tempering>,
    file: Option<String>,
    update_log: Vec<UpdateRecord>,
}
