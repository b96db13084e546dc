//! The stream-based active-learning loop with a scripted oracle.
//!
//! Each task plays one episode per active class: the object's frames
//! arrive one by one, every trained head scores them, the scores are fused
//! by the log-odds filter, and the learner decides whether to ask the
//! oracle. An answer is a fresh demonstration of the true class, from which
//! the acquisition function keeps a batch that, together with as many
//! negatives from the retained pool, updates the head of that class.

pub mod config;
pub mod report;
pub mod source;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::index;

pub use config::{ArchConfig, OracleConfig, PretrainConfig, QueryConfig, RunConfig};
pub use report::{
    compare_reports, format_comparison, read_report, write_report, AddHeadEvent, Aggregate,
    ClassTaskMetrics, ComparisonRow, DecisionRow, EpisodeRecord, MetricsReport, QueryEvent,
    TaskMetrics, REPORT_VERSION, SUCCESS_PREDICATE,
};
pub use source::Source;

use crate::active::{normalized_entropy, subsample_then_select, AcquisitionMethod, FilterBank};
use crate::datagen::{FeatureVector, LabeledExample};
use crate::error::{Error, Result};
use crate::heads::{argmax, MultiHeadClassifier, Posterior, PriorMode};
use crate::laplace::{sample_params, GaussianBelief};
use crate::metrics::{accuracy, auc, ece, precision, query_success_rate, QueryDecision};
use crate::mlp::{train_map, Batch, TrainConfig};
use crate::pacbayes::BoundReport;
use crate::rng::{derive_seed, rng_for};

const TAG_ACQ: u64 = 31;
const TAG_ACQ_SAMPLES: u64 = 32;
const TAG_NEGATIVES: u64 = 33;
const TAG_OBJECTNESS: u64 = 34;

/// Label carried by the object-versus-background pretraining examples.
const OBJECTNESS_CLASS: u32 = u32::MAX;

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub decisions: Vec<DecisionRow>,
    pub classifier: MultiHeadClassifier,
}

/// Builds the task-0 classifier: pretrained heads for the Bayesian
/// variants (or heads loaded from a checkpoint), no heads for Vanilla.
pub fn initial_classifier(
    cfg: &RunConfig,
    source: &Source,
) -> Result<(MultiHeadClassifier, Vec<f64>)> {
    let arch = cfg.arch.build(source.dim())?;
    if !cfg.variant.is_bayesian() {
        return Ok((
            MultiHeadClassifier::new(arch, cfg.head_config())?,
            Vec::new(),
        ));
    }
    if let Some(dir) = &cfg.pretrain.checkpoint {
        let loaded = MultiHeadClassifier::load_checkpoint(dir)?;
        if loaded.arch() != &arch {
            return Err(Error::InvalidConfig(format!(
                "checkpoint {} has architecture {:?}, config asks for {:?}",
                dir.display(),
                loaded.arch().layer_sizes(),
                arch.layer_sizes()
            )));
        }
        if loaded.config().mode != cfg.variant {
            return Err(Error::InvalidConfig(format!(
                "checkpoint {} was trained as {:?}, config asks for {:?}",
                dir.display(),
                loaded.config().mode,
                cfg.variant
            )));
        }
        return Ok((loaded, Vec::new()));
    }
    pretrain(cfg, source)
}

/// Learns the initial prior of every task-0 class from offline data.
pub fn pretrain(cfg: &RunConfig, source: &Source) -> Result<(MultiHeadClassifier, Vec<f64>)> {
    let arch = cfg.arch.build(source.dim())?;
    let mut head_cfg = cfg.head_config();
    if head_cfg.mode == PriorMode::Vanilla {
        head_cfg.mode = PriorMode::Full;
    }
    let mut clf = MultiHeadClassifier::new(arch, head_cfg)?;
    let mut seconds = Vec::new();
    for class in source.initial_classes() {
        let (pos, neg) = source.pretrain_set(class, cfg.pretrain.per_class)?;
        let data: Vec<LabeledExample> = pos
            .into_iter()
            .map(|x| LabeledExample::new(x, class, true))
            .chain(
                neg.into_iter()
                    .map(|x| LabeledExample::new(x, class, false)),
            )
            .collect();
        clf.add_head(class, None)?;
        let rec = clf
            .update_head(class, &data)
            .map_err(|e| e.with_context(format!("pretraining class {class}")))?;
        seconds.push(rec.train_seconds);
    }
    if cfg.pretrain.objectness {
        let start = Instant::now();
        let (pos, neg) = source.objectness_set(cfg.pretrain.per_class)?;
        let data: Vec<LabeledExample> = pos
            .into_iter()
            .map(|x| LabeledExample::new(x, OBJECTNESS_CLASS, true))
            .chain(
                neg.into_iter()
                    .map(|x| LabeledExample::new(x, OBJECTNESS_CLASS, false)),
            )
            .collect();
        let prior = GaussianBelief::isotropic_zero(clf.arch(), cfg.gamma)?;
        let train = TrainConfig {
            seed: derive_seed(cfg.seed, &[TAG_OBJECTNESS]),
            ..cfg.train.clone()
        };
        let trained = train_map(&data, clf.arch(), &prior, &train)
            .map_err(|e| e.with_context("pretraining the object-versus-background head"))?;
        clf.set_new_head_mean(Some(trained.params))?;
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok((clf, seconds))
}

/// Test-pool predictions of the current classifier.
struct Evaluation {
    truth: Vec<u32>,
    predicted: Vec<u32>,
    winner_p: Vec<f64>,
    head_probs: Vec<(u32, Vec<f64>)>,
}

impl Evaluation {
    fn new(
        clf: &MultiHeadClassifier,
        test: &[(u32, FeatureVector)],
        batch: &Batch,
    ) -> Result<Self> {
        let truth: Vec<u32> = test.iter().map(|t| t.0).collect();
        if !clf.has_trained_heads() {
            return Ok(Self {
                predicted: vec![u32::MAX; truth.len()],
                winner_p: vec![0.0; truth.len()],
                truth,
                head_probs: Vec::new(),
            });
        }
        let head_probs = clf.predict_all_batch(batch)?;
        let mut predicted = Vec::with_capacity(truth.len());
        let mut winner_p = Vec::with_capacity(truth.len());
        for i in 0..truth.len() {
            let column: Vec<(u32, f64)> = head_probs.iter().map(|(c, p)| (*c, p[i])).collect();
            let (c, p) = argmax(&column).expect("at least one trained head");
            predicted.push(c);
            winner_p.push(p);
        }
        Ok(Self {
            truth,
            predicted,
            winner_p,
            head_probs,
        })
    }

    fn precision(&self, class: u32) -> f64 {
        precision(&self.predicted, &self.truth, class)
    }

    fn ece_where(&self, bins: usize, keep: impl Fn(u32) -> bool) -> Result<f64> {
        let preds: Vec<(f64, bool)> = (0..self.truth.len())
            .filter(|&i| keep(self.truth[i]))
            .map(|i| (self.winner_p[i], self.predicted[i] == self.truth[i]))
            .collect();
        if preds.is_empty() {
            return Ok(0.0);
        }
        ece(&preds, bins)
    }

    fn auc(&self, class: u32) -> Option<f64> {
        let (_, probs) = self.head_probs.iter().find(|(c, _)| *c == class)?;
        let labels: Vec<bool> = self.truth.iter().map(|&t| t == class).collect();
        auc(probs, &labels).ok()
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// A feature vector retained from earlier oracle answers, with the class it
/// showed (`None` for object-free frames).
struct Retained {
    origin: Option<u32>,
    x: FeatureVector,
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    source: &'a Source,
    clf: MultiHeadClassifier,
    retained: Vec<Retained>,
    decisions: Vec<DecisionRow>,
    frame: u64,
    queries: Vec<QueryEvent>,
    add_heads: Vec<AddHeadEvent>,
}

struct EpisodeOutcome {
    record: EpisodeRecord,
    decisions: Vec<QueryDecision>,
    train_seconds: f64,
    bounds: Vec<BoundReport>,
    grid_violations: usize,
}

impl Loop<'_> {
    /// Oracle answer for `class`, reduced to the update set.
    fn update_data(&mut self, class: u32, task: u32, round: usize) -> Result<Vec<LabeledExample>> {
        let cfg = self.cfg;
        let pool: Vec<LabeledExample> = self
            .source
            .oracle_positives(class, task, round, cfg.oracle.pool_size)?
            .into_iter()
            .map(|x| LabeledExample::new(x, class, true))
            .collect();
        let background =
            self.source
                .oracle_background(class, task, round, cfg.oracle.background_size)?;
        if pool.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "oracle has no frames of class {class}"
            )));
        }

        let tags = [u64::from(class), u64::from(task), round as u64];
        let mut acq = cfg.acquisition.clone();
        acq.seed = derive_seed(cfg.seed, &[TAG_ACQ, tags[0], tags[1], tags[2]]);
        acq.subsample = acq.subsample.min(pool.len());
        acq.batch_size = acq.batch_size.min(acq.subsample);
        let head = self.clf.head(class).ok_or(Error::UnknownHead(class))?;
        let samples = match (cfg.variant.is_bayesian(), head.posterior()) {
            (false, _) => {
                acq.method = AcquisitionMethod::Uniform;
                Vec::new()
            }
            (true, _) if acq.method == AcquisitionMethod::Uniform => Vec::new(),
            (true, Some(Posterior::Laplace(post))) => {
                let mut rng = rng_for(cfg.seed, &[TAG_ACQ_SAMPLES, tags[0], tags[1], tags[2]]);
                sample_params(post, acq.samples, &mut rng)?
            }
            (true, _) => {
                let mut rng = rng_for(cfg.seed, &[TAG_ACQ_SAMPLES, tags[0], tags[1], tags[2]]);
                sample_params(head.prior(), acq.samples, &mut rng)?
            }
        };
        let chosen = subsample_then_select(&pool, &samples, self.clf.arch(), &acq)?;

        let candidates: Vec<&FeatureVector> = self
            .retained
            .iter()
            .filter(|r| r.origin != Some(class))
            .map(|r| &r.x)
            .chain(background.iter())
            .collect();
        let n_neg = chosen.len().min(candidates.len());
        let mut rng = rng_for(cfg.seed, &[TAG_NEGATIVES, tags[0], tags[1], tags[2]]);
        let mut picks = index::sample(&mut rng, candidates.len(), n_neg).into_vec();
        picks.sort_unstable();
        let mut data = chosen;
        data.extend(
            picks
                .into_iter()
                .map(|i| LabeledExample::new(candidates[i].clone(), class, false)),
        );

        self.retained.extend(pool.into_iter().map(|e| Retained {
            origin: Some(class),
            x: e.x,
        }));
        self.retained
            .extend(background.into_iter().map(|x| Retained { origin: None, x }));
        Ok(data)
    }

    fn episode(
        &mut self,
        class: u32,
        task: u32,
        test: &[(u32, FeatureVector)],
        test_batch: &Batch,
    ) -> Result<EpisodeOutcome> {
        let cfg = self.cfg;
        let q = &cfg.query;
        let frames = self.source.episode_frames(class, task)?;
        let first_frame = self.frame + 1;
        let mut bank = FilterBank::new(q.class_prior);
        // Frames since the episode started or the model last changed.
        let mut settled = 0usize;
        let mut queries = 0usize;
        let mut added_head = false;
        let mut decisions = Vec::new();
        let mut train_seconds = 0.0;
        let mut bounds = Vec::new();
        let mut grid_violations = 0;

        let eval = Evaluation::new(&self.clf, test, test_batch)?;
        let mut precision_trace = vec![eval.precision(class)];
        let mut to_target = (precision_trace[0] >= q.target_precision).then_some(0);
        let mut to_confident = None;
        let mut played = 0;

        for x in &frames {
            self.frame += 1;
            played += 1;
            let raw = if self.clf.has_trained_heads() {
                self.clf.predict_all(x)?
            } else {
                Vec::new()
            };
            let filtered: Vec<(u32, f64)> =
                raw.iter().map(|&(c, p)| (c, bank.update(c, p))).collect();
            settled += 1;
            let winner = argmax(&filtered);
            if to_confident.is_none()
                && winner.is_some_and(|(c, p)| c == class && !q.rule.should_query(p))
            {
                to_confident = Some(queries);
            }
            let due = queries < q.max_queries_per_episode
                && (raw.is_empty() || settled >= q.warmup_frames);
            let unknown = filtered.iter().all(|&(_, p)| p < q.unknown_threshold);
            let wants = match winner {
                None => true,
                Some((_, p)) => unknown || q.rule.should_query(p),
            };
            let queried = due && wants;
            for (&(c, r), &(_, f)) in raw.iter().zip(&filtered) {
                self.decisions.push(DecisionRow {
                    k: self.frame,
                    class_id: c,
                    raw_p: r,
                    filtered_p: f,
                    norm_entropy: normalized_entropy(f),
                    queried,
                });
            }
            if !due {
                continue;
            }
            decisions.push(QueryDecision {
                queried,
                prediction_correct: winner.is_some_and(|(c, _)| c == class),
            });
            if !queried {
                continue;
            }

            let round = queries;
            queries += 1;
            let new_head = self.clf.head(class).is_none();
            if new_head {
                let gamma = self.clf.config().gamma;
                self.clf.add_head(class, None)?;
                self.add_heads.push(AddHeadEvent {
                    task,
                    class_id: class,
                    gamma,
                });
                added_head = true;
            }
            let data = self.update_data(class, task, round)?;
            let rec = self.clf.update_head(class, &data).map_err(|e| {
                e.with_context(format!("task {task}, class {class}, frame {}", self.frame))
            })?;
            train_seconds += rec.train_seconds;
            grid_violations += rec.grid_violations;
            if let Some(b) = &rec.bound {
                bounds.push(b.clone());
            }
            self.queries.push(QueryEvent {
                frame: self.frame,
                task,
                class_id: class,
                round,
                added_head: new_head,
                n_selected: data.len(),
                train_seconds: rec.train_seconds,
                bound: rec.bound,
            });
            settled = 0;
            let eval = Evaluation::new(&self.clf, test, test_batch)?;
            let p = eval.precision(class);
            precision_trace.push(p);
            if to_target.is_none() && p >= q.target_precision {
                to_target = Some(queries);
            }
        }
        Ok(EpisodeOutcome {
            record: EpisodeRecord {
                task,
                class_id: class,
                first_frame,
                frames: played,
                queries,
                added_head,
                queries_to_target: to_target,
                queries_to_confident: to_confident,
                precision_trace,
            },
            decisions,
            train_seconds,
            bounds,
            grid_violations,
        })
    }

    /// Checkpoint bytes of every trained head.
    fn snapshot(&self) -> Result<BTreeMap<u32, Vec<u8>>> {
        let mut out = BTreeMap::new();
        for c in self.clf.class_ids() {
            if let Some(b) = self.clf.head_bytes(c)? {
                out.insert(c, b);
            }
        }
        Ok(out)
    }
}

/// Runs the whole stream. Artifacts are written to `out_dir` when given.
pub fn run_stream(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let source = Source::from_config(cfg)?;
    let (clf, pretrain_seconds) = initial_classifier(cfg, &source)?;
    let mut lp = Loop {
        cfg,
        source: &source,
        clf,
        retained: Vec::new(),
        decisions: Vec::new(),
        frame: 0,
        queries: Vec::new(),
        add_heads: Vec::new(),
    };
    if let (Some(dir), true) = (out_dir, cfg.write_checkpoints) {
        lp.clf
            .save_checkpoint(&dir.join("checkpoints").join("initial"))?;
    }

    let max_q = cfg.query.max_queries_per_episode;
    let mut per_class_task = Vec::new();
    let mut per_task = Vec::new();
    let mut episodes = Vec::new();
    let mut all_decisions = Vec::new();
    let mut forgetting_violations = 0;
    let mut bound_violations = 0;

    for task in 0..source.n_tasks() {
        let before = lp.snapshot()?;
        let test = source.test_pool(task, cfg.oracle.test_per_class)?;
        let xs: Vec<&FeatureVector> = test.iter().map(|t| &t.1).collect();
        let test_batch = Batch::from_features(&xs, source.dim())?;
        let mut outcomes = Vec::new();
        for class in source.active_classes(task) {
            let out = lp
                .episode(class, task, &test, &test_batch)
                .map_err(|e| e.with_context(format!("episode of class {class} at task {task}")))?;
            outcomes.push(out);
        }

        let updated: BTreeSet<u32> = outcomes
            .iter()
            .filter(|o| o.record.queries > 0)
            .map(|o| o.record.class_id)
            .collect();
        let after = lp.snapshot()?;
        for (c, bytes) in &before {
            if !updated.contains(c) && after.get(c) != Some(bytes) {
                forgetting_violations += 1;
            }
        }
        if let (Some(dir), true) = (out_dir, cfg.write_checkpoints) {
            lp.clf
                .save_checkpoint(&dir.join("checkpoints").join(format!("task_{task:03}")))?;
        }

        let eval = Evaluation::new(&lp.clf, &test, &test_batch)?;
        let bins = cfg.ece_bins;
        let mut task_queries = 0;
        for o in outcomes {
            let c = o.record.class_id;
            task_queries += o.record.queries;
            bound_violations += o.grid_violations;
            per_class_task.push(ClassTaskMetrics {
                task,
                class_id: c,
                precision: eval.precision(c),
                ece: eval.ece_where(bins, |t| t == c)?,
                auc: eval.auc(c),
                queries: o.record.queries,
                queries_to_target: o.record.queries_to_target.unwrap_or(max_q + 1),
                query_success_rate: query_success_rate(&o.decisions).ok(),
                train_seconds: o.train_seconds,
                bounds: o.bounds,
            });
            all_decisions.extend(o.decisions);
            episodes.push(o.record);
        }
        let classes = source.active_classes(task);
        per_task.push(TaskMetrics {
            task,
            precision: mean(classes.iter().map(|&c| eval.precision(c))).unwrap_or(0.0),
            accuracy: accuracy(&eval.predicted, &eval.truth),
            ece: eval.ece_where(bins, |_| true)?,
            auc: mean(classes.iter().filter_map(|&c| eval.auc(c))),
            queries: task_queries,
        });
    }

    let train: Vec<f64> = lp.queries.iter().map(|q| q.train_seconds).collect();
    let aggregate = Aggregate {
        mean_precision: mean(per_class_task.iter().map(|m| m.precision)).unwrap_or(0.0),
        mean_ece: mean(per_class_task.iter().map(|m| m.ece)).unwrap_or(0.0),
        mean_auc: mean(per_class_task.iter().filter_map(|m| m.auc)),
        total_queries: lp.queries.len(),
        mean_queries_to_target: mean(per_class_task.iter().map(|m| m.queries_to_target as f64))
            .unwrap_or(0.0),
        query_success_rate: query_success_rate(&all_decisions).ok(),
        mean_train_seconds: mean(train.iter().copied()).unwrap_or(0.0),
        max_train_seconds: train.iter().copied().fold(0.0, f64::max),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        forgetting_violations,
        bound_violations,
    };
    let report = MetricsReport {
        version: REPORT_VERSION,
        variant: cfg.variant,
        seed: cfg.seed,
        success_predicate: SUCCESS_PREDICATE.to_string(),
        aggregate,
        per_task,
        per_class_task,
        episodes,
        queries: lp.queries,
        add_head_events: lp.add_heads,
        pretrain_seconds,
    };
    if let Some(dir) = out_dir {
        write_report(&report, &lp.decisions, dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    }
    Ok(RunOutput {
        report,
        decisions: lp.decisions,
        classifier: lp.clf,
    })
}

/// Metrics of a fixed classifier on labelled test frames.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub per_class: Vec<EvalClass>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalClass {
    pub class_id: u32,
    pub support: usize,
    pub precision: f64,
    pub auc: Option<f64>,
}

pub fn evaluate_classifier(
    clf: &MultiHeadClassifier,
    test: &[(u32, FeatureVector)],
    bins: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyStream);
    }
    let xs: Vec<&FeatureVector> = test.iter().map(|t| &t.1).collect();
    let batch = Batch::from_features(&xs, clf.dim())?;
    if !clf.has_trained_heads() {
        return Err(Error::NoTrainedHeads);
    }
    let eval = Evaluation::new(clf, test, &batch)?;
    let classes: BTreeSet<u32> = eval.truth.iter().copied().collect();
    Ok(EvalReport {
        n: test.len(),
        accuracy: accuracy(&eval.predicted, &eval.truth),
        ece: eval.ece_where(bins, |_| true)?,
        per_class: classes
            .into_iter()
            .map(|c| EvalClass {
                class_id: c,
                support: eval.truth.iter().filter(|&&t| t == c).count(),
                precision: eval.precision(c),
                auc: eval.auc(c),
            })
            .collect(),
    })
}
