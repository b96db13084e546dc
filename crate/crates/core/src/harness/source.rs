//! Where episodes, oracle answers, and test data come from.
//!
//! A synthetic source draws everything from the drifting-cluster scenario
//! with independent random streams per purpose, so oracle pools and test
//! pools never share draws. A recorded source replays a stream CSV: frames
//! with odd `frame_idx` feed the episodes and the oracle, frames with even
//! `frame_idx` are held out for testing.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::{load_stream, FeatureVector, ScenarioConfig};
use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::config::RunConfig;

const TAG_ORACLE: u64 = 21;
const TAG_BACKGROUND: u64 = 22;
const TAG_TEST: u64 = 23;
const TAG_PRETRAIN: u64 = 24;
const TAG_GAP: u64 = 25;
const TAG_OBJECTNESS: u64 = 26;

/// Frames of one recorded demonstration, already split.
#[derive(Debug, Clone, Default)]
pub struct RecordedDemo {
    pub stream_pos: Vec<FeatureVector>,
    pub stream_neg: Vec<FeatureVector>,
    pub test_pos: Vec<FeatureVector>,
}

#[derive(Debug, Clone)]
pub enum Source {
    Synthetic {
        scenario: ScenarioConfig,
        seed: u64,
        sim_gap: f64,
    },
    Recorded {
        dim: usize,
        demos: BTreeMap<(u32, u32), RecordedDemo>,
    },
}

impl Source {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.stream_path {
            None => {
                let params = crate::datagen::DriftScenarioParams {
                    seed: cfg.seed,
                    ..cfg.scenario.clone()
                };
                let scenario = ScenarioConfig::synthetic_drift(&params);
                scenario.validate()?;
                Ok(Source::Synthetic {
                    scenario,
                    seed: cfg.seed,
                    sim_gap: cfg.pretrain.sim_gap,
                })
            }
            Some(path) => {
                let stream = load_stream(path)?;
                let dim = stream[0].frames[0].x.dim();
                let mut demos: BTreeMap<(u32, u32), RecordedDemo> = BTreeMap::new();
                for d in stream {
                    let entry = demos.entry((d.task_id, d.class_id)).or_default();
                    for (i, f) in d.frames.into_iter().enumerate() {
                        // frame_idx = i + 1
                        let odd = i % 2 == 0;
                        match (odd, f.binary_label) {
                            (true, true) => entry.stream_pos.push(f.x),
                            (true, false) => entry.stream_neg.push(f.x),
                            (false, true) => entry.test_pos.push(f.x),
                            (false, false) => {}
                        }
                    }
                }
                if demos
                    .values()
                    .any(|d| d.stream_pos.is_empty() || d.test_pos.is_empty())
                {
                    return Err(Error::InvalidConfig(
                        "every recorded demonstration needs positive frames at odd and even indices"
                            .into(),
                    ));
                }
                Ok(Source::Recorded { dim, demos })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Source::Synthetic { scenario, .. } => scenario.dim,
            Source::Recorded { dim, .. } => *dim,
        }
    }

    pub fn n_tasks(&self) -> u32 {
        match self {
            Source::Synthetic { scenario, .. } => scenario.n_tasks(),
            Source::Recorded { demos, .. } => demos.keys().map(|k| k.0 + 1).max().unwrap_or(0),
        }
    }

    pub fn active_classes(&self, task: u32) -> Vec<u32> {
        match self {
            Source::Synthetic { scenario, .. } => scenario.active_classes(task),
            Source::Recorded { demos, .. } => {
                demos.keys().filter(|k| k.0 == task).map(|k| k.1).collect()
            }
        }
    }

    /// Classes present at task 0; these get pretrained heads.
    pub fn initial_classes(&self) -> Vec<u32> {
        self.active_classes(0)
    }

    /// Object frames shown during the episode of `class` at `task`.
    pub fn episode_frames(&self, class: u32, task: u32) -> Result<Vec<FeatureVector>> {
        match self {
            Source::Synthetic { scenario, .. } => Ok(scenario
                .demonstration(class, task)?
                .positives()
                .map(|e| e.x.clone())
                .collect()),
            Source::Recorded { demos, .. } => Ok(recorded(demos, class, task)?.stream_pos.clone()),
        }
    }

    /// Object frames the oracle demonstrates when queried.
    pub fn oracle_positives(
        &self,
        class: u32,
        task: u32,
        round: usize,
        n: usize,
    ) -> Result<Vec<FeatureVector>> {
        match self {
            Source::Synthetic { scenario, seed, .. } => {
                let mut rng = rng_for(
                    *seed,
                    &[TAG_ORACLE, class.into(), task.into(), round as u64],
                );
                scenario.sample_class(class, task, n, &mut rng)
            }
            Source::Recorded { demos, .. } => {
                let d = recorded(demos, class, task)?;
                Ok(d.stream_pos.iter().take(n).cloned().collect())
            }
        }
    }

    /// Object-free frames recorded alongside an oracle answer.
    pub fn oracle_background(
        &self,
        class: u32,
        task: u32,
        round: usize,
        n: usize,
    ) -> Result<Vec<FeatureVector>> {
        match self {
            Source::Synthetic { scenario, seed, .. } => {
                let mut rng = rng_for(
                    *seed,
                    &[TAG_BACKGROUND, class.into(), task.into(), round as u64],
                );
                Ok(scenario.sample_background(n, &mut rng))
            }
            Source::Recorded { demos, .. } => {
                let d = recorded(demos, class, task)?;
                Ok(d.stream_neg.iter().take(n).cloned().collect())
            }
        }
    }

    /// Held-out frames of every class active at `task`, with their class.
    pub fn test_pool(&self, task: u32, per_class: usize) -> Result<Vec<(u32, FeatureVector)>> {
        let mut out = Vec::new();
        for class in self.active_classes(task) {
            let frames = match self {
                Source::Synthetic { scenario, seed, .. } => {
                    let mut rng = rng_for(*seed, &[TAG_TEST, class.into(), task.into()]);
                    scenario.sample_class(class, task, per_class, &mut rng)?
                }
                Source::Recorded { demos, .. } => recorded(demos, class, task)?.test_pos.clone(),
            };
            out.extend(frames.into_iter().map(|x| (class, x)));
        }
        Ok(out)
    }

    /// Offline pretraining data for `class`: `n` positives and `n`
    /// negatives. Synthetic scenarios shift the task-0 clusters by a fixed
    /// random offset of length `sim_gap`; recorded streams use their task-0
    /// demonstrations.
    pub fn pretrain_set(
        &self,
        class: u32,
        n: usize,
    ) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
        match self {
            Source::Synthetic {
                scenario,
                seed,
                sim_gap,
            } => {
                let mut rng = rng_for(*seed, &[TAG_PRETRAIN, class.into()]);
                let gap = gap_vector(scenario.dim, *seed, *sim_gap);
                let shift = |v: FeatureVector| -> Result<FeatureVector> {
                    FeatureVector::new(v.as_slice().iter().zip(&gap).map(|(a, b)| a + b).collect())
                };
                let pos = scenario
                    .sample_class(class, 0, n, &mut rng)?
                    .into_iter()
                    .map(shift)
                    .collect::<Result<Vec<_>>>()?;
                let others: Vec<u32> = self
                    .initial_classes()
                    .into_iter()
                    .filter(|&c| c != class)
                    .collect();
                let mut neg = Vec::with_capacity(n);
                for _ in 0..n {
                    let pick = rng.random_range(0..=others.len());
                    let x = if pick == others.len() {
                        scenario.sample_background(1, &mut rng).remove(0)
                    } else {
                        scenario
                            .sample_class(others[pick], 0, 1, &mut rng)?
                            .remove(0)
                    };
                    neg.push(shift(x)?);
                }
                Ok((pos, neg))
            }
            Source::Recorded { demos, .. } => {
                let d = recorded(demos, class, 0)?;
                let mut neg: Vec<FeatureVector> = d.stream_neg.clone();
                for ((t, c), other) in demos {
                    if *t == 0 && *c != class {
                        neg.extend(other.stream_pos.iter().cloned());
                    }
                }
                Ok((d.stream_pos.clone(), neg))
            }
        }
    }

    /// Offline object-versus-background data: `n` frames spread evenly over
    /// the task-0 classes and `n` background frames, shifted like
    /// [`Source::pretrain_set`].
    pub fn objectness_set(&self, n: usize) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
        match self {
            Source::Synthetic {
                scenario,
                seed,
                sim_gap,
            } => {
                let mut rng = rng_for(*seed, &[TAG_OBJECTNESS]);
                let gap = gap_vector(scenario.dim, *seed, *sim_gap);
                let shift = |v: FeatureVector| -> Result<FeatureVector> {
                    FeatureVector::new(v.as_slice().iter().zip(&gap).map(|(a, b)| a + b).collect())
                };
                let classes = self.initial_classes();
                if classes.is_empty() {
                    return Err(Error::InvalidConfig(
                        "scenario has no task-0 classes".into(),
                    ));
                }
                let mut pos = Vec::with_capacity(n);
                for i in 0..n {
                    let c = classes[i % classes.len()];
                    pos.push(shift(scenario.sample_class(c, 0, 1, &mut rng)?.remove(0))?);
                }
                let neg = scenario
                    .sample_background(n, &mut rng)
                    .into_iter()
                    .map(shift)
                    .collect::<Result<Vec<_>>>()?;
                Ok((pos, neg))
            }
            Source::Recorded { demos, .. } => {
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for ((t, _), d) in demos {
                    if *t == 0 {
                        pos.extend(d.stream_pos.iter().cloned());
                        neg.extend(d.stream_neg.iter().cloned());
                    }
                }
                if pos.is_empty() || neg.is_empty() {
                    return Err(Error::InvalidConfig(
                        "recorded stream needs task-0 object and background frames".into(),
                    ));
                }
                Ok((pos, neg))
            }
        }
    }
}

fn recorded(
    demos: &BTreeMap<(u32, u32), RecordedDemo>,
    class: u32,
    task: u32,
) -> Result<&RecordedDemo> {
    demos.get(&(task, class)).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "recorded stream has no demonstration of class {class} at task {task}"
        ))
    })
}

/// Domain shift between synthetic pretraining data and the stream.
fn gap_vector(dim: usize, seed: u64, length: f64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[TAG_GAP]);
    let v: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm * length).collect()
}
