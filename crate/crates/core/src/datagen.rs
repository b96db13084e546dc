//! Feature streams and the synthetic drifting-cluster scenario generator.
//!
//! Every class is an isotropic Gaussian cluster in feature space. Task `t`
//! of a class translates its mean by `(t - first_task) * translation` and
//! multiplies its spread by `1 + (t - first_task) * cov_inflation`.
//! Negative frames of a demonstration come from the other classes that are
//! active at the same task, or from a dedicated background cluster.
//!
//! Streams are exchanged as CSV with the header
//! `task_id,class_id,frame_idx,binary_label,f0,...,f{d-1}`, one row per
//! frame, sorted by `(task_id, class_id, frame_idx)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Default feature dimension.
pub const DEFAULT_DIM: usize = 32;

const TAG_DEMO: u64 = 1;
const TAG_LAYOUT: u64 = 2;

/// A finite real-valued feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature {pos} is {}",
                values[pos]
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// A feature vector labelled relative to one class: `binary_label` says
/// whether the frame shows an instance of `class_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: FeatureVector,
    pub class_id: u32,
    pub binary_label: bool,
}

impl LabeledExample {
    pub fn new(x: FeatureVector, class_id: u32, binary_label: bool) -> Self {
        Self {
            x,
            class_id,
            binary_label,
        }
    }

    pub fn target(&self) -> f64 {
        if self.binary_label {
            1.0
        } else {
            0.0
        }
    }
}

/// One demonstration sequence. Frame `k` (1-based) is `frames[k - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task_id: u32,
    pub class_id: u32,
    pub frames: Vec<LabeledExample>,
}

impl Demonstration {
    pub fn positives(&self) -> impl Iterator<Item = &LabeledExample> {
        self.frames.iter().filter(|f| f.binary_label)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &LabeledExample> {
        self.frames.iter().filter(|f| !f.binary_label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DriftSpec {
    /// Mean translation per task; empty means no translation.
    pub translation: Vec<f64>,
    /// Relative spread increase per task.
    pub cov_inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u32,
    pub mean: Vec<f64>,
    pub cov_scale: f64,
    #[serde(default)]
    pub drift: DriftSpec,
    /// First task at which the class is demonstrated.
    #[serde(default)]
    pub first_task: u32,
    /// Overrides the scenario's `demos_per_class` for this class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_demos: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub mean: Vec<f64>,
    pub cov_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub classes: Vec<ClassSpec>,
    pub background: BackgroundSpec,
    pub frames_per_demo: usize,
    pub demos_per_class: usize,
    /// Fraction of positive frames within each demonstration.
    #[serde(default = "default_positive_fraction")]
    pub positive_fraction: f64,
    /// Extra isotropic noise added to every frame.
    #[serde(default)]
    pub noise_scale: f64,
    pub seed: u64,
}

fn default_positive_fraction() -> f64 {
    0.5
}

/// Knobs for [`ScenarioConfig::synthetic_drift`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftScenarioParams {
    pub dim: usize,
    pub n_classes: usize,
    pub n_tasks: usize,
    pub frames_per_demo: usize,
    /// Standard deviation of class-mean coordinates.
    pub separation: f64,
    pub cov_scale: f64,
    /// Length of the per-task mean translation.
    pub drift_per_task: f64,
    pub cov_inflation: f64,
    pub noise_scale: f64,
    /// Classes listed here first appear at the given task.
    pub late_classes: Vec<(u32, u32)>,
    pub seed: u64,
}

impl Default for DriftScenarioParams {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            n_classes: 3,
            n_tasks: 5,
            frames_per_demo: 40,
            separation: 0.55,
            cov_scale: 1.0,
            drift_per_task: 1.2,
            cov_inflation: 0.05,
            noise_scale: 0.0,
            late_classes: Vec::new(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Builds a scenario of random Gaussian clusters that drift along random
    /// directions, all derived from `params.seed`.
    pub fn synthetic_drift(params: &DriftScenarioParams) -> Self {
        let mut rng = rng_for(params.seed, &[TAG_LAYOUT]);
        let d = params.dim;
        let gauss = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> Vec<f64> {
            (0..d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let classes = (0..params.n_classes as u32)
            .map(|id| {
                let mean = gauss(&mut rng, params.separation);
                let dir = gauss(&mut rng, 1.0);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let translation = dir
                    .iter()
                    .map(|v| v / norm * params.drift_per_task)
                    .collect();
                let first_task = params
                    .late_classes
                    .iter()
                    .find(|(c, _)| *c == id)
                    .map(|(_, t)| *t)
                    .unwrap_or(0);
                ClassSpec {
                    id,
                    mean,
                    cov_scale: params.cov_scale,
                    drift: DriftSpec {
                        translation,
                        cov_inflation: params.cov_inflation,
                    },
                    first_task,
                    n_demos: Some(params.n_tasks.saturating_sub(first_task as usize)),
                }
            })
            .collect();
        let background = BackgroundSpec {
            mean: gauss(&mut rng, params.separation),
            cov_scale: params.cov_scale * 1.5,
        };
        let demos_per_class = params.n_tasks.max(1);
        Self {
            dim: d,
            classes,
            background,
            frames_per_demo: params.frames_per_demo,
            demos_per_class,
            positive_fraction: 0.5,
            noise_scale: params.noise_scale,
            seed: params.seed,
        }
    }

    /// Parses either a full scenario (a table with `classes`) or the knobs
    /// of [`ScenarioConfig::synthetic_drift`]. `seed` overrides the file.
    pub fn from_toml_str(text: &str, seed: Option<u64>) -> Result<Self> {
        let parse_err = |e: toml::de::Error| Error::InvalidConfig(format!("scenario: {e}"));
        let table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        let mut scenario = if table.contains_key("classes") {
            toml::from_str::<ScenarioConfig>(text).map_err(parse_err)?
        } else {
            let mut params: DriftScenarioParams = toml::from_str(text).map_err(parse_err)?;
            if let Some(s) = seed {
                params.seed = s;
            }
            ScenarioConfig::synthetic_drift(&params)
        };
        if let Some(s) = seed {
            scenario.seed = s;
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("scenario needs at least one class".into());
        }
        if self.frames_per_demo == 0 {
            return bad("frames_per_demo must be at least 1".into());
        }
        if self.demos_per_class == 0 {
            return bad("demos_per_class must be at least 1".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return bad("positive_fraction must lie in (0, 1]".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if !ids.insert(c.id) {
                return bad(format!("duplicate class id {}", c.id));
            }
            if c.mean.len() != self.dim {
                return bad(format!("class {} mean has length {}", c.id, c.mean.len()));
            }
            if !(c.cov_scale > 0.0 && c.cov_scale.is_finite()) {
                return bad(format!("class {} covariance scale must be > 0", c.id));
            }
            if !c.drift.translation.is_empty() && c.drift.translation.len() != self.dim {
                return bad(format!("class {} drift translation has wrong length", c.id));
            }
            if c.n_demos == Some(0) {
                return bad(format!("class {} has no demonstrations", c.id));
            }
            if !(c.drift.cov_inflation >= 0.0 && c.drift.cov_inflation.is_finite()) {
                return bad(format!("class {} cov_inflation must be >= 0", c.id));
            }
            let finite = c
                .mean
                .iter()
                .chain(c.drift.translation.iter())
                .all(|v| v.is_finite());
            if !finite {
                return bad(format!("class {} has non-finite parameters", c.id));
            }
        }
        if self.background.mean.len() != self.dim {
            return bad("background mean has wrong length".into());
        }
        if !(self.background.cov_scale > 0.0 && self.background.cov_scale.is_finite()) {
            return bad("background covariance scale must be > 0".into());
        }
        Ok(())
    }

    pub fn class(&self, id: u32) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Task ids at which `class` is demonstrated.
    pub fn tasks_of(&self, class: &ClassSpec) -> std::ops::Range<u32> {
        class.first_task..class.first_task + class.n_demos.unwrap_or(self.demos_per_class) as u32
    }

    /// Classes with a demonstration at `task`, in id order.
    pub fn active_classes(&self, task: u32) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .classes
            .iter()
            .filter(|c| self.tasks_of(c).contains(&task))
            .map(|c| c.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn n_tasks(&self) -> u32 {
        self.classes
            .iter()
            .map(|c| self.tasks_of(c).end)
            .max()
            .unwrap_or(0)
    }

    /// Mean of class `id` at `task`.
    pub fn class_mean(&self, id: u32, task: u32) -> Option<Vec<f64>> {
        let c = self.class(id)?;
        let steps = task.saturating_sub(c.first_task) as f64;
        Some(
            c.mean
                .iter()
                .enumerate()
                .map(|(j, m)| m + steps * c.drift.translation.get(j).copied().unwrap_or(0.0))
                .collect(),
        )
    }

    /// Per-coordinate standard deviation of class `id` at `task`.
    pub fn class_std(&self, id: u32, task: u32) -> Option<f64> {
        let c = self.class(id)?;
        let steps = task.saturating_sub(c.first_task) as f64;
        let s = c.cov_scale * (1.0 + steps * c.drift.cov_inflation);
        Some((s * s + self.noise_scale * self.noise_scale).sqrt())
    }

    fn draw(&self, mean: &[f64], std: f64, rng: &mut impl Rng) -> FeatureVector {
        let v = mean
            .iter()
            .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        FeatureVector(v)
    }

    /// Draws `n` frames of class `id` as it looks at `task`.
    pub fn sample_class(
        &self,
        id: u32,
        task: u32,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<FeatureVector>> {
        let mean = self
            .class_mean(id, task)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown class {id}")))?;
        let std = self.class_std(id, task).unwrap_or(1.0);
        Ok((0..n).map(|_| self.draw(&mean, std, rng)).collect())
    }

    pub fn sample_background(&self, n: usize, rng: &mut impl Rng) -> Vec<FeatureVector> {
        let b = &self.background;
        let std = (b.cov_scale * b.cov_scale + self.noise_scale * self.noise_scale).sqrt();
        (0..n).map(|_| self.draw(&b.mean, std, rng)).collect()
    }

    /// One negative frame for class `id` at `task`: another active class or
    /// the background cluster, chosen uniformly.
    pub fn sample_negative(&self, id: u32, task: u32, rng: &mut impl Rng) -> FeatureVector {
        let others: Vec<u32> = self
            .active_classes(task)
            .into_iter()
            .filter(|&c| c != id)
            .collect();
        let pick = rng.random_range(0..=others.len());
        if pick == others.len() {
            let b = &self.background;
            let std = (b.cov_scale * b.cov_scale + self.noise_scale * self.noise_scale).sqrt();
            self.draw(&b.mean, std, rng)
        } else {
            let o = others[pick];
            let mean = self.class_mean(o, task).unwrap_or_default();
            let std = self.class_std(o, task).unwrap_or(1.0);
            self.draw(&mean, std, rng)
        }
    }

    /// Generates the demonstration of class `id` at `task`.
    pub fn demonstration(&self, id: u32, task: u32) -> Result<Demonstration> {
        let mut rng = rng_for(self.seed, &[TAG_DEMO, id as u64, task as u64]);
        let k = self.frames_per_demo;
        let mut n_pos = ((k as f64) * self.positive_fraction).round() as usize;
        n_pos = n_pos.clamp(1, k);
        if self.positive_fraction < 1.0 && k >= 2 && n_pos == k {
            n_pos = k - 1;
        }
        let mut labels: Vec<bool> = (0..k).map(|i| i < n_pos).collect();
        labels.shuffle(&mut rng);
        let mean = self
            .class_mean(id, task)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown class {id}")))?;
        let std = self.class_std(id, task).unwrap_or(1.0);
        let frames = labels
            .into_iter()
            .map(|positive| {
                let x = if positive {
                    self.draw(&mean, std, &mut rng)
                } else {
                    self.sample_negative(id, task, &mut rng)
                };
                LabeledExample::new(x, id, positive)
            })
            .collect();
        Ok(Demonstration {
            task_id: task,
            class_id: id,
            frames,
        })
    }
}

/// Generates every demonstration of the scenario, ordered by
/// `(task_id, class_id)`.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Vec<Demonstration>> {
    cfg.validate()?;
    let mut demos = Vec::new();
    for task in 0..cfg.n_tasks() {
        for id in cfg.active_classes(task) {
            demos.push(cfg.demonstration(id, task)?);
        }
    }
    Ok(demos)
}

/// Writes a stream as CSV.
pub fn save_stream(demos: &[Demonstration], path: &Path) -> Result<()> {
    let text = stream_to_csv(demos)?;
    fs::write(path, text).map_err(|e| {
        Error::Io(e).with_context(format!("cannot write stream to {}", path.display()))
    })
}

pub fn stream_to_csv(demos: &[Demonstration]) -> Result<String> {
    let first = demos
        .iter()
        .flat_map(|d| d.frames.first())
        .next()
        .ok_or(Error::EmptyStream)?;
    let d = first.x.dim();
    let mut order: Vec<&Demonstration> = demos.iter().collect();
    order.sort_by_key(|demo| (demo.task_id, demo.class_id));

    let mut out = String::from("task_id,class_id,frame_idx,binary_label");
    for j in 0..d {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for demo in order {
        for (k, frame) in demo.frames.iter().enumerate() {
            let values = frame.x.as_slice();
            if values.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "task {} class {} frame {}",
                    demo.task_id,
                    demo.class_id,
                    k + 1
                )));
            }
            write!(
                out,
                "{},{},{},{}",
                demo.task_id,
                demo.class_id,
                k + 1,
                u8::from(frame.binary_label)
            )
            .unwrap();
            for v in values {
                // `{:?}` prints the shortest representation that parses back exactly.
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn load_stream(path: &Path) -> Result<Vec<Demonstration>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(e).with_context(format!("cannot read stream {}", path.display())))?;
    parse_stream(&text, path)
}

pub fn parse_stream(text: &str, path: &Path) -> Result<Vec<Demonstration>> {
    let csv_err = |line: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::EmptyStream)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let fixed = ["task_id", "class_id", "frame_idx", "binary_label"];
    if cols.len() < fixed.len() + 1 || cols[..4] != fixed {
        return Err(csv_err(hline + 1, format!("malformed header `{header}`")));
    }
    let d = cols.len() - 4;
    for (j, c) in cols[4..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(csv_err(
                hline + 1,
                format!("expected column f{j}, found `{c}`"),
            ));
        }
    }

    let mut demos: Vec<Demonstration> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 4 {
            return Err(csv_err(
                lineno,
                format!(
                    "dimension mismatch: expected {d} features, found {}",
                    cells.len().saturating_sub(4)
                ),
            ));
        }
        let int = |j: usize| -> Result<u64> {
            cells[j]
                .parse::<u64>()
                .map_err(|_| csv_err(lineno, format!("non-numeric {} `{}`", fixed[j], cells[j])))
        };
        let task = int(0)? as u32;
        let class = int(1)? as u32;
        let frame_idx = int(2)? as usize;
        let label = match cells[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(csv_err(
                    lineno,
                    format!("binary_label must be 0 or 1, found `{other}`"),
                ))
            }
        };
        let mut values = Vec::with_capacity(d);
        for (j, c) in cells[4..].iter().enumerate() {
            let v: f64 = c
                .parse()
                .map_err(|_| csv_err(lineno, format!("non-numeric cell f{j} `{c}`")))?;
            if !v.is_finite() {
                return Err(csv_err(lineno, format!("non-finite cell f{j}")));
            }
            values.push(v);
        }
        let x = FeatureVector(values);
        let same = demos
            .last()
            .is_some_and(|last| last.task_id == task && last.class_id == class);
        if !same {
            if let Some(last) = demos.last() {
                if (task, class) < (last.task_id, last.class_id) {
                    return Err(csv_err(
                        lineno,
                        "rows not sorted by (task_id, class_id)".into(),
                    ));
                }
            }
            demos.push(Demonstration {
                task_id: task,
                class_id: class,
                frames: Vec::new(),
            });
        }
        let demo = demos.last_mut().expect("pushed above");
        if frame_idx != demo.frames.len() + 1 {
            return Err(csv_err(
                lineno,
                format!(
                    "frame_idx {frame_idx} out of sequence, expected {}",
                    demo.frames.len() + 1
                ),
            ));
        }
        demo.frames.push(LabeledExample::new(x, class, label));
    }
    if demos.is_empty() {
        return Err(Error::EmptyStream);
    }
    Ok(demos)
}
