//! Run records and the files written for them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::PriorMode;
use crate::pacbayes::BoundReport;

pub const REPORT_VERSION: u32 = 1;

/// How a query decision is judged, recorded with every report.
pub const SUCCESS_PREDICATE: &str = "a decision made after the warm-up frames is correct iff \
     (queried) == (the argmax prediction before the decision differs from the true class, \
     or no trained head exists)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTaskMetrics {
    pub task: u32,
    pub class_id: u32,
    pub precision: f64,
    /// Calibration over this class's test frames.
    pub ece: f64,
    /// Head scores against one-vs-rest test labels; absent without a
    /// trained head or without negatives.
    pub auc: Option<f64>,
    pub queries: usize,
    /// Queries until the test precision of the class reached the target;
    /// `max_queries + 1` when it never did.
    pub queries_to_target: usize,
    pub query_success_rate: Option<f64>,
    pub train_seconds: f64,
    pub bounds: Vec<BoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetrics {
    pub task: u32,
    /// Mean of the per-class precisions.
    pub precision: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub auc: Option<f64>,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub task: u32,
    pub class_id: u32,
    /// Global index of the first frame.
    pub first_frame: u64,
    pub frames: usize,
    pub queries: usize,
    pub added_head: bool,
    pub queries_to_target: Option<usize>,
    /// Queries made before the filtered probability of the true class first
    /// won with at least the query threshold.
    pub queries_to_confident: Option<usize>,
    pub precision_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEvent {
    pub frame: u64,
    pub task: u32,
    pub class_id: u32,
    pub round: usize,
    pub added_head: bool,
    pub n_selected: usize,
    pub train_seconds: f64,
    pub bound: Option<BoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddHeadEvent {
    pub task: u32,
    pub class_id: u32,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub mean_precision: f64,
    pub mean_ece: f64,
    pub mean_auc: Option<f64>,
    pub total_queries: usize,
    pub mean_queries_to_target: f64,
    pub query_success_rate: Option<f64>,
    pub mean_train_seconds: f64,
    pub max_train_seconds: f64,
    pub wall_clock_seconds: f64,
    /// Heads whose checkpoint bytes changed across a task boundary without
    /// being updated during that task.
    pub forgetting_violations: usize,
    /// Grid points whose bound fell below their empirical risk.
    pub bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub version: u32,
    pub variant: PriorMode,
    pub seed: u64,
    pub success_predicate: String,
    pub aggregate: Aggregate,
    pub per_task: Vec<TaskMetrics>,
    pub per_class_task: Vec<ClassTaskMetrics>,
    pub episodes: Vec<EpisodeRecord>,
    pub queries: Vec<QueryEvent>,
    pub add_head_events: Vec<AddHeadEvent>,
    /// Seconds spent pretraining each initial head.
    pub pretrain_seconds: Vec<f64>,
}

impl MetricsReport {
    /// Copy with every wall-clock field zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.aggregate.mean_train_seconds = 0.0;
        r.aggregate.max_train_seconds = 0.0;
        r.aggregate.wall_clock_seconds = 0.0;
        r.pretrain_seconds.iter_mut().for_each(|s| *s = 0.0);
        r.per_class_task
            .iter_mut()
            .for_each(|m| m.train_seconds = 0.0);
        r.queries.iter_mut().for_each(|q| q.train_seconds = 0.0);
        r
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != REPORT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported report version {}",
                self.version
            )));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Schema(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("mean_precision", self.aggregate.mean_precision)?;
        unit("mean_ece", self.aggregate.mean_ece)?;
        for m in &self.per_class_task {
            unit("precision", m.precision)?;
            unit("ece", m.ece)?;
            if let Some(a) = m.auc {
                unit("auc", a)?;
            }
            if let Some(s) = m.query_success_rate {
                unit("query_success_rate", s)?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("metrics report: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::from(e).with_context(format!("reading {}", path.display())))?;
    MetricsReport::from_json(&text).map_err(|e| e.with_context(path.display().to_string()))
}

/// One row of the per-frame decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub k: u64,
    pub class_id: u32,
    pub raw_p: f64,
    pub filtered_p: f64,
    pub norm_entropy: f64,
    pub queried: bool,
}

pub fn decisions_csv(rows: &[DecisionRow]) -> String {
    let mut s = String::from("k,class_id,raw_p,filtered_p,norm_entropy,queried\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{:?},{}",
            r.k,
            r.class_id,
            r.raw_p,
            r.filtered_p,
            r.norm_entropy,
            u8::from(r.queried)
        );
    }
    s
}

/// Plot-ready per-task curves.
pub fn curves_csv(report: &MetricsReport) -> String {
    let mut s = String::from("task,precision,accuracy,ece,auc,queries\n");
    for t in &report.per_task {
        let auc = t.auc.map(|a| format!("{a:?}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{},{}",
            t.task, t.precision, t.accuracy, t.ece, auc, t.queries
        );
    }
    s
}

pub fn queries_csv(report: &MetricsReport) -> String {
    let mut s = String::from(
        "frame,task,class_id,round,added_head,n_selected,train_seconds,emp_risk,kl,bound,tau,alpha,beta\n",
    );
    for q in &report.queries {
        let b = q.bound.as_ref().map_or(",,,,,".to_string(), |b| {
            format!(
                "{:?},{:?},{:?},{:?},{:?},{:?}",
                b.emp_risk, b.kl, b.bound, b.tau, b.alpha, b.beta
            )
        });
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:?},{}",
            q.frame,
            q.task,
            q.class_id,
            q.round,
            u8::from(q.added_head),
            q.n_selected,
            q.train_seconds,
            b
        );
    }
    s
}

/// Writes `metrics.json`, `decisions.csv`, `curves.csv` and `queries.csv`.
pub fn write_report(
    report: &MetricsReport,
    decisions: &[DecisionRow],
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::from(e).with_context(format!("creating {}", out_dir.display())))?;
    fs::write(out_dir.join("metrics.json"), report.to_json()?)?;
    fs::write(out_dir.join("decisions.csv"), decisions_csv(decisions))?;
    fs::write(out_dir.join("curves.csv"), curves_csv(report))?;
    fs::write(out_dir.join("queries.csv"), queries_csv(report))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: PriorMode,
    pub runs: usize,
    pub query_success_rate: Summary,
    pub ece: Summary,
    pub precision: Summary,
    pub queries_to_target: Summary,
    pub total_queries: Summary,
}

/// Mean and standard deviation of the headline metrics per variant.
pub fn compare_reports(reports: &[MetricsReport]) -> Vec<ComparisonRow> {
    let mut groups: BTreeMap<u8, (PriorMode, Vec<&MetricsReport>)> = BTreeMap::new();
    for r in reports {
        let key = match r.variant {
            PriorMode::Vanilla => 0,
            PriorMode::MeanOnly => 1,
            PriorMode::Full => 2,
        };
        groups
            .entry(key)
            .or_insert((r.variant, Vec::new()))
            .1
            .push(r);
    }
    groups
        .into_values()
        .map(|(variant, rs)| {
            let col = |f: &dyn Fn(&MetricsReport) -> f64| {
                Summary::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            ComparisonRow {
                variant,
                runs: rs.len(),
                query_success_rate: col(&|r| r.aggregate.query_success_rate.unwrap_or(f64::NAN)),
                ece: col(&|r| r.aggregate.mean_ece),
                precision: col(&|r| r.aggregate.mean_precision),
                queries_to_target: col(&|r| r.aggregate.mean_queries_to_target),
                total_queries: col(&|r| r.aggregate.total_queries as f64),
            }
        })
        .collect()
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(
        "| variant | runs | query success | ECE | precision | queries to target | total queries |\n\
         |---|---|---|---|---|---|---|\n",
    );
    let f = |m: &Summary| format!("{:.3} ± {:.3}", m.mean, m.std);
    for r in rows {
        let name = match r.variant {
            PriorMode::Vanilla => "vanilla",
            PriorMode::MeanOnly => "mean_only",
            PriorMode::Full => "full",
        };
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | {} | {} | {} |",
            r.runs,
            f(&r.query_success_rate),
            f(&r.ece),
            f(&r.precision),
            f(&r.queries_to_target),
            f(&r.total_queries)
        );
    }
    s
}
