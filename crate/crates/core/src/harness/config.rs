//! Run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::{AcquisitionConfig, QueryRule};
use crate::datagen::DriftScenarioParams;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, PriorMode};
use crate::laplace::DEFAULT_PREDICTIVE_SAMPLES;
use crate::metrics::DEFAULT_ECE_BINS;
use crate::mlp::{Activation, MlpArch, TrainConfig};
use crate::pacbayes::BoundConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            activation: Activation::Relu,
        }
    }
}

impl ArchConfig {
    pub fn build(&self, dim: usize) -> Result<MlpArch> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(dim);
        sizes.extend(&self.hidden);
        sizes.push(1);
        MlpArch::new(sizes, self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub rule: QueryRule,
    /// When every filtered probability is below this value the object is
    /// treated as unknown.
    pub unknown_threshold: f64,
    /// Frames filtered after an episode start or a model update before the
    /// next decision.
    pub warmup_frames: usize,
    pub max_queries_per_episode: usize,
    /// Prior probability `p(y = 1)` of the filter.
    pub class_prior: f64,
    /// Test precision that counts as learned for the queries-to-target
    /// metric.
    pub target_precision: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            rule: QueryRule::Confidence(0.85),
            unknown_threshold: 0.5,
            warmup_frames: 3,
            max_queries_per_episode: 3,
            class_prior: 0.5,
            target_precision: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Object frames returned per query.
    pub pool_size: usize,
    /// Object-free frames returned per query.
    pub background_size: usize,
    /// Held-out test frames per class and task.
    pub test_per_class: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            pool_size: 80,
            background_size: 80,
            test_per_class: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Positive (and as many negative) synthetic examples per class.
    pub per_class: usize,
    /// Also pretrain an object-versus-background head whose weights centre
    /// the prior of heads added during the stream.
    pub objectness: bool,
    /// Length of the shift between the synthetic and the real domain.
    pub sim_gap: f64,
    /// Load task-0 heads from this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            per_class: 1000,
            objectness: true,
            sim_gap: 0.5,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the scenario (overriding `scenario.seed`) and the learner.
    pub seed: u64,
    pub variant: PriorMode,
    /// Recorded stream CSV; the synthetic scenario is used when absent.
    pub stream_path: Option<PathBuf>,
    pub gamma: f64,
    pub predictive_samples: usize,
    pub ece_bins: usize,
    /// Save a classifier checkpoint after every task.
    pub write_checkpoints: bool,
    pub scenario: DriftScenarioParams,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub bound: BoundConfig,
    pub acquisition: AcquisitionConfig,
    pub query: QueryConfig,
    pub oracle: OracleConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: PriorMode::Full,
            stream_path: None,
            gamma: 0.005,
            predictive_samples: DEFAULT_PREDICTIVE_SAMPLES,
            ece_bins: DEFAULT_ECE_BINS,
            write_checkpoints: true,
            scenario: DriftScenarioParams::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            bound: BoundConfig::default(),
            acquisition: AcquisitionConfig::default(),
            query: QueryConfig::default(),
            oracle: OracleConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("run config: {e}")))
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            mode: self.variant,
            gamma: self.gamma,
            train: self.train.clone(),
            bound: self.bound.clone(),
            predictive_samples: self.predictive_samples,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.head_config().validate()?;
        if self.ece_bins == 0 {
            return bad("ece_bins must be at least 1".into());
        }
        if self.arch.hidden.is_empty() || self.arch.hidden.contains(&0) {
            return bad("arch.hidden needs at least one positive width".into());
        }
        let q = &self.query;
        for (name, v) in [
            ("query.unknown_threshold", q.unknown_threshold),
            ("query.class_prior", q.class_prior),
            ("query.target_precision", q.target_precision),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if q.class_prior <= 0.0 || q.class_prior >= 1.0 {
            return bad("query.class_prior must lie strictly inside (0, 1)".into());
        }
        if q.max_queries_per_episode == 0 {
            return bad("query.max_queries_per_episode must be at least 1".into());
        }
        let o = &self.oracle;
        if o.pool_size == 0 || o.test_per_class == 0 {
            return bad("oracle pool and test sizes must be positive".into());
        }
        self.acquisition.validate(o.pool_size)?;
        if self.stream_path.is_none() {
            if self.scenario.dim == 0 || self.scenario.n_classes == 0 || self.scenario.n_tasks == 0
            {
                return bad("scenario needs positive dim, n_classes and n_tasks".into());
            }
            if self.scenario.frames_per_demo < 2 {
                return bad("scenario.frames_per_demo must be at least 2".into());
            }
        }
        if self.variant.is_bayesian()
            && self.pretrain.checkpoint.is_none()
            && self.pretrain.per_class == 0
        {
            return bad("pretrain.per_class must be positive".into());
        }

        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = RunConfig::from_toml_str(
            "seed = 3\nvariant = \"mean_only\"\n[query]\nmax_queries_per_episode = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.variant, PriorMode::MeanOnly);
        assert_eq!(cfg.query.max_queries_per_episode, 5);
        assert_eq!(cfg.oracle, OracleConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = RunConfig::from_toml_str("gamma = -1.0").unwrap_err();
        assert!(e.is_config_error());
        let e = RunConfig::from_toml_str("no_such_key = 1").unwrap_err();
        assert!(e.is_config_error());
        let e = RunConfig::from_toml_str("[acquisition]\nbatch_size = 500").unwrap_err();
        assert!(e.is_config_error());
    }
}
