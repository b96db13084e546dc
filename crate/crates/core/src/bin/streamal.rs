//! Command-line front end: data generation, pretraining, runs, evaluation
//! and comparison tables.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when a run
//! aborts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use streamal_core::datagen::{generate_scenario, load_stream, save_stream, ScenarioConfig};
use streamal_core::harness::{
    compare_reports, evaluate_classifier, format_comparison, pretrain, read_report, run_stream,
    RunConfig, Source,
};
use streamal_core::heads::{MultiHeadClassifier, PriorMode};
use streamal_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "streamal",
    version,
    about = "Stream-based active learning with Bayesian heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Vanilla,
    MeanOnly,
    Full,
}

impl From<Variant> for PriorMode {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Vanilla => PriorMode::Vanilla,
            Variant::MeanOnly => PriorMode::MeanOnly,
            Variant::Full => PriorMode::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a stream CSV for a scenario.
    GenData {
        /// Scenario TOML: either a full scenario (with `classes`) or the
        /// knobs of the drifting-cluster generator. Defaults apply when
        /// omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the task-0 heads offline and save them as a checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Play a stream and write metrics, logs and checkpoints.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the positive frames of a stream CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 15)]
        bins: usize,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise several `metrics.json` files per variant.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Print JSON rows instead of a markdown table.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run_config(
    path: Option<&Path>,
    seed: Option<u64>,
    variant: Option<Variant>,
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Missing inputs are the caller's mistake, not a runtime failure.
fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            scenario,
            seed,
            out,
        } => {
            let text = match &scenario {
                Some(p) => fs::read_to_string(p).map_err(|e| {
                    Error::InvalidConfig(format!("cannot read scenario {}: {e}", p.display()))
                })?,
                None => String::new(),
            };
            let cfg = ScenarioConfig::from_toml_str(&text, seed)?;
            let demos = generate_scenario(&cfg)?;
            save_stream(&demos, &out)?;
            let frames: usize = demos.iter().map(|d| d.frames.len()).sum();
            eprintln!(
                "wrote {} demonstrations, {frames} frames to {}",
                demos.len(),
                out.display()
            );
        }
        Command::Pretrain {
            config,
            seed,
            variant,
            out,
        } => {
            let cfg = run_config(config.as_deref(), seed, variant)?;
            if !cfg.variant.is_bayesian() {
                return Err(Error::InvalidConfig(
                    "the vanilla variant has no pretraining".into(),
                ));
            }
            let source = Source::from_config(&cfg)?;
            let (clf, seconds) = pretrain(&cfg, &source)?;
            clf.save_checkpoint(&out)?;
            eprintln!(
                "pretrained {} heads in {:.1} s, checkpoint at {}",
                clf.class_ids().len(),
                seconds.iter().sum::<f64>(),
                out.display()
            );
        }
        Command::Run {
            config,
            seed,
            variant,
            out,
        } => {
            let cfg = run_config(config.as_deref(), seed, variant)?;
            let output = run_stream(&cfg, Some(&out))?;
            let a = &output.report.aggregate;
            println!(
                "precision {:.3}  ece {:.3}  queries {}  wall {:.1} s  -> {}",
                a.mean_precision,
                a.mean_ece,
                a.total_queries,
                a.wall_clock_seconds,
                out.join("metrics.json").display()
            );
        }
        Command::Eval {
            checkpoint,
            test,
            bins,
            out,
        } => {
            if bins == 0 {
                return Err(Error::InvalidConfig("bins must be at least 1".into()));
            }
            require(&checkpoint.join("manifest.json"))?;
            require(&test)?;
            let clf = MultiHeadClassifier::load_checkpoint(&checkpoint)?;
            let stream = load_stream(&test)?;
            let frames: Vec<_> = stream
                .into_iter()
                .flat_map(|d| {
                    let class = d.class_id;
                    d.frames
                        .into_iter()
                        .filter(|f| f.binary_label)
                        .map(move |f| (class, f.x))
                })
                .collect();
            let report = evaluate_classifier(&clf, &frames, bins)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Compare { reports, json } => {
            reports.iter().try_for_each(|p| require(p))?;
            let loaded = reports
                .iter()
                .map(|p| read_report(p))
                .collect::<Result<Vec<_>>>()?;
            let rows = compare_reports(&loaded);
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", format_comparison(&rows));
            }
        }
    }
    Ok(())
}
