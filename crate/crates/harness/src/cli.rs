//! Command-line interface of the `tsd` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tsd_core::checkpoint;
use tsd_core::distillation::{train, TrainConfig, Variant};
use tsd_core::metrics::DEFAULT_K_EVAL;
use tsd_core::scenario::{generate_scenario, read_jsonl, write_jsonl, GeneratorConfig};

use crate::experiment::{
    cell_csv, eval_masks, evaluate_model, run_experiment, Cell, ExperimentSpec,
};
use crate::report::report_from_dir;
use tsd_core::masking::MaskSpec;

#[derive(Debug, Parser)]
#[command(
    name = "tsd",
    version,
    about = "Trajectory forecasting with target-driven self-distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenarios as JSONL.
    Gen {
        /// Generator config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// First scenario id.
        #[arg(long, default_value_t = 0)]
        start_id: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write ckpt.bin, ckpt.json and loss.csv.
    Train {
        /// Training config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training scenarios (JSONL).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a grid of mask conditions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation scenarios (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Evaluation grid config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the evaluation mask seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all variants and seeds, then write the report.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild report.md and plots from a results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub random_rates: Vec<f64>,
    pub continuous_lengths: Vec<usize>,
    pub eval_seed: u64,
    pub k_eval: usize,
    pub eval_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let e = ExperimentSpec::default();
        Self {
            random_rates: e.random_rates,
            continuous_lengths: e.continuous_lengths,
            eval_seed: e.eval_seed,
            k_eval: DEFAULT_K_EVAL,
            eval_batch: e.eval_batch,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            config,
            count,
            start_id,
            seed,
            out,
        } => {
            let mut cfg: GeneratorConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let scenarios = (start_id..start_id + count as u64)
                .map(|id| generate_scenario(&cfg, id))
                .collect::<tsd_core::Result<Vec<_>>>()?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_jsonl(&out, &scenarios)?;
            eprintln!("wrote {} scenarios to {}", scenarios.len(), out.display());
        }
        Command::Train {
            config,
            data,
            variant,
            seed,
            out,
        } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            let dataset =
                read_jsonl(&data).with_context(|| format!("reading {}", data.display()))?;
            let trained = train(&dataset, &cfg)?;
            trained.save(&out)?;
            if let Some(last) = trained.curve.last() {
                eprintln!(
                    "{} steps, final total loss {:.4}; checkpoint in {}",
                    trained.curve.len(),
                    last.loss.total,
                    out.display()
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            config,
            seed,
            out,
        } => {
            let mut cfg: EvalConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.eval_seed = s;
            }
            let model = checkpoint::load(&ckpt)?;
            let variant = checkpoint::read_manifest(&ckpt)?
                .variant
                .unwrap_or(Variant::Tsd);
            let scenarios =
                read_jsonl(&data).with_context(|| format!("reading {}", data.display()))?;
            let dir = out.join("eval");
            fs::create_dir_all(&dir)?;
            let cells = cfg
                .random_rates
                .iter()
                .map(|&rate| Cell(MaskSpec::Random { rate }))
                .chain(
                    cfg.continuous_lengths
                        .iter()
                        .map(|&observed_len| Cell(MaskSpec::Continuous { observed_len })),
                );
            for cell in cells {
                let masks = eval_masks(&cell, &scenarios, cfg.eval_seed)?;
                let r = evaluate_model(
                    &model,
                    variant.uses_targets(),
                    &scenarios,
                    &masks,
                    cfg.k_eval,
                    cfg.eval_batch,
                )?;
                let csv = cell_csv(variant, &cell, Some(&r));
                checkpoint::write_atomic(
                    &dir.join(format!("{}.csv", cell.name())),
                    csv.as_bytes(),
                )?;
                println!(
                    "{:<16} minADE {:.3}  minFDE {:.3}  MR {:.3}",
                    cell.name(),
                    r.min_ade,
                    r.min_fde,
                    r.miss_rate
                );
            }
        }
        Command::Experiment { config, seed, out } => {
            let mut spec = ExperimentSpec::from_file(&config)?;
            if let Some(s) = seed {
                spec.seeds = vec![s];
            }
            if let Some(o) = out {
                spec.out_dir = o;
            }
            let outcome = run_experiment(&spec)?;
            print!("{}", outcome.report);
        }
        Command::Report { input } => {
            print!("{}", report_from_dir(&input)?);
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 2 on usage errors and 1 on any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
