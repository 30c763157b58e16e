//! `alp`: ingest, synthesise, synchronise, localize and score.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "alp",
    version,
    about = "Aircraft localization from unsynchronised receiver networks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Mask seed; for `synth`, the generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Any setting as `key=value`; applied last. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a subset and report its statistics.
    Ingest(InputArgs),
    /// Generate a synthetic subset with truth and clock logs.
    Synth {
        /// Built-in scenario name.
        #[arg(long)]
        scenario: Option<String>,
        /// Scenario JSON file, instead of a built-in name.
        #[arg(long, conflicts_with = "scenario")]
        scenario_file: Option<PathBuf>,
        /// File name prefix inside the output directory.
        #[arg(long)]
        prefix: Option<String>,
    },
    /// Track pair offsets and write the per-epoch snapshot and answer key.
    Sync(InputArgs),
    /// Localize the target records against a sync snapshot.
    Locate {
        #[command(flatten)]
        input: InputArgs,
        /// Defaults to `sync_snapshot.csv` in the output directory.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Score predictions against the answer key.
    Evaluate {
        /// Defaults to `predictions.csv` in the output directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Defaults to `answer_key.csv` in the output directory.
        #[arg(long)]
        answer_key: Option<PathBuf>,
        #[arg(long)]
        penalty_m: Option<f64>,
        #[arg(long)]
        min_coverage: Option<f64>,
        /// `3d` or `2d`.
        #[arg(long)]
        metric: Option<String>,
    },
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Subset prefix: reads PREFIX.csv, PREFIX_sensors.csv, PREFIX_aircraft.csv.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Column-mapping file for releases with different headers.
    #[arg(long)]
    columns: Option<PathBuf>,
}

impl InputArgs {
    fn overrides(&self, out: &mut Vec<(String, String)>) {
        if let Some(p) = &self.input {
            out.push(("input".into(), p.display().to_string()));
        }
        if let Some(p) = &self.columns {
            out.push(("columns".into(), p.display().to_string()));
        }
    }
}

impl Cli {
    /// Flags as config pairs, so they share parsing and validation with the file.
    fn overrides(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut out = Vec::new();
        let synth = matches!(self.command, Command::Synth { .. });
        if let Some(s) = self.common.seed {
            out.push((
                if synth { "synth.seed" } else { "seed" }.into(),
                s.to_string(),
            ));
        }
        if let Some(w) = self.common.workers {
            out.push(("workers".into(), w.to_string()));
        }
        match &self.command {
            Command::Ingest(i) | Command::Sync(i) | Command::Locate { input: i, .. } => {
                i.overrides(&mut out)
            }
            Command::Synth {
                scenario,
                scenario_file,
                prefix,
            } => {
                if let Some(s) = scenario {
                    out.push(("synth.scenario".into(), s.clone()));
                }
                if let Some(f) = scenario_file {
                    out.push(("synth.scenario_file".into(), f.display().to_string()));
                }
                if let Some(p) = prefix {
                    out.push(("synth.prefix".into(), p.clone()));
                }
            }
            Command::Evaluate {
                penalty_m,
                min_coverage,
                metric,
                ..
            } => {
                if let Some(p) = penalty_m {
                    out.push(("eval.penalty_m".into(), p.to_string()));
                }
                if let Some(c) = min_coverage {
                    out.push(("eval.min_coverage".into(), c.to_string()));
                }
                if let Some(m) = metric {
                    out.push(("eval.metric".into(), m.clone()));
                }
            }
        }
        for kv in &self.common.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Failure::config(anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = cli.overrides()?;
    let cfg = config::RunConfig::resolve(cli.common.config.as_deref(), &overrides)
        .map_err(Failure::config)?;
    let ctx = commands::Context::new(cfg, cli.common.output_dir)?;
    match cli.command {
        Command::Ingest(_) => commands::ingest(&ctx),
        Command::Synth { .. } => commands::synth(&ctx),
        Command::Sync(_) => commands::sync(&ctx),
        Command::Locate { snapshot, .. } => commands::locate(&ctx, snapshot),
        Command::Evaluate {
            predictions,
            answer_key,
            ..
        } => commands::evaluate(&ctx, predictions, answer_key),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if let Some(e) = f.error() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(f.code())
        }
    }
}
