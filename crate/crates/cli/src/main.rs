//! `dal`: generate synthetic video, train toy networks, check mode
//! equivalence and write sparsity reports.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dal_core::data::DatasetKind;
use dal_core::presets::Preset;
use serde::Serialize;

use crate::config::{load, GenDataConfig, ReportConfig, TrainCmdConfig, VerifyConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "dal", version, about = "Delta activation layer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<DatasetKind>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        noise_amplitude: Option<f64>,
    },
    /// Train a toy CNN preset on a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        base_lambda: Option<f64>,
        #[arg(long)]
        sparsity_ratio: Option<f64>,
        #[arg(long)]
        q_lr_scale: Option<f64>,
    },
    /// Compare normal, delta and hybrid execution of a model.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Scale every q of the compared sessions by this factor.
        #[arg(long)]
        perturb_delta_q: Option<f32>,
    },
    /// Per-layer, frame-rate and memory reports for a model on a dataset.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        divisors: Option<Vec<usize>>,
        #[arg(long)]
        state_bits: Option<u32>,
        #[arg(long)]
        weight_bits: Option<u32>,
        #[arg(long)]
        state_words: Option<u32>,
    },
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected frozen-cam or moving-cam".into())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected baseline, spatial, input-delta or temporal".into())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

#[derive(Serialize)]
struct Timing {
    command: &'static str,
    seconds: f64,
}

/// Wall-clock time goes to its own file so the primary outputs stay
/// byte-identical between reruns.
fn write_timing(out: &Path, command: &'static str, start: Instant) -> Result<(), CliError> {
    let path = out.join("timing.json");
    let text = serde_json::to_string_pretty(&Timing { command, seconds: start.elapsed().as_secs_f64() })
        .map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let start = Instant::now();
    match cli.command {
        Command::GenData { common, kind, height, width, frames, per_class, noise_amplitude } => {
            let mut c: GenDataConfig = load(common.config.as_deref())?;
            set(&mut c.seed, common.seed);
            set(&mut c.out, common.out);
            set(&mut c.kind, kind);
            set(&mut c.height, height);
            set(&mut c.width, width);
            set(&mut c.frames, frames);
            set(&mut c.per_class, per_class);
            set(&mut c.noise_amplitude, noise_amplitude);
            commands::gen_data(&c)?;
            write_timing(&c.out, "gen-data", start)
        }
        Command::Train {
            common,
            manifest,
            test_manifest,
            preset,
            epochs,
            lr,
            batch_size,
            base_lambda,
            sparsity_ratio,
            q_lr_scale,
        } => {
            let mut c: TrainCmdConfig = load(common.config.as_deref())?;
            set(&mut c.seed, common.seed);
            set(&mut c.out, common.out);
            set_opt(&mut c.manifest, manifest);
            set_opt(&mut c.test_manifest, test_manifest);
            set(&mut c.preset, preset);
            set(&mut c.epochs, epochs);
            set(&mut c.lr, lr);
            set(&mut c.batch_size, batch_size);
            set_opt(&mut c.base_lambda, base_lambda);
            set(&mut c.sparsity_ratio, sparsity_ratio);
            set(&mut c.q_lr_scale, q_lr_scale);
            commands::train_cmd(&c)?;
            write_timing(&c.out, "train", start)
        }
        Command::Verify { common, model, sequence, manifest, perturb_delta_q } => {
            let mut c: VerifyConfig = load(common.config.as_deref())?;
            set(&mut c.seed, common.seed);
            set(&mut c.out, common.out);
            set_opt(&mut c.model, model);
            set_opt(&mut c.sequence, sequence);
            set_opt(&mut c.manifest, manifest);
            set_opt(&mut c.perturb_delta_q, perturb_delta_q);
            let result = commands::verify(&c);
            if c.out.is_dir() {
                write_timing(&c.out, "verify", start)?;
            }
            result
        }
        Command::Report { common, model, manifest, divisors, state_bits, weight_bits, state_words } => {
            let mut c: ReportConfig = load(common.config.as_deref())?;
            set(&mut c.seed, common.seed);
            set(&mut c.out, common.out);
            set_opt(&mut c.model, model);
            set_opt(&mut c.manifest, manifest);
            set(&mut c.divisors, divisors);
            set(&mut c.state_bits, state_bits);
            set(&mut c.weight_bits, weight_bits);
            set(&mut c.state_words, state_words);
            commands::report(&c)?;
            write_timing(&c.out, "report", start)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
