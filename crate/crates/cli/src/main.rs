//! `fedlpp`: run federated experiments, inspect payloads, summarise results.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedlpp::config::ExperimentConfig;
use fedlpp::eval::{
    communication_accounting, privacy_gap_report, read_metrics_csv, write_metrics_csv,
    PrivacyGapReport, SeedHistory, Traffic,
};
use fedlpp::protocol::{run_training, BitWidth, Broadcast, RoundEvent, RunOptions, RunOutcome};
use fedlpp::quantizer::format;
use fedlpp::lora::AdapterSet;
use fedlpp::{build_standard_set, dequantize, quantize};

use crate::output::{write_atomic, write_json, CliError};

#[derive(Debug, Parser)]
#[command(name = "fedlpp", version, about = "Federated LoRA with quantized proxy adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one seed and write metrics, a report and model snapshots.
    Run(RunArgs),
    /// Quantize a full-precision matrix file into the compact format.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=8))]
        bits: u8,
        #[arg(long, default_value_t = fedlpp::quantizer::DEFAULT_BLOCK_SIZE)]
        block: usize,
    },
    /// Reconstruct a full-precision matrix file from a quantized one.
    Dequantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine metrics.csv files from several seeds into one report.
    Report {
        /// metrics.csv files, one per seed.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "run")]
        label: String,
        /// Seed of each file, in order; defaults to 1, 2, ...
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Every bit width (1, 2, 3, off) for every configured seed.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    block: Option<usize>,
    /// Worker threads for client training.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// 1, 2, 3 or off.
    #[arg(long)]
    bits: Option<BitWidth>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(block) = common.block {
        config.quantizer.block_size = block;
    }
    config.validate()?;
    Ok(config)
}

fn options(common: &Common) -> RunOptions {
    RunOptions {
        threads: common.threads,
        record_payloads: false,
    }
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    seed: u64,
    bits: String,
    rounds: usize,
    best_global_round: usize,
    best_proxy_round: usize,
    privacy: &'a PrivacyGapReport,
    broadcast: TrafficReport,
    alignment: &'a [(usize, f64)],
    events: &'a [RoundEvent],
}

#[derive(Debug, Serialize)]
struct TrafficReport {
    bytes_per_round: u64,
    full_precision_bytes_per_round: u64,
    reduction: f64,
    total_bytes: u64,
}

fn traffic(outcome: &RunOutcome) -> Result<TrafficReport, CliError> {
    let per_round: Traffic = communication_accounting(&outcome.best_proxy.encode())?;
    Ok(TrafficReport {
        bytes_per_round: per_round.bytes,
        full_precision_bytes_per_round: per_round.full_precision_bytes,
        reduction: per_round.reduction(),
        total_bytes: outcome.history.iter().map(|m| m.broadcast_bytes).sum(),
    })
}

fn write_dense_snapshot(dir: &Path, adapters: &AdapterSet) -> Result<(), CliError> {
    for (layer, ad) in adapters.iter() {
        write_atomic(&dir.join(format!("layer{layer}-b.flpf")), &format::serialize_dense(ad.b()))?;
        write_atomic(&dir.join(format!("layer{layer}-a.flpf")), &format::serialize_dense(ad.a()))?;
    }
    Ok(())
}

fn write_broadcast_snapshot(dir: &Path, broadcast: &Broadcast) -> Result<(), CliError> {
    let ext = if broadcast.payloads().any(|p| matches!(p, fedlpp::protocol::Payload::Quantized(_))) {
        "flpq"
    } else {
        "flpf"
    };
    for (layer, slot) in broadcast.layers().iter().enumerate() {
        if let Some((b, a)) = slot {
            write_atomic(&dir.join(format!("layer{layer}-b.{ext}")), &b.encode())?;
            write_atomic(&dir.join(format!("layer{layer}-a.{ext}")), &a.encode())?;
        }
    }
    Ok(())
}

/// Trains one seed and writes everything under `out`.
fn run_one(config: &ExperimentConfig, seed: u64, out: &Path, opts: RunOptions) -> Result<RunOutcome, CliError> {
    let outcome = run_training(config, seed, opts)?;
    let mut csv = Vec::new();
    write_metrics_csv(&outcome.history, &mut csv)?;
    write_atomic(&out.join("metrics.csv"), &csv)?;
    write_atomic(&out.join("config.json"), config.to_json().as_bytes())?;

    let privacy = privacy_gap_report(
        &config.quantizer.bits.to_string(),
        &[SeedHistory {
            seed,
            history: outcome.history.clone(),
        }],
    )?;
    let report = RunReport {
        seed,
        bits: config.quantizer.bits.to_string(),
        rounds: outcome.history.len(),
        best_global_round: outcome.best_global_round,
        best_proxy_round: outcome.best_proxy_round,
        privacy: &privacy,
        broadcast: traffic(&outcome)?,
        alignment: &outcome.alignment,
        events: &outcome.events,
    };
    write_json(&out.join("report.json"), &report)?;

    let snapshots = out.join("snapshots");
    write_dense_snapshot(&snapshots.join("best-global"), &outcome.best_global)?;
    write_dense_snapshot(&snapshots.join("final-global"), &outcome.final_adapters)?;
    write_broadcast_snapshot(&snapshots.join("best-proxy"), &outcome.best_proxy)?;
    Ok(outcome)
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.common)?;
    if let Some(bits) = args.bits {
        config.quantizer.bits = bits;
        config.validate()?;
    }
    let seed = args.seed.unwrap_or(config.seeds[0]);
    let outcome = run_one(&config, seed, &args.common.out, options(&args.common))?;
    let last = outcome.history.last().expect("at least one round");
    println!(
        "seed {seed}, {} rounds: global val {:.6} (best {:.6} @ {}), proxy val {:.6} (best @ {})",
        outcome.history.len(),
        last.global_val_loss,
        outcome.history[outcome.best_global_round].global_val_loss,
        outcome.best_global_round,
        last.proxy_val_loss,
        outcome.best_proxy_round,
    );
    for e in &outcome.events {
        eprintln!("round {} client {:?}: {}", e.round, e.client, e.message);
    }
    Ok(())
}

fn cmd_quantize(input: &Path, out: &Path, bits: u8, block: usize) -> Result<(), CliError> {
    let bytes = fs::read(input).map_err(|e| CliError::io(input, e))?;
    let m = format::deserialize_dense(&bytes)?;
    let q = quantize(&m, &build_standard_set(bits)?, block)?;
    write_atomic(out, &format::serialize(&q))
}

fn cmd_dequantize(input: &Path, out: &Path) -> Result<(), CliError> {
    let bytes = fs::read(input).map_err(|e| CliError::io(input, e))?;
    let q = format::deserialize(&bytes)?;
    write_atomic(out, &format::serialize_dense(&dequantize(&q)))
}

fn read_history(path: &Path) -> Result<Vec<fedlpp::eval::RoundMetrics>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_metrics_csv(file)?)
}

fn cmd_report(metrics: &[PathBuf], out: &Path, label: &str, seeds: &[u64]) -> Result<(), CliError> {
    if !seeds.is_empty() && seeds.len() != metrics.len() {
        return Err(CliError::Usage(format!(
            "{} seeds given for {} metrics files",
            seeds.len(),
            metrics.len()
        )));
    }
    let runs = metrics
        .iter()
        .enumerate()
        .map(|(i, path)| {
            Ok(SeedHistory {
                seed: seeds.get(i).copied().unwrap_or(i as u64 + 1),
                history: read_history(path)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = privacy_gap_report(label, &runs)?;
    write_json(out, &report)?;
    println!(
        "{label}: median gap {:.6}, model privacy {} ({}/{} seeds)",
        report.median_gap.val_loss,
        report.model_privacy_achieved,
        report.seeds_with_privacy,
        runs.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    bits: String,
    report: PrivacyGapReport,
    /// Median best-global validation loss relative to the unquantized runs.
    retention: Option<f64>,
    bytes_per_round: u64,
    reduction: f64,
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let base = load_config(&args.common)?;
    let mut rows = Vec::new();
    for bits in [BitWidth::Bits(1), BitWidth::Bits(2), BitWidth::Bits(3), BitWidth::Off] {
        let mut config = base.clone();
        config.quantizer.bits = bits;
        let dir = args.common.out.join(format!("w{bits}"));
        let mut runs = Vec::new();
        let mut per_round = None;
        for &seed in &config.seeds {
            let outcome = run_one(&config, seed, &dir.join(format!("seed-{seed}")), options(&args.common))?;
            per_round.get_or_insert(traffic(&outcome)?);
            runs.push(SeedHistory {
                seed,
                history: outcome.history,
            });
        }
        let report = privacy_gap_report(&bits.to_string(), &runs)?;
        write_json(&dir.join("report.json"), &report)?;
        let t = per_round.expect("at least one seed");
        println!(
            "w={bits}: median best global {:.6}, proxy {:.6}, gap {:.6}, privacy {}/{}",
            report.median_global.val_loss,
            report.median_proxy.val_loss,
            report.median_gap.val_loss,
            report.seeds_with_privacy,
            runs.len()
        );
        rows.push(SweepRow {
            bits: bits.to_string(),
            report,
            retention: None,
            bytes_per_round: t.bytes_per_round,
            reduction: t.reduction,
        });
    }
    let reference = rows
        .iter()
        .find(|r| r.bits == BitWidth::Off.to_string())
        .map(|r| r.report.median_global.val_loss);
    for row in &mut rows {
        row.retention = reference.map(|off| row.report.median_global.val_loss / off);
    }
    write_json(&args.common.out.join("summary.json"), &rows)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Quantize {
            input,
            out,
            bits,
            block,
        } => cmd_quantize(&input, &out, bits, block),
        Command::Dequantize { input, out } => cmd_dequantize(&input, &out),
        Command::Report {
            metrics,
            out,
            label,
            seeds,
        } => cmd_report(&metrics, &out, &label, &seeds),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
