//! `hift`: train, compare and estimate from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when
//! training diverges, 1 for anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hift_core::estimate::to_gb;
use hift_core::{
    build_model, compare_runs, emit_metrics, estimate_fpft, estimate_hift, group_count, train, trainable_peak_fraction,
    Arch, Error, Footprint, Mode, OptimizerKind, Precision, RunReport, TrainConfig,
};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "hift", version, about = "Hierarchical block-wise fine-tuning runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write report.json, steps.csv and memory.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, env = "HIFT_OUT_DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Compare two report.json files and write their loss curves.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Where to write the aligned loss curves.
        #[arg(long, default_value = "loss_curves.csv")]
        curves: PathBuf,
    },
    /// Closed-form memory estimate as JSON.
    Estimate {
        /// Arch TOML, or a flat `param_bytes` / `units` description.
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, default_value = "adamw")]
        optimizer: OptimizerKind,
        /// Units per group.
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value = "fp32")]
        precision: Precision,
    },
}

/// Model description accepted by `estimate`.
#[derive(Deserialize)]
#[serde(untagged)]
enum ArchSpec {
    Arch(Arch),
    Flat { param_bytes: u64, units: usize },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, out } => run_train(&config, &out),
        Command::Compare { a, b, curves } => run_compare(&a, &b, &curves),
        Command::Estimate {
            arch,
            optimizer,
            m,
            precision,
        } => run_estimate(&arch, optimizer, m, precision),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Diverged { .. }) => 3,
        Some(
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Vocabulary(_)
            | Error::Lookup { .. }
            | Error::Comparison(_)
            | Error::Io { .. },
        ) => 2,
        _ => 1,
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn run_train(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = TrainConfig::from_toml(&read(config)?)?;
    let report = train(&cfg)?;
    emit_metrics(&report, out)?;
    let json = out.join("report.json");
    fs::write(&json, report.to_json()?).map_err(|source| Error::Io {
        path: json.clone(),
        source,
    })?;
    let m = &report.metrics;
    let mode = match report.mode {
        Mode::Hift => "hift",
        Mode::Fpft => "fpft",
    };
    let name = report.name.as_deref().unwrap_or(&report.task);
    println!("{name} ({mode}, k={}): {} steps", report.k, report.steps.len());
    println!(
        "loss {:.6} -> {:.6}, eval loss {:.6}",
        m.initial_loss, m.final_train_loss, m.eval_loss
    );
    if let Some(acc) = m.eval_accuracy {
        println!("eval accuracy {acc:.4}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_compare(a: &Path, b: &Path, curves: &Path) -> anyhow::Result<()> {
    let load = |p: &Path| -> anyhow::Result<RunReport> {
        RunReport::from_json(&read(p)?).with_context(|| format!("reading {}", p.display()))
    };
    let cmp = compare_runs(&load(a)?, &load(b)?)?;
    print!("{}", cmp.render());
    let file = fs::File::create(curves).map_err(|source| Error::Io {
        path: curves.to_path_buf(),
        source,
    })?;
    cmp.write_loss_curves(std::io::BufWriter::new(file))?;
    println!("wrote {}", curves.display());
    Ok(())
}

fn run_estimate(path: &Path, kind: OptimizerKind, m: usize, precision: Precision) -> anyhow::Result<()> {
    let spec: ArchSpec = toml::from_str(&read(path)?).map_err(|e| Error::Config(e.to_string()))?;
    let (fp, peak_fraction) = match &spec {
        ArchSpec::Arch(arch) => {
            let model = build_model(arch, 0)?;
            (
                Footprint::from_arch(arch, m)?,
                Some(trainable_peak_fraction(&model, m)?),
            )
        }
        ArchSpec::Flat { param_bytes, units } => {
            if m == 0 || m > *units {
                return Err(Error::Config(format!("m={m} outside 1..={units}")).into());
            }
            (
                Footprint::from_fp32_bytes(u128::from(*param_bytes), group_count(*units, m))?,
                None,
            )
        }
    };
    let fpft = estimate_fpft(&fp, kind, precision);
    let hift = estimate_hift(&fp, kind, precision);
    let out = json!({
        "optimizer": kind.to_string(),
        "precision": precision,
        "m": m,
        "k": hift.k,
        "param_gb": to_gb(fpft.param_bytes),
        "grad_gb": to_gb(fpft.grad_bytes),
        "state_gb": to_gb(fpft.state_bytes),
        "master_gb": to_gb(fpft.master_bytes),
        "fpft_gb": to_gb(fpft.fpft_bytes),
        "hift_average_gb": hift.hift_average_bytes.map(to_gb),
        "hift_peak_gb": hift.hift_peak_bytes.map(to_gb),
        "saved_gb": hift.saved_bytes.map(to_gb),
        "fpft_bytes": fpft.fpft_bytes.to_string(),
        "hift_average_bytes": hift.hift_average_bytes.map(|b| b.to_string()),
        "saved_bytes": hift.saved_bytes.map(|b| b.to_string()),
        "trainable_peak_fraction": peak_fraction,
        "notes": hift.notes,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
