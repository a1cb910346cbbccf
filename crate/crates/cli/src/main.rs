//! `cclk` — generate data, train, evaluate, inspect smoothing, verify math.
//!
//! Every command is deterministic given its config and inputs: output files
//! never depend on wall time or the environment (timing goes to stdout only).
//!
//! Exit codes: 0 success, 1 verification failure, 2 config/contract problem,
//! 3 numeric abort during training, 4 I/O failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cclk::config::RawConfig;
use cclk::data::{load_csv, save_csv};
use cclk::kernels::z_gram;
use cclk::model::EncoderParams;
use cclk::operator::inspect_smoothing;
use cclk::trainer::{evaluate, train, TrainConfig};
use cclk::verify::{run_all, Fault};
use cclk::{Error, Mat, Result};

#[derive(Parser)]
#[command(name = "cclk", version, about = "Conditional contrastive learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder; writes checkpoint.json, report.json, loss_curve.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Probe a saved checkpoint against a dataset and print the metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional config supplying train.split_seed / train.probe_ridge.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export normalized conditional weights next to the raw kernel matrix.
    Inspect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in property suite and report each result.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Io(_) => 4,
        // shape/contract/config/parse/singular/insufficient-samples are all
        // "the inputs are wrong" from the caller's point of view
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out)?,
        Cmd::Train { config, data, out_dir } => cmd_train(&config, &data, &out_dir)?,
        Cmd::Eval { checkpoint, data, config } => cmd_eval(&checkpoint, &data, config.as_deref())?,
        Cmd::Inspect { data, config, out } => cmd_inspect(&data, &config, &out)?,
        Cmd::Verify => return Ok(cmd_verify()),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let raw = RawConfig::load(config)?;
    let ds = raw.generate_dataset::<f64>()?;
    save_csv(&ds, out)?;
    let cols = ds.features.cols() + ds.z.cols() + 1;
    let seed = ds.meta.get("seed").map(String::as_str).unwrap_or("?");
    println!("rows={} cols={cols} seed={seed}", ds.len());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out_dir: &Path) -> Result<()> {
    let raw = RawConfig::load(config)?;
    let cfg: TrainConfig<f64> = raw.train_config()?;
    let ds = load_csv::<f64>(data)?;
    fs::create_dir_all(out_dir)?;

    let (params, report) = train(&ds, &cfg)?;

    params.save_checkpoint(&out_dir.join("checkpoint.json"))?;
    report.save_json(&out_dir.join("report.json"))?;
    report.save_loss_curve_csv(&out_dir.join("loss_curve.csv"))?;

    if let Some((_, loss)) = report.loss_curve.last() {
        println!("steps={} final_loss={loss}", report.loss_curve.len());
    }
    println!("probe_accuracy={}", report.probe_accuracy);
    println!("nuisance_mse={}", report.nuisance_mse);
    // stdout only, so output files stay byte-reproducible
    println!("wall_time_secs={:.3}", report.wall_time_secs);
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, config: Option<&Path>) -> Result<()> {
    let params = EncoderParams::<f64>::load_checkpoint(checkpoint)?;
    let ds = load_csv::<f64>(data)?;
    if params.input_dim() != ds.features.cols() {
        return Err(Error::contract(format!(
            "checkpoint expects {} input columns but the dataset has {}",
            params.input_dim(),
            ds.features.cols()
        )));
    }
    let cfg: TrainConfig<f64> = match config {
        Some(path) => RawConfig::load(path)?.train_config()?,
        None => TrainConfig::default(),
    };
    let (acc, mse) = evaluate(&params, &ds, cfg.probe_ridge, cfg.split_seed)?;
    println!("probe_accuracy={acc}");
    println!("nuisance_mse={mse}");
    Ok(())
}

fn cmd_inspect(data: &Path, config: &Path, out: &Path) -> Result<()> {
    let raw = RawConfig::load(config)?;
    let cfg: TrainConfig<f64> = raw.train_config()?;
    let ds = load_csv::<f64>(data)?;
    let b = cfg.batch_size;
    if ds.len() < b {
        return Err(Error::contract(format!(
            "inspect needs the first {b} rows (train.batch_size) but the dataset has {}",
            ds.len()
        )));
    }
    let mut z = Mat::zeros(b, ds.z.cols());
    for i in 0..b {
        for j in 0..ds.z.cols() {
            z[(i, j)] = ds.z[(i, j)];
        }
    }
    let kz = z_gram(&z, &raw.kernel_spec()?)?;
    let (w_norm, kz_norm) = inspect_smoothing(&kz, &raw.operator_config()?)?;

    fs::create_dir_all(out)?;
    write_matrix_csv(&out.join("w_normalized.csv"), &w_norm)?;
    write_matrix_csv(&out.join("kz_normalized.csv"), &kz_norm)?;
    println!("rows={b} lambda={}", raw.operator_config::<f64>()?.lambda_echo());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_verify() -> ExitCode {
    let results = run_all(Fault::None);
    let mut failed = 0usize;
    for r in &results {
        let tag = if r.passed { "[PASS]" } else { "[FAIL]" };
        println!("{tag} {}: {}", r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} properties, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

/// Headerless numeric CSV; `{}` prints the shortest exact representation.
fn write_matrix_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
