//! Command-line experiment runner: `run`, `sweep`, and `calibrate`
//! subcommands with line-delimited JSON run logs. Exit codes: 0 success,
//! 2 configuration error, 3 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::calibration::{client_stats, server_solve, CalibStats};
use crate::config::RunConfig;
use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::fed;
use crate::metrics::accuracy;
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};

#[derive(Parser, Debug)]
#[command(name = "hyperfed", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (accepted for compatibility; execution is
    /// sequential and deterministic regardless).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one federated experiment from a TOML config.
    Run { config: PathBuf },
    /// Run a cross-product of config variations and tabulate results.
    Sweep {
        config: PathBuf,
        /// Axis as key=v1,v2,... (keys: alpha, seed, strategy, head, loss, lr).
        /// Repeat for a cross-product.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Re-fit a checkpoint's classifier in closed form on federated stats.
    Calibrate {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

pub fn cli_main() -> i32 {
    main_with_args(std::env::args())
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 2;
    }
    let result = match &cli.cmd {
        Cmd::Run { config } => cmd_run(config, cli.seed, cli.out_dir.as_deref()),
        Cmd::Sweep { config, axes } => cmd_sweep(config, axes, cli.seed, cli.out_dir.as_deref()),
        Cmd::Calibrate {
            checkpoint,
            config,
            lambda,
        } => cmd_calibrate(checkpoint, config, *lambda, cli.seed, cli.out_dir.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src: &dyn std::error::Error = &e;
            while let Some(inner) = src.source() {
                eprintln!("  caused by: {inner}");
                src = inner;
            }
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn load_with_overrides(
    config: &Path,
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config).map_err(|e| match e {
        // A missing or unreadable config file is a configuration error.
        Error::Io { path, source } => Error::Config(format!("cannot read {path}: {source}")),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d.to_path_buf();
    }
    Ok(cfg)
}

struct LogWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: String,
}

impl LogWriter {
    fn create(path: &Path) -> Result<LogWriter> {
        Ok(LogWriter {
            file: std::io::BufWriter::new(
                std::fs::File::create(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
            ),
            path: path.display().to_string(),
        })
    }

    fn record(&mut self, kind: &str, mut payload: serde_json::Value) -> Result<()> {
        payload["record"] = json!(kind);
        writeln!(self.file, "{payload}")
            .map_err(|e| Error::io(self.path.clone(), e))
    }

    fn finish(mut self) -> Result<()> {
        self.file
            .flush()
            .map_err(|e| Error::io(self.path.clone(), e))
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(format!("log serialization: {e}")))
}

/// Everything a comparison table needs from one finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub strategy: String,
    pub alpha: String,
    pub seed: u64,
    pub accuracy: f64,
    pub calibrated_accuracy: Option<f64>,
    pub final_cosine: Option<f64>,
    pub final_norm_diff: Option<f64>,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub client_flops: u64,
    pub server_flops: u64,
}

impl RunSummary {
    /// Accuracy a comparison should rank by: calibrated when available.
    pub fn headline_accuracy(&self) -> f64 {
        self.calibrated_accuracy.unwrap_or(self.accuracy)
    }
}

fn alpha_label(cfg: &RunConfig) -> String {
    match cfg.partition.alpha {
        crate::config::AlphaSpec::Named(_) => "iid".into(),
        crate::config::AlphaSpec::Value(a) => format!("{a}"),
    }
}

fn strategy_label(cfg: &RunConfig) -> String {
    let head = match cfg.model.head {
        crate::config::HeadConfig::Trainable => "trainable",
        crate::config::HeadConfig::FixedRandom => "fixed-random",
        crate::config::HeadConfig::FixedOrthonormal => "fixed-orthonormal",
        crate::config::HeadConfig::FixedTammes => "fixed-tammes",
    };
    let name = match cfg.strategy.name {
        crate::config::StrategyName::FedAvg => "fedavg",
        crate::config::StrategyName::FedProx => "fedprox",
        crate::config::StrategyName::FedNova => "fednova",
        crate::config::StrategyName::FedOpt => "fedopt",
    };
    format!("{name}/{head}")
}

/// Execute one configured run, writing the log and artifacts into
/// `out_dir` when `with_artifacts` is set.
pub fn execute_run(cfg: &RunConfig, with_artifacts: bool) -> Result<RunSummary> {
    let warnings = cfg.validate()?;
    let (train, eval) = cfg.build_datasets()?;
    let partition = cfg.build_partition(&train)?;
    let model = cfg.build_model(train.dim(), train.num_classes)?;
    let fed_cfg = cfg.to_fed_config();
    let mut log = if with_artifacts {
        std::fs::create_dir_all(&cfg.out_dir)
            .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
        let mut log = LogWriter::create(&cfg.out_dir.join("run.log.jsonl"))?;
        log.record("config", to_json(cfg)?)?;
        for w in &warnings {
            log.record("warning", json!({ "message": w }))?;
        }
        Some(log)
    } else {
        None
    };
    let outcome = fed::run(&fed_cfg, &model, &train, &partition, &eval)?;
    if let Some(log) = log.as_mut() {
        for report in &outcome.reports {
            log.record("round", to_json(report)?)?;
        }
    }
    let calibrated_accuracy = outcome.calibrated.as_ref().map(|(_, acc)| *acc);
    if let Some(log) = log.as_mut() {
        if let Some((cal, acc)) = &outcome.calibrated {
            log.record(
                "calibration",
                json!({
                    "round": "final",
                    "lambda": cal.lambda,
                    "regularized": cal.regularized,
                    "accuracy": acc,
                }),
            )?;
        }
        // Optional lambda grid: report-only, on the final extractor.
        if !cfg.calibration.lambda_grid.is_empty() {
            let stats = all_client_stats(&outcome.model, &train, &partition)?;
            for &lam in &cfg.calibration.lambda_grid {
                let cal = server_solve(&stats, lam)?;
                let head = cal.clone().into_head(outcome.model.head.temperature);
                let acc = accuracy(&outcome.model.extractor, &head, &eval)?;
                log.record(
                    "calibration",
                    json!({
                        "round": "grid",
                        "lambda": lam,
                        "regularized": cal.regularized,
                        "accuracy": acc,
                    }),
                )?;
            }
        }
    }
    let last_alignment = outcome
        .reports
        .iter()
        .rev()
        .find_map(|r| r.alignment.as_ref());
    let summary = RunSummary {
        strategy: strategy_label(cfg),
        alpha: alpha_label(cfg),
        seed: cfg.seed,
        accuracy: outcome.final_accuracy,
        calibrated_accuracy,
        final_cosine: last_alignment.map(|a| a.mean_cosine),
        final_norm_diff: last_alignment.map(|a| a.mean_norm_diff),
        upload_bytes: outcome.ledger.upload_bytes,
        download_bytes: outcome.ledger.download_bytes,
        client_flops: outcome.ledger.client_flops,
        server_flops: outcome.ledger.server_flops,
    };
    if let Some(mut log) = log {
        log.record(
            "final",
            json!({
                "accuracy": summary.accuracy,
                "calibrated_accuracy": summary.calibrated_accuracy,
                "final_cosine": summary.final_cosine,
                "final_norm_diff": summary.final_norm_diff,
                "ledger": to_json(&outcome.ledger)?,
            }),
        )?;
        log.finish()?;
        save_checkpoint(&outcome.model, &cfg.out_dir.join("final.ckpt"))?;
        if let Some((cal, _)) = &outcome.calibrated {
            let mut calibrated = outcome.model.clone();
            calibrated.head = cal.clone().into_head(outcome.model.head.temperature);
            save_checkpoint(&calibrated, &cfg.out_dir.join("calibrated.ckpt"))?;
        }
        if cfg.output.features {
            let mut client_of = vec![0usize; train.len()];
            for (k, idx) in partition.assignments.iter().enumerate() {
                for &i in idx {
                    client_of[i] = k;
                }
            }
            let (name, binary) = if cfg.output.features_binary {
                ("features.bin", true)
            } else {
                ("features.txt", false)
            };
            crate::metrics::dump_features(
                &outcome.model.extractor,
                &train,
                &client_of,
                partition.assignments.len(),
                &cfg.out_dir.join(name),
                binary,
            )?;
        }
        write_summary(&cfg.out_dir.join("summary.tsv"), &[Ok(summary.clone())], None)?;
    }
    Ok(summary)
}

fn all_client_stats(
    model: &ModelParams,
    train: &Dataset,
    partition: &Partition,
) -> Result<Vec<CalibStats>> {
    partition
        .assignments
        .iter()
        .map(|idx| client_stats(&model.extractor, train, idx))
        .collect()
}

const SUMMARY_HEADER: &str = "strategy\talpha\tseed\taccuracy\tcalibrated_accuracy\tfinal_cosine\tfinal_norm_diff\tupload_bytes\tdownload_bytes\tclient_flops\tserver_flops\tdelta_vs_base";

fn write_summary(
    path: &Path,
    rows: &[Result<RunSummary>],
    base: Option<f64>,
) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(f, "{SUMMARY_HEADER}").map_err(io_err)?;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for row in rows {
        match row {
            Ok(s) => {
                let delta = match base {
                    Some(b) => {
                        let d = s.headline_accuracy() - b;
                        let arrow = if d >= 0.0 { "↑" } else { "↓" };
                        format!("{arrow}{:.6}", d.abs())
                    }
                    None => "-".into(),
                };
                writeln!(
                    f,
                    "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    s.strategy,
                    s.alpha,
                    s.seed,
                    s.accuracy,
                    opt(s.calibrated_accuracy),
                    opt(s.final_cosine),
                    opt(s.final_norm_diff),
                    s.upload_bytes,
                    s.download_bytes,
                    s.client_flops,
                    s.server_flops,
                    delta,
                )
                .map_err(io_err)?;
            }
            Err(e) => {
                writeln!(f, "failed\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-\t{e}").map_err(io_err)?;
            }
        }
    }
    f.flush().map_err(io_err)
}

fn cmd_run(config: &Path, seed: Option<u64>, out_dir: Option<&Path>) -> Result<()> {
    let cfg = load_with_overrides(config, seed, out_dir)?;
    let summary = execute_run(&cfg, true)?;
    println!(
        "{} alpha={} seed={} accuracy={:.4}{}",
        summary.strategy,
        summary.alpha,
        summary.seed,
        summary.accuracy,
        summary
            .calibrated_accuracy
            .map_or(String::new(), |a| format!(" calibrated={a:.4}")),
    );
    Ok(())
}

#[derive(Clone, Debug)]
struct Axis {
    key: String,
    values: Vec<String>,
}

fn parse_axes(specs: &[String]) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for spec in specs {
        let (key, values) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("axis '{spec}' must look like key=v1,v2,..."))
        })?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("axis '{key}' has no values")));
        }
        let key = key.trim();
        if !matches!(key, "alpha" | "seed" | "strategy" | "head" | "loss" | "lr") {
            return Err(Error::Config(format!(
                "unknown sweep axis '{key}' (known: alpha, seed, strategy, head, loss, lr)"
            )));
        }
        axes.push(Axis {
            key: key.trim().to_string(),
            values,
        });
    }
    Ok(axes)
}

fn apply_axis(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("axis {key}: invalid value '{value}' ({what})"));
    match key {
        "alpha" => {
            cfg.partition.alpha = if value == "iid" {
                crate::config::AlphaSpec::Named(crate::config::IidTag::Iid)
            } else {
                crate::config::AlphaSpec::Value(
                    value.parse().map_err(|_| bad("expected a float or 'iid'"))?,
                )
            };
        }
        "seed" => cfg.seed = value.parse().map_err(|_| bad("expected an integer"))?,
        "strategy" => {
            cfg.strategy.name = match value {
                "fedavg" => crate::config::StrategyName::FedAvg,
                "fedprox" => crate::config::StrategyName::FedProx,
                "fednova" => crate::config::StrategyName::FedNova,
                "fedopt" => crate::config::StrategyName::FedOpt,
                _ => return Err(bad("expected fedavg|fedprox|fednova|fedopt")),
            };
        }
        "head" => {
            cfg.model.head = match value {
                "trainable" => crate::config::HeadConfig::Trainable,
                "fixed-random" => crate::config::HeadConfig::FixedRandom,
                "fixed-orthonormal" => crate::config::HeadConfig::FixedOrthonormal,
                "fixed-tammes" => crate::config::HeadConfig::FixedTammes,
                _ => {
                    return Err(bad(
                        "expected trainable|fixed-random|fixed-orthonormal|fixed-tammes",
                    ))
                }
            };
        }
        "loss" => {
            cfg.training.loss = match value {
                "mse" => crate::model::LossKind::Mse,
                "ce" => crate::model::LossKind::Ce,
                _ => return Err(bad("expected mse|ce")),
            };
        }
        "lr" => cfg.training.lr = value.parse().map_err(|_| bad("expected a float"))?,
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep axis '{key}' (known: alpha, seed, strategy, head, loss, lr)"
            )))
        }
    }
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    axis_specs: &[String],
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let base_cfg = load_with_overrides(config, seed, out_dir)?;
    let axes = parse_axes(axis_specs)?;
    std::fs::create_dir_all(&base_cfg.out_dir)
        .map_err(|e| Error::io(base_cfg.out_dir.display().to_string(), e))?;
    // Cross-product of axis values, first axis outermost.
    let mut cells: Vec<Vec<(String, String)>> = vec![vec![]];
    for axis in &axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                c.push((axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    let mut rows: Vec<Result<RunSummary>> = Vec::with_capacity(cells.len());
    for cell in &cells {
        let run_one = || -> Result<RunSummary> {
            let mut cfg = base_cfg.clone();
            for (k, v) in cell {
                apply_axis(&mut cfg, k, v)?;
            }
            execute_run(&cfg, false)
        };
        match run_one() {
            Ok(s) => rows.push(Ok(s)),
            Err(e) => {
                // A failed cell is recorded; the sweep continues.
                eprintln!("cell {cell:?} failed: {e}");
                rows.push(Err(e));
            }
        }
    }
    let base_acc = rows
        .iter()
        .find_map(|r| r.as_ref().ok())
        .map(|s| s.headline_accuracy());
    let path = base_cfg.out_dir.join("sweep.tsv");
    write_summary(&path, &rows, base_acc)?;
    // Seed axes additionally get a mean +/- std per non-seed group.
    if axes.iter().any(|a| a.key == "seed") {
        let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
        for (cell, row) in cells.iter().zip(&rows) {
            if let Ok(s) = row {
                let key: Vec<String> = cell
                    .iter()
                    .filter(|(k, _)| k != "seed")
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                let key = if key.is_empty() {
                    "all".to_string()
                } else {
                    key.join(" ")
                };
                match groups.iter_mut().find(|(g, _)| *g == key) {
                    Some((_, accs)) => accs.push(s.headline_accuracy()),
                    None => groups.push((key, vec![s.headline_accuracy()])),
                }
            }
        }
        let agg_path = base_cfg.out_dir.join("sweep_aggregate.tsv");
        let io_err = |e| Error::io(agg_path.display().to_string(), e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&agg_path).map_err(io_err)?);
        writeln!(f, "group\truns\tmean_accuracy\tstd_accuracy").map_err(io_err)?;
        for (key, accs) in &groups {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            writeln!(f, "{key}\t{}\t{mean:.6}\t{:.6}", accs.len(), var.sqrt()).map_err(io_err)?;
        }
        f.flush().map_err(io_err)?;
    }
    println!("sweep complete: {} cells -> {}", rows.len(), path.display());
    Ok(())
}

fn cmd_calibrate(
    checkpoint: &Path,
    config: &Path,
    lambda: Option<f64>,
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let cfg = load_with_overrides(config, seed, out_dir)?;
    let model = load_checkpoint(checkpoint)?;
    let (train, eval) = cfg.build_datasets()?;
    if model.extractor.input_dim() != train.dim() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects input dim {}, dataset has {}",
            model.extractor.input_dim(),
            train.dim()
        )));
    }
    if model.head.num_classes() != train.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes, dataset has {}",
            model.head.num_classes(),
            train.num_classes
        )));
    }
    let partition = cfg.build_partition(&train)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let mut log = LogWriter::create(&cfg.out_dir.join("calibrate.log.jsonl"))?;
    log.record(
        "config",
        json!({
            "checkpoint": checkpoint.display().to_string(),
            "lambda": lambda,
            "config": to_json(&cfg)?,
        }),
    )?;
    let before = accuracy(&model.extractor, &model.head, &eval)?;
    let stats = all_client_stats(&model, &train, &partition)?;
    let primary_lambda = lambda.unwrap_or(cfg.calibration.lambda);
    let lambdas: Vec<f64> = if lambda.is_none() && !cfg.calibration.lambda_grid.is_empty() {
        cfg.calibration.lambda_grid.clone()
    } else {
        vec![primary_lambda]
    };
    let mut primary: Option<ModelParams> = None;
    for &lam in &lambdas {
        let cal = server_solve(&stats, lam)?;
        let head = cal.clone().into_head(model.head.temperature);
        let after = accuracy(&model.extractor, &head, &eval)?;
        log.record(
            "calibration",
            json!({
                "lambda": lam,
                "regularized": cal.regularized,
                "accuracy_before": before,
                "accuracy_after": after,
            }),
        )?;
        println!("lambda={lam} accuracy {before:.4} -> {after:.4}");
        if lam == primary_lambda || primary.is_none() {
            let mut m = model.clone();
            m.head = head;
            primary = Some(m);
        }
    }
    let calibrated = primary.expect("at least one lambda runs");
    let ckpt_path = cfg.out_dir.join("calibrated.ckpt");
    save_checkpoint(&calibrated, &ckpt_path)?;
    let final_acc = accuracy(&calibrated.extractor, &calibrated.head, &eval)?;
    log.record(
        "final",
        json!({
            "checkpoint": ckpt_path.display().to_string(),
            "accuracy_before": before,
            "accuracy_after": final_acc,
        }),
    )?;
    log.finish()
}
