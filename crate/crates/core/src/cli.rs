//! Command-line entry points. `main` only parses arguments and forwards here,
//! so tests can drive the same code paths in-process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{forgetting_drop, ClassificationMetrics};
use crate::stream::{self, GenConfig};
use crate::trainer::{
    ablation_table, evaluate_row, run_ablations, train_continual, Checkpoint, EvalLog, RunOutput,
    TrainConfig,
};

/// Environment variable that, when set, becomes the base of every relative
/// `--out` path.
pub const OUT_ROOT_ENV: &str = "CONTLAB_OUT_ROOT";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "eval_log.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "contlab",
    version,
    about = "Continual fake-news detection experiments on feature streams"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stream.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every event in order and evaluate after each.
    Train {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every test split of a stream.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and the three single-switch ablations.
    Ablate {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one hyperparameter and seed.
    Sweep {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate forgetting matrices and first-event curves from saved logs.
    Report {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Resolves `--out` against the output root override.
pub fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_toml(&read(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn metric_cells(m: &ClassificationMetrics) -> String {
    m.as_array()
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Final-row metrics per event, then the future split and the pooled splits.
fn summary_csv(
    per_event: &[ClassificationMetrics],
    future: Option<&ClassificationMetrics>,
    overall: &ClassificationMetrics,
) -> String {
    let mut s = format!("event,{}\n", ClassificationMetrics::NAMES.join(","));
    for (j, m) in per_event.iter().enumerate() {
        let _ = writeln!(s, "{},{}", j + 1, metric_cells(m));
    }
    if let Some(f) = future {
        let _ = writeln!(s, "future,{}", metric_cells(f));
    }
    let _ = writeln!(s, "overall,{}", metric_cells(overall));
    s
}

#[derive(Serialize)]
struct Timing<'a> {
    seconds_per_event: &'a [f64],
    total_seconds: f64,
}

/// Writes checkpoint, log, summary, resolved config and timing for one run.
fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    make_dir(dir)?;
    Checkpoint::new(out.model.clone()).save(&dir.join(CHECKPOINT_FILE))?;
    write_atomic(&dir.join(LOG_FILE), out.log.to_json()?.as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), out.log.config.to_toml()?.as_bytes())?;
    let last = out
        .log
        .metrics
        .last()
        .ok_or_else(|| Error::Input("run has no events".into()))?;
    let summary = summary_csv(last, out.log.future.last(), &out.log.overall);
    write_atomic(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
    write_json(
        &dir.join(TIMING_FILE),
        &Timing {
            seconds_per_event: &out.seconds,
            total_seconds: out.seconds.iter().sum(),
        },
    )
}

pub fn gen(config: &Path, out: &Path) -> Result<String> {
    let cfg: GenConfig =
        toml::from_str(&read(config)?).map_err(|e| Error::Config(e.to_string()))?;
    let s = stream::generate(&cfg)?;
    stream::save(&s, &out_path(out))?;
    let mut msg = String::new();
    for (i, c) in s.manifest.counts.iter().enumerate() {
        let label = if Some(i + 1) == s.manifest.future_event() {
            " (future)"
        } else {
            ""
        };
        let _ = writeln!(msg, "event {}{label}: {c} samples", i + 1);
    }
    Ok(msg)
}

pub fn train(stream_path: &Path, config: &Path, out: &Path) -> Result<String> {
    let s = stream::load(stream_path)?;
    let cfg = load_train_config(config)?;
    let run = train_continual(&s, &cfg)?;
    let dir = out_path(out);
    write_run(&dir, &run)?;
    read(&dir.join(SUMMARY_FILE))
}

pub fn eval(checkpoint: &Path, stream_path: &Path, out: &Path) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let s = stream::load(stream_path)?;
    let m = &s.manifest;
    let dims = &ck.model.config.dims;
    if (m.d_t, m.d_v) != (dims.d_t, dims.d_v) {
        return Err(Error::Validation(format!(
            "checkpoint expects d_t = {}, d_v = {} but the stream has {}, {}",
            dims.d_t, dims.d_v, m.d_t, m.d_v
        )));
    }
    let (per_event, future, overall) = evaluate_row(&ck.model, &s, s.num_events())?;
    let summary = summary_csv(&per_event, future.as_ref(), &overall);
    let dir = out_path(out);
    make_dir(&dir)?;
    write_atomic(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
    Ok(summary)
}

fn metric_header_mean_std() -> String {
    ClassificationMetrics::NAMES
        .iter()
        .map(|n| format!("{n}_mean,{n}_std"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn ablate(stream_path: &Path, config: &Path, seeds: &[u64], out: &Path) -> Result<String> {
    let s = stream::load(stream_path)?;
    let cfg = load_train_config(config)?;
    let runs = run_ablations(&s, &cfg, seeds)?;
    let dir = out_path(out);
    make_dir(&dir)?;
    let mut per_run = format!("variant,seed,{}\n", ClassificationMetrics::NAMES.join(","));
    let mut pairs = Vec::with_capacity(runs.len());
    for r in &runs {
        write_run(
            &dir.join(r.variant.name()).join(format!("seed_{}", r.seed)),
            &r.output,
        )?;
        let h = r.output.log.headline();
        let _ = writeln!(
            per_run,
            "{},{},{}",
            r.variant.name(),
            r.seed,
            metric_cells(&h)
        );
        pairs.push((r.variant, h));
    }
    let mut table = format!("variant,{},avg_delta\n", metric_header_mean_std());
    for row in ablation_table(&pairs)? {
        let cells: Vec<String> = row
            .mean
            .iter()
            .zip(&row.std)
            .map(|(m, sd)| format!("{m:.6},{sd:.6}"))
            .collect();
        let _ = writeln!(
            table,
            "{},{},{:.6}",
            row.variant.name(),
            cells.join(","),
            row.avg_delta
        );
    }
    write_atomic(&dir.join("runs.csv"), per_run.as_bytes())?;
    write_atomic(&dir.join("ablation.csv"), table.as_bytes())?;
    Ok(table)
}

pub fn sweep(
    stream_path: &Path,
    config: &Path,
    param: &str,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<String> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Usage(
            "sweep needs at least one value and one seed".into(),
        ));
    }
    let base = load_train_config(config)?;
    let mut jobs = Vec::new();
    for &v in values {
        for &seed in seeds {
            let mut c = base.clone();
            c.set_param(param, v)?;
            c.seed = seed;
            jobs.push((v, seed, c));
        }
    }
    let s = stream::load(stream_path)?;
    let dir = out_path(out);
    let runs: Vec<RunOutput> = jobs
        .par_iter()
        .map(|(_, _, c)| train_continual(&s, c))
        .collect::<Result<_>>()?;
    make_dir(&dir)?;
    let mut table = format!(
        "param,value,seed,{}\n",
        ClassificationMetrics::NAMES.join(",")
    );
    for ((v, seed, _), run) in jobs.iter().zip(&runs) {
        write_run(
            &dir.join(format!("{param}_{v}"))
                .join(format!("seed_{seed}")),
            run,
        )?;
        let _ = writeln!(
            table,
            "{param},{v},{seed},{}",
            metric_cells(&run.log.headline())
        );
    }
    write_atomic(&dir.join("sweep.csv"), table.as_bytes())?;
    Ok(table)
}

fn collect_logs(dir: &Path, root: &Path, found: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_logs(&p, root, found)?;
        } else if p.extension().is_some_and(|x| x == "json") {
            let text = read(&p)?;
            // checkpoints and timing files live next to logs; only logs carry the marker
            if !text.contains(crate::trainer::LOG_FORMAT) {
                continue;
            }
            let rel = p.strip_prefix(root).unwrap_or(&p).with_extension("");
            let name = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("_");
            found.push((name, p));
        }
    }
    Ok(())
}

pub fn report(logs: &Path, out: &Path) -> Result<String> {
    let mut found = Vec::new();
    collect_logs(logs, logs, &mut found)?;
    if found.is_empty() {
        return Err(Error::Input(format!(
            "no evaluation logs under {}",
            logs.display()
        )));
    }
    let mut parsed = Vec::with_capacity(found.len());
    for (name, path) in &found {
        let log = EvalLog::from_json(&read(path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let m = &log.accuracy;
        let cols = log.num_events + usize::from(log.has_future);
        if m.num_rows() != log.num_events || m.rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation(format!(
                "{}: matrix is not {} x {cols}",
                path.display(),
                log.num_events
            )));
        }
        parsed.push((name.clone(), log));
    }
    let (k0, f0) = (parsed[0].1.num_events, parsed[0].1.has_future);
    if let Some((name, _)) = parsed
        .iter()
        .find(|(_, l)| (l.num_events, l.has_future) != (k0, f0))
    {
        return Err(Error::Validation(format!(
            "log {name} has a different event layout from {}",
            parsed[0].0
        )));
    }
    let dir = out_path(out);
    make_dir(&dir)?;
    let mut curve = String::from("log,after_event,accuracy\n");
    let mut drops = String::from("log,event,forgetting_drop\n");
    for (name, log) in &parsed {
        let m = &log.accuracy;
        let mut header = vec!["after_event".to_string()];
        header.extend((1..=log.num_events).map(|j| format!("event_{j}")));
        if log.has_future {
            header.push("future".into());
        }
        let mut table = header.join(",") + "\n";
        for (k, row) in m.rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or(String::new(), |a| format!("{a:.6}")))
                .collect();
            let _ = writeln!(table, "{},{}", k + 1, cells.join(","));
        }
        write_atomic(&dir.join(format!("matrix_{name}.csv")), table.as_bytes())?;
        for (k, a) in m.column(0).iter().enumerate() {
            if let Some(a) = a {
                let _ = writeln!(curve, "{name},{},{a:.6}", k + 1);
            }
        }
        if m.num_rows() >= 2 {
            for j in 0..log.num_events {
                let _ = writeln!(drops, "{name},{},{:.6}", j + 1, forgetting_drop(m, j)?);
            }
        }
    }
    write_atomic(&dir.join("first_event.csv"), curve.as_bytes())?;
    write_atomic(&dir.join("forgetting.csv"), drops.as_bytes())?;
    Ok(format!("{} log(s) reported\n", parsed.len()))
}

/// Runs one parsed command and returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gen { config, out } => gen(&config, &out),
        Command::Train {
            stream,
            config,
            out,
        } => train(&stream, &config, &out),
        Command::Eval {
            checkpoint,
            stream,
            out,
        } => eval(&checkpoint, &stream, &out),
        Command::Ablate {
            stream,
            config,
            seeds,
            out,
        } => ablate(&stream, &config, &seeds, &out),
        Command::Sweep {
            stream,
            config,
            param,
            values,
            seeds,
            out,
        } => sweep(&stream, &config, &param, &values, &seeds, &out),
        Command::Report { logs, out } => report(&logs, &out),
    }
}
