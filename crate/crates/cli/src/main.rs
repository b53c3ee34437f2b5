//! `loadcast` command-line front end.
//!
//! Every subcommand takes `--config <file>` (TOML, every key optional) plus
//! positional paths, and echoes the effective configuration to stderr before
//! it starts. Set `LOADCAST_WORKERS` to cap the worker threads.

mod config;

use anyhow::{bail, Context, Result};
use chrono::{NaiveDate, NaiveDateTime};
use clap::{Parser, Subcommand};
use config::RunConfig;
use loadcast::backtest::{
    attach_aggregate, fmt_sig, run_backtest, train_lstm, write_outputs, BacktestPlan,
};
use loadcast::features::{compute_aggregate, HistoryView};
use loadcast::ingestion::{assemble_group, format_timestamp, load_archive, save_archive, RawInputs};
use loadcast::lstm::{load_model, predict_24h, save_model};
use loadcast::synth::{generate_group, write_ingestion_files};
use loadcast::{hour_at, MethodId};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const WORKERS_ENV: &str = "LOADCAST_WORKERS";

#[derive(Parser)]
#[command(name = "loadcast", version, about = "Pooled LSTM day-ahead load forecasting for smart-meter groups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, filter and impute raw readings into one archive per group.
    Ingest {
        #[arg(long)]
        config: Option<PathBuf>,
        meter_file: PathBuf,
        weather_file: PathBuf,
        segment_file: PathBuf,
        out_dir: PathBuf,
    },
    /// Train the group model and write it with its loss trace.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        group_archive: PathBuf,
        model_out: PathBuf,
    },
    /// Rolling-origin back-test writing records, summary and plot data.
    Backtest {
        #[arg(long)]
        config: Option<PathBuf>,
        group_archive: PathBuf,
        out_dir: PathBuf,
        /// Trained model; required when `lstm` is among the methods.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated methods, overriding the config file.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<MethodId>>,
    },
    /// Print the 24-hour forecast for one meter from one origin.
    Forecast {
        #[arg(long)]
        config: Option<PathBuf>,
        model: PathBuf,
        group_archive: PathBuf,
        meter_id: String,
        /// Midnight date (`2013-06-01`) or hour (`2013-06-01T00:00:00`).
        origin: String,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic group in the ingestion file formats.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_workers().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined with `: `, skipping causes whose text an outer
/// message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("{WORKERS_ENV}={raw:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { config, meter_file, weather_file, segment_file, out_dir } => {
            let cfg = RunConfig::load(config.as_deref())?;
            cfg.echo(&["filter"]);
            cmd_ingest(&cfg, &meter_file, &weather_file, &segment_file, &out_dir)
        }
        Command::Train { config, group_archive, model_out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            cfg.echo(&["plan", "train"]);
            cmd_train(&cfg, &group_archive, &model_out)
        }
        Command::Backtest { config, group_archive, out_dir, model, methods } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(m) = methods {
                cfg.backtest.methods = m;
            }
            cfg.echo(&["plan", "backtest"]);
            cmd_backtest(&cfg, &group_archive, model.as_deref(), &out_dir)
        }
        Command::Forecast { config, model, group_archive, meter_id, origin, out } => {
            // Forecasting has no tunables; the file is still parsed so typos surface.
            RunConfig::load(config.as_deref())?;
            let table = cmd_forecast(&model, &group_archive, &meter_id, &origin)?;
            print!("{table}");
            if let Some(path) = out {
                fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Synth { config, out_dir } => {
            let cfg = RunConfig::load(config.as_deref())?;
            cfg.echo(&["synth"]);
            cmd_synth(&cfg, &out_dir)
        }
    }
}

fn cmd_ingest(cfg: &RunConfig, meters: &Path, weather: &Path, segments: &Path, out_dir: &Path) -> Result<()> {
    let inputs = RawInputs::read(meters, weather, segments)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let report_path = out_dir.join("filtering_report.csv");
    let mut report = String::from("group_id,meter_id,reason\n");
    for group_id in inputs.group_ids() {
        let loaded = assemble_group(&inputs, &group_id, cfg.filter)?;
        for d in &loaded.dropped {
            for reason in &d.reasons {
                report.push_str(&format!("{group_id},{},{reason}\n", d.meter_id));
            }
        }
        let kept = loaded.dataset.meters.len();
        if kept == 0 {
            eprintln!("warning: group {group_id} has no meters left after filtering; no archive written");
            continue;
        }
        let path = out_dir.join(format!("{group_id}.json"));
        save_archive(&loaded.dataset, &path)?;
        eprintln!(
            "group {group_id}: kept {kept} meters, dropped {}, {} hours -> {}",
            loaded.dropped.len(),
            loaded.dataset.n_hours(),
            path.display()
        );
    }
    fs::write(&report_path, report).with_context(|| format!("writing {}", report_path.display()))?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, archive: &Path, model_out: &Path) -> Result<()> {
    let mut group = load_archive(archive)?;
    let plan = BacktestPlan::build(&group, &cfg.plan)?;
    eprintln!(
        "group {}: {} training meters, {} test meters, {} training hours",
        group.group_id,
        plan.train_meter_ids.len(),
        plan.test_meter_ids.len(),
        plan.train_hours
    );
    attach_aggregate(&mut group, &plan)?;
    let (model, trace) = train_lstm(&group, &plan, &cfg.train)?;
    save_model(&model, model_out)?;
    let trace_path = loss_trace_path(model_out);
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, fmt_sig(*l)));
    }
    fs::write(&trace_path, out).with_context(|| format!("writing {}", trace_path.display()))?;
    eprintln!(
        "epoch 1 loss {}, epoch {} loss {}; model -> {}, trace -> {}",
        fmt_sig(trace[0]),
        trace.len(),
        fmt_sig(trace[trace.len() - 1]),
        model_out.display(),
        trace_path.display()
    );
    Ok(())
}

/// `model.bin` gets its trace in `model.loss.csv`.
pub fn loss_trace_path(model: &Path) -> PathBuf {
    model.with_extension("loss.csv")
}

fn cmd_backtest(cfg: &RunConfig, archive: &Path, model_path: Option<&Path>, out_dir: &Path) -> Result<()> {
    let mut group = load_archive(archive)?;
    let wants_lstm = cfg.backtest.methods.contains(&MethodId::Lstm);
    let model = match (model_path, wants_lstm) {
        (Some(p), true) => Some(load_model(p).with_context(|| format!("loading model {}", p.display()))?),
        (None, true) => bail!("method lstm needs --model"),
        (_, false) => None,
    };
    // A model fixes the training meters and window it was fitted on.
    let plan = match &model {
        Some(m) => BacktestPlan::with_training(&group, &m.meta.train_meter_ids, m.meta.train_hours)?,
        None => BacktestPlan::build(&group, &cfg.plan)?,
    };
    attach_aggregate(&mut group, &plan)?;
    let result = run_backtest(&group, &plan, model.as_ref(), &cfg.backtest)?;
    write_outputs(out_dir, &result)?;
    eprintln!(
        "{} records over {} meters and {} test days -> {}",
        result.records.len(),
        plan.all_meters().len(),
        plan.test_days,
        out_dir.display()
    );
    for (pop, s) in &result.summary.populations {
        for (method, m) in &s.methods {
            eprintln!(
                "  {pop:5} {:5} median by day {} kWh, by meter {} kWh",
                method.as_str(),
                fmt_sig(m.median_by_day),
                fmt_sig(m.median_by_meter)
            );
        }
    }
    Ok(())
}

fn parse_origin(raw: &str) -> Result<NaiveDateTime> {
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists"));
    }
    loadcast::ingestion::parse_timestamp(raw).with_context(|| format!("origin {raw:?} is neither a date nor a timestamp"))
}

fn cmd_forecast(model_path: &Path, archive: &Path, meter_id: &str, origin: &str) -> Result<String> {
    let model = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let mut group = load_archive(archive)?;
    let Some(meter) = group.meter(meter_id) else {
        bail!("meter {meter_id} is not in group {}", group.group_id);
    };
    let origin_ts = parse_origin(origin)?;
    let offset = (origin_ts - group.start()).num_hours();
    let train_hours = model.meta.train_hours;
    if offset < 24 {
        bail!(
            "origin {} leaves fewer than 24 hours of history (series starts {})",
            format_timestamp(origin_ts),
            format_timestamp(group.start())
        );
    }
    let origin_idx = offset as usize;
    if origin_idx > group.n_hours() {
        bail!("origin {} is past the end of the series", format_timestamp(origin_ts));
    }
    if !model.norm_stats.meters.contains_key(meter_id) && origin_idx < train_hours {
        bail!(
            "meter {meter_id} was not a training meter; its scaling needs the first {train_hours} hours \
             of history before the origin"
        );
    }
    let stats = model.meter_stats(meter_id, &meter.values[..train_hours.min(meter.values.len())])?;
    group.aggregate = compute_aggregate(&group, &model.meta.train_meter_ids)?;
    let view = HistoryView::of_group(&group, meter_id, origin_idx)?;
    let fc = predict_24h(&model, meter_id, &view, &stats)?;
    let mut out = String::from("hour,kwh\n");
    for (h, v) in fc.values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", format_timestamp(hour_at(origin_ts, h)), fmt_sig(*v)));
    }
    Ok(out)
}

fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let group = generate_group(&cfg.synth)?;
    write_ingestion_files(&group, out_dir)?;
    eprintln!(
        "{} meters x {} hours of group {} -> {}",
        group.meters.len(),
        group.n_hours(),
        group.group_id,
        out_dir.display()
    );
    Ok(())
}
