//! Rolling-origin evaluation over out-of-sample days and out-of-sample meters.
//!
//! A group is split into training and test meters and into a training window
//! followed by whole test days. At midnight of every test day each method
//! forecasts the next 24 hours of every meter from the hours before midnight
//! only, and the forecast is scored by its mean absolute error in kWh.

use crate::benchmarks::{arima_forecast, fit_arima_auto, seasonal_naive, ArimaSpec, BenchmarkError};
use crate::features::{build_windows, compute_aggregate, fit_norm_stats, FeatureError, HistoryView};
use crate::lstm::{self, predict_24h, LstmError, LstmModel, TrainConfig};
use crate::types::{hour_at, GroupDataset, MethodId, HORIZON, TIMESTEPS};
use chrono::{NaiveDate, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Training-hour budget shared by the meters of a group.
pub const HOUR_BUDGET: usize = 450_000;
pub const MIN_TRAIN_HOURS: usize = 720;
pub const MAX_TRAIN_HOURS: usize = 7200;
/// Training windows are whole multiples of 30 days.
const TRAIN_HOUR_STEP: usize = 720;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{remaining} hours after the training window are not a whole number of days")]
    PartialDay { remaining: usize },
    #[error("records do not cover the full grid for method {method}: {missing} (meter, day) cells missing")]
    IncompleteGrid { method: MethodId, missing: usize },
    #[error("no records for method {0}")]
    NoRecords(MethodId),
    #[error("method lstm requested but no model supplied")]
    MissingModel,
    #[error("forecast for {meter_id} at {origin}: {source}")]
    Benchmark {
        meter_id: String,
        origin: NaiveDate,
        source: BenchmarkError,
    },
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BacktestError>;

/// `450000 / total_meters` rounded to the nearest multiple of 720 and
/// clamped to `[720, 7200]`.
pub fn compute_train_hours(total_meters: usize) -> usize {
    let n = total_meters.max(1) as f64;
    let steps = (HOUR_BUDGET as f64 / n / TRAIN_HOUR_STEP as f64).round() as usize;
    (steps * TRAIN_HOUR_STEP).clamp(MIN_TRAIN_HOURS, MAX_TRAIN_HOURS)
}

pub fn compute_test_days(total_hours: usize, train_hours: usize) -> Result<usize> {
    if total_hours <= train_hours {
        return Err(BacktestError::Plan(format!(
            "{total_hours} hours leave no test period after {train_hours} training hours"
        )));
    }
    let remaining = total_hours - train_hours;
    if !remaining.is_multiple_of(24) {
        return Err(BacktestError::PartialDay { remaining });
    }
    Ok(remaining / 24)
}

/// Seeded shuffle of `meter_ids` (sorted first, so input order does not
/// matter); the first `train_count` go to training, or `⌈fraction·n⌉` if no
/// count is given, capped at `n − 1` so at least one meter is held out.
pub fn split_meters(
    meter_ids: &[String],
    fraction: f64,
    train_count: Option<usize>,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let n = meter_ids.len();
    if n < 2 {
        return Err(BacktestError::Plan(format!("need at least 2 meters to split, got {n}")));
    }
    let k = match train_count {
        Some(k) => k,
        None => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(BacktestError::Plan(format!("train fraction {fraction} outside (0, 1)")));
            }
            (((fraction * n as f64) - 1e-9).ceil() as usize).min(n - 1)
        }
    };
    if k == 0 || k >= n {
        return Err(BacktestError::Plan(format!(
            "{k} training meters out of {n} leaves an empty side"
        )));
    }
    let mut ids = meter_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(k);
    Ok((ids, test))
}

/// Settings for [`BacktestPlan::build`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub train_fraction: f64,
    /// Exact number of training meters; overrides `train_fraction`.
    pub train_meters: Option<usize>,
    /// Exact training window; otherwise derived from the meter count.
    pub train_hours: Option<usize>,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            train_meters: None,
            train_hours: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestPlan {
    pub group_id: String,
    pub train_meter_ids: Vec<String>,
    pub test_meter_ids: Vec<String>,
    pub train_hours: usize,
    pub test_days: usize,
    /// Hour index of midnight of each test day.
    pub origins: Vec<usize>,
}

impl BacktestPlan {
    pub fn build(group: &GroupDataset, cfg: &PlanConfig) -> Result<Self> {
        if group.start().hour() != 0 || group.start().minute() != 0 {
            return Err(BacktestError::Plan(format!(
                "series must start at midnight so origins fall on midnights, starts at {}",
                group.start()
            )));
        }
        let (train, test) = split_meters(&group.meter_ids(), cfg.train_fraction, cfg.train_meters, cfg.seed)?;
        let train_hours = cfg.train_hours.unwrap_or_else(|| compute_train_hours(group.meters.len()));
        Self::assemble(group, train, test, train_hours)
    }

    /// Plan with a given training set, e.g. the one recorded in a model file.
    /// Every other meter of the group becomes a test meter.
    pub fn with_training(group: &GroupDataset, train_meter_ids: &[String], train_hours: usize) -> Result<Self> {
        if group.start().hour() != 0 || group.start().minute() != 0 {
            return Err(BacktestError::Plan(format!(
                "series must start at midnight so origins fall on midnights, starts at {}",
                group.start()
            )));
        }
        let ids = group.meter_ids();
        if let Some(missing) = train_meter_ids.iter().find(|m| !ids.contains(m)) {
            return Err(BacktestError::Plan(format!("training meter {missing} is not in group {}", group.group_id)));
        }
        let mut train = train_meter_ids.to_vec();
        train.sort();
        let test = ids.into_iter().filter(|m| !train.contains(m)).collect();
        Self::assemble(group, train, test, train_hours)
    }

    fn assemble(group: &GroupDataset, train: Vec<String>, test: Vec<String>, train_hours: usize) -> Result<Self> {
        if !train_hours.is_multiple_of(24) || train_hours < TIMESTEPS + HORIZON {
            return Err(BacktestError::Plan(format!(
                "training window of {train_hours} hours must be whole days and at least 48 hours"
            )));
        }
        let test_days = compute_test_days(group.n_hours(), train_hours)?;
        Ok(Self {
            group_id: group.group_id.clone(),
            train_meter_ids: train,
            test_meter_ids: test,
            train_hours,
            test_days,
            origins: (0..test_days).map(|d| train_hours + 24 * d).collect(),
        })
    }

    pub fn population(&self, meter_id: &str) -> Population {
        if self.train_meter_ids.iter().any(|m| m == meter_id) {
            Population::Train
        } else {
            Population::Test
        }
    }

    pub fn all_meters(&self) -> Vec<String> {
        let mut all: Vec<String> = self.train_meter_ids.iter().chain(&self.test_meter_ids).cloned().collect();
        all.sort();
        all
    }
}

/// Sets the group aggregate to the sum over the plan's training meters.
pub fn attach_aggregate(group: &mut GroupDataset, plan: &BacktestPlan) -> Result<()> {
    group.aggregate = compute_aggregate(group, &plan.train_meter_ids)?;
    Ok(())
}

/// Fits normalization stats and trains the network on the training meters
/// over the training window. The group's aggregate must already be attached.
pub fn train_lstm(group: &GroupDataset, plan: &BacktestPlan, config: &TrainConfig) -> Result<(LstmModel, Vec<f64>)> {
    let stats = fit_norm_stats(group, plan.train_hours)?.restricted_to(&plan.train_meter_ids);
    let tensor = build_windows(group, &stats, &plan.train_meter_ids, 0..plan.train_hours, 1)?;
    Ok(lstm::train(&tensor, stats, plan.train_hours, config)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Train,
    Test,
}

/// MAE(i, n, t): one method, one meter, one test day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub method: MethodId,
    pub meter_id: String,
    pub origin_day: NaiveDate,
    pub mae: f64,
}

/// `(1/24) Σ |forecast − actual|`, summed in hour order.
pub fn mae(forecast: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(forecast.len(), actual.len(), "mae needs equal lengths");
    let mut s = 0.0;
    for (f, a) in forecast.iter().zip(actual) {
        s += (f - a).abs();
    }
    s / forecast.len() as f64
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-key medians and the median of those medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRollup<K: Ord> {
    pub per_key: BTreeMap<K, f64>,
    pub overall: f64,
}

/// Records of one method, checked to cover every (meter, day) cell that any
/// method in `records` covers.
fn method_grid(records: &[EvaluationRecord], method: MethodId) -> Result<Vec<&EvaluationRecord>> {
    let meters: BTreeSet<&str> = records.iter().map(|r| r.meter_id.as_str()).collect();
    let days: BTreeSet<NaiveDate> = records.iter().map(|r| r.origin_day).collect();
    let mine: Vec<&EvaluationRecord> = records.iter().filter(|r| r.method == method).collect();
    if mine.is_empty() {
        return Err(BacktestError::NoRecords(method));
    }
    let cells: BTreeSet<(&str, NaiveDate)> = mine.iter().map(|r| (r.meter_id.as_str(), r.origin_day)).collect();
    let expected = meters.len() * days.len();
    if cells.len() != expected || mine.len() != expected {
        return Err(BacktestError::IncompleteGrid {
            method,
            missing: expected.saturating_sub(cells.len()),
        });
    }
    Ok(mine)
}

/// Median over days for each meter, then the median across meters.
pub fn median_by_meter(records: &[EvaluationRecord], method: MethodId) -> Result<MedianRollup<String>> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in method_grid(records, method)? {
        by.entry(r.meter_id.clone()).or_default().push(r.mae);
    }
    let per_key: BTreeMap<String, f64> = by.into_iter().map(|(k, v)| (k, median(&v))).collect();
    let overall = median(&per_key.values().copied().collect::<Vec<_>>());
    Ok(MedianRollup { per_key, overall })
}

/// Median over meters for each day, then the median across days.
pub fn median_by_day(records: &[EvaluationRecord], method: MethodId) -> Result<MedianRollup<NaiveDate>> {
    let mut by: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
    for r in method_grid(records, method)? {
        by.entry(r.origin_day).or_default().push(r.mae);
    }
    let per_key: BTreeMap<NaiveDate, f64> = by.into_iter().map(|(k, v)| (k, median(&v))).collect();
    let overall = median(&per_key.values().copied().collect::<Vec<_>>());
    Ok(MedianRollup { per_key, overall })
}

/// `(benchmark − lstm) / benchmark` in percent.
pub fn improvement_pct(benchmark: f64, lstm: f64) -> f64 {
    100.0 * (benchmark - lstm) / benchmark
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub methods: Vec<MethodId>,
    /// ARIMA models are re-selected every this many test days.
    pub arima_refit_days: usize,
    /// Fit ARIMA on at most this many of the latest pre-origin hours.
    pub arima_max_fit_hours: Option<usize>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            methods: vec![MethodId::Naive, MethodId::Arima, MethodId::Lstm],
            arima_refit_days: 7,
            arima_max_fit_hours: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub median_by_meter: f64,
    pub median_by_day: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub benchmark: MethodId,
    /// Percent improvement of the LSTM on the median-by-meter statistic.
    pub by_meter_pct: f64,
    /// Percent improvement of the LSTM on the median-by-day statistic.
    pub by_day_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub meters: usize,
    pub methods: BTreeMap<MethodId, MethodSummary>,
    pub improvements: Vec<Improvement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub group_id: String,
    pub train_hours: usize,
    pub test_days: usize,
    pub populations: BTreeMap<String, PopulationSummary>,
    /// Meters whose ARIMA search fell back to seasonal naive at least once.
    pub arima_fallbacks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub plan: BacktestPlan,
    /// Sorted by method, meter, day.
    pub records: Vec<EvaluationRecord>,
    pub summary: Summary,
}

impl BacktestResult {
    pub fn records_for(&self, population: Population) -> Vec<EvaluationRecord> {
        self.records
            .iter()
            .filter(|r| self.plan.population(&r.meter_id) == population)
            .cloned()
            .collect()
    }
}

struct MeterOutcome {
    records: Vec<EvaluationRecord>,
    arima_fell_back: bool,
}

fn evaluate_meter(
    group: &GroupDataset,
    plan: &BacktestPlan,
    meter_id: &str,
    model: Option<&LstmModel>,
    cfg: &BacktestConfig,
) -> Result<MeterOutcome> {
    let series = group
        .meter(meter_id)
        .ok_or_else(|| BacktestError::Plan(format!("meter {meter_id} is not in the group")))?;
    let lstm_stats = match (cfg.methods.contains(&MethodId::Lstm), model) {
        (true, Some(m)) => Some(m.meter_stats(meter_id, &series.values[..plan.train_hours])?),
        (true, None) => return Err(BacktestError::MissingModel),
        _ => None,
    };
    let mut records = Vec::with_capacity(plan.origins.len() * cfg.methods.len());
    let mut arima: Option<ArimaSpec> = None;
    let mut fell_back = false;

    for (day, &origin) in plan.origins.iter().enumerate() {
        let date = hour_at(group.start(), origin).date();
        let history = &series.values[..origin];
        let actual = &series.values[origin..origin + HORIZON];
        let bench_err = |source| BacktestError::Benchmark {
            meter_id: meter_id.to_owned(),
            origin: date,
            source,
        };
        for &method in &cfg.methods {
            let forecast = match method {
                MethodId::Naive => seasonal_naive(history).map_err(bench_err)?,
                MethodId::Arima => {
                    if arima.is_none() || day % cfg.arima_refit_days.max(1) == 0 {
                        let from = cfg.arima_max_fit_hours.map_or(0, |m| origin.saturating_sub(m));
                        let y: Vec<f64> = history[from..].iter().map(|z| z.ln_1p()).collect();
                        let spec = fit_arima_auto(&y).map_err(bench_err)?.spec;
                        fell_back |= spec.fallback;
                        arima = Some(spec);
                    }
                    arima_forecast(arima.as_ref().unwrap(), history).map_err(bench_err)?
                }
                MethodId::Lstm => {
                    let view = HistoryView::of_group(group, meter_id, origin)?;
                    predict_24h(model.unwrap(), meter_id, &view, lstm_stats.as_ref().unwrap())?.values
                }
            };
            // Clamp exactly as a ForecastSet would.
            let forecast: Vec<f64> = forecast.into_iter().map(|v| v.max(0.0)).collect();
            records.push(EvaluationRecord {
                method,
                meter_id: meter_id.to_owned(),
                origin_day: date,
                mae: mae(&forecast, actual),
            });
        }
    }
    Ok(MeterOutcome {
        records,
        arima_fell_back: fell_back,
    })
}

fn summarize(plan: &BacktestPlan, records: &[EvaluationRecord], methods: &[MethodId], fallbacks: Vec<String>) -> Result<Summary> {
    let mut populations = BTreeMap::new();
    for (name, filter) in [("all", None), ("train", Some(Population::Train)), ("test", Some(Population::Test))] {
        let subset: Vec<EvaluationRecord> = records
            .iter()
            .filter(|r| filter.is_none_or(|p| plan.population(&r.meter_id) == p))
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let mut per_method = BTreeMap::new();
        for &m in methods {
            per_method.insert(
                m,
                MethodSummary {
                    median_by_meter: median_by_meter(&subset, m)?.overall,
                    median_by_day: median_by_day(&subset, m)?.overall,
                },
            );
        }
        let mut improvements = Vec::new();
        if let Some(l) = per_method.get(&MethodId::Lstm) {
            for bench in [MethodId::Naive, MethodId::Arima] {
                if let Some(b) = per_method.get(&bench) {
                    improvements.push(Improvement {
                        benchmark: bench,
                        by_meter_pct: improvement_pct(b.median_by_meter, l.median_by_meter),
                        by_day_pct: improvement_pct(b.median_by_day, l.median_by_day),
                    });
                }
            }
        }
        let meters = subset.iter().map(|r| r.meter_id.as_str()).collect::<BTreeSet<_>>().len();
        populations.insert(
            name.to_owned(),
            PopulationSummary {
                meters,
                methods: per_method,
                improvements,
            },
        );
    }
    Ok(Summary {
        group_id: plan.group_id.clone(),
        train_hours: plan.train_hours,
        test_days: plan.test_days,
        populations,
        arima_fallbacks: fallbacks,
    })
}

/// Runs every method for every meter of the plan and every test day.
/// Meters are evaluated in parallel; records come back sorted.
pub fn run_backtest(
    group: &GroupDataset,
    plan: &BacktestPlan,
    model: Option<&LstmModel>,
    cfg: &BacktestConfig,
) -> Result<BacktestResult> {
    if cfg.methods.is_empty() {
        return Err(BacktestError::Plan("no methods selected".into()));
    }
    if plan.origins.last().is_some_and(|o| o + HORIZON > group.n_hours()) {
        return Err(BacktestError::Plan("plan extends past the end of the series".into()));
    }
    if group.aggregate.len() != group.n_hours() {
        return Err(FeatureError::MissingAggregate.into());
    }
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let cfg = BacktestConfig { methods, ..cfg.clone() };

    let meters = plan.all_meters();
    let outcomes = meters
        .par_iter()
        .map(|id| evaluate_meter(group, plan, id, model, &cfg))
        .collect::<Result<Vec<_>>>()?;

    let fallbacks: Vec<String> = meters
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| o.arima_fell_back)
        .map(|(id, _)| id.clone())
        .collect();
    let mut records: Vec<EvaluationRecord> = outcomes.into_iter().flat_map(|o| o.records).collect();
    records.sort_by(|a, b| (a.method, &a.meter_id, a.origin_day).cmp(&(b.method, &b.meter_id, b.origin_day)));
    let summary = summarize(plan, &records, &cfg.methods, fallbacks)?;
    Ok(BacktestResult {
        plan: plan.clone(),
        records,
        summary,
    })
}

/// `x` with 6 significant digits, trailing zeros trimmed.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    };
    if s.contains('e') || !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_owned()
}

/// Rounds to 6 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// `method,meter_id,origin_date,mae_kwh`
pub fn write_records<W: Write>(out: W, records: &[EvaluationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "meter_id", "origin_date", "mae_kwh"])
        .map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.method.as_str(),
            &r.meter_id,
            &r.origin_day.to_string(),
            &fmt_sig(r.mae),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> BacktestError {
    BacktestError::Io(std::io::Error::other(e))
}

/// Reads a file written by [`write_records`].
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvaluationRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_io)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_io)?;
        let bad = |what: &str| BacktestError::Plan(format!("bad {what} in records file: {row:?}"));
        out.push(EvaluationRecord {
            method: row[0].parse().map_err(|_| bad("method"))?,
            meter_id: row[1].to_owned(),
            origin_day: row[2].parse().map_err(|_| bad("date"))?,
            mae: row[3].parse().map_err(|_| bad("mae"))?,
        });
    }
    Ok(out)
}

fn rounded_summary(s: &Summary) -> Summary {
    let mut s = s.clone();
    for p in s.populations.values_mut() {
        for m in p.methods.values_mut() {
            m.median_by_meter = round_sig(m.median_by_meter);
            m.median_by_day = round_sig(m.median_by_day);
        }
        for i in &mut p.improvements {
            i.by_meter_pct = round_sig(i.by_meter_pct);
            i.by_day_pct = round_sig(i.by_day_pct);
        }
    }
    s
}

/// Writes `records.csv`, `summary.json`, `median_by_day.csv` and
/// `median_by_meter.csv` into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, result: &BacktestResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_records(std::fs::File::create(dir.join("records.csv"))?, &result.records)?;
    let summary = serde_json::to_string_pretty(&rounded_summary(&result.summary))?;
    std::fs::write(dir.join("summary.json"), summary + "\n")?;

    let methods: BTreeSet<MethodId> = result.records.iter().map(|r| r.method).collect();
    let mut by_day = csv::Writer::from_path(dir.join("median_by_day.csv")).map_err(csv_io)?;
    by_day
        .write_record(["population", "method", "origin_date", "median_mae_kwh"])
        .map_err(csv_io)?;
    let mut by_meter = csv::Writer::from_path(dir.join("median_by_meter.csv")).map_err(csv_io)?;
    by_meter
        .write_record(["population", "method", "meter_id", "median_mae_kwh"])
        .map_err(csv_io)?;
    for pop in [Population::Train, Population::Test] {
        let subset = result.records_for(pop);
        if subset.is_empty() {
            continue;
        }
        let name = match pop {
            Population::Train => "train",
            Population::Test => "test",
        };
        for &m in &methods {
            for (day, v) in median_by_day(&subset, m)?.per_key {
                by_day
                    .write_record([name, m.as_str(), &day.to_string(), &fmt_sig(v)])
                    .map_err(csv_io)?;
            }
            for (meter, v) in median_by_meter(&subset, m)?.per_key {
                by_meter
                    .write_record([name, m.as_str(), &meter, &fmt_sig(v)])
                    .map_err(csv_io)?;
            }
        }
    }
    by_day.flush()?;
    by_meter.flush()?;
    Ok(())
}
