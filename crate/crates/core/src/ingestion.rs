//! Raw meter, weather and segment files into validated hourly groups.
//!
//! Half-hourly readings are summed to hours, meters with too many gaps or no
//! variability are dropped, and the remaining gaps are filled by carrying the
//! last observation forward.

use crate::types::{
    hour_at, is_missing, validate_group, GroupDataset, MeterSeries, WeatherSeries, MISSING,
};
use chrono::{DateTime, Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_MAX_MISSING: usize = 20;
pub const DEFAULT_MIN_STD: f64 = 0.01;

pub const METER_HEADER: [&str; 3] = ["meter_id", "timestamp", "kwh"];
pub const WEATHER_HEADER: [&str; 3] = ["timestamp", "apparent_temperature", "humidity"];
pub const SEGMENT_HEADER: [&str; 2] = ["meter_id", "group_id"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Format {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: expected column `{expected}` at position {position}, found `{found}`")]
    Header {
        path: PathBuf,
        position: usize,
        expected: String,
        found: String,
    },
    #[error("meter {meter_id}: duplicate reading at {timestamp}")]
    DuplicateTimestamp {
        meter_id: String,
        timestamp: NaiveDateTime,
    },
    #[error("meter {meter_id}: reading at {timestamp} is not on the hour or half hour")]
    OffGridTimestamp {
        meter_id: String,
        timestamp: NaiveDateTime,
    },
    #[error("readings are not sorted by timestamp (at {0})")]
    Unsorted(NaiveDateTime),
    #[error("readings mix meters `{0}` and `{1}`")]
    MixedMeters(String, String),
    #[error("no readings")]
    Empty,
    #[error("meter {0} has no observed values to impute from")]
    NothingObserved(String),
    #[error("segment file maps meter `{meter_id}` to group `{group_id}` but the meter file has no readings for it")]
    UnknownMeter { meter_id: String, group_id: String },
    #[error("weather covers {weather_start}..{weather_end}, meters need {meter_start}..{meter_end}")]
    WeatherTooShort {
        weather_start: NaiveDateTime,
        weather_end: NaiveDateTime,
        meter_start: NaiveDateTime,
        meter_end: NaiveDateTime,
    },
    #[error("weather file has a gap at {0}")]
    WeatherGap(NaiveDateTime),
    #[error("{path}: {source}")]
    Archive {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("group {group_id} failed validation: {violations}")]
    Invalid {
        group_id: String,
        violations: String,
    },
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// One line of the meter file. `kwh` is `None` for an empty field.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReading {
    pub meter_id: String,
    pub timestamp: NaiveDateTime,
    pub kwh: Option<f64>,
}

/// Parses ISO-8601 timestamps with or without a UTC offset. Offsets are
/// converted to UTC; naive timestamps are taken as already UTC.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    let trimmed = s.strip_suffix('Z').unwrap_or(s);
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(trimmed, f).ok())
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(trimmed, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn truncate_to_hour(ts: NaiveDateTime) -> NaiveDateTime {
    ts.with_minute(0).and_then(|t| t.with_second(0)).and_then(|t| t.with_nanosecond(0)).unwrap_or(ts)
}

/// Sums half-hour readings into hourly kWh.
///
/// The series spans the first to the last reading's hour. If any reading is
/// at half past, every hour expects two readings; otherwise one. An hour with
/// an absent, empty, negative or non-finite constituent is marked missing.
/// The returned series has an empty `group_id`.
pub fn aggregate_to_hourly(readings: &[RawReading]) -> Result<MeterSeries> {
    let first = readings.first().ok_or(IngestError::Empty)?;
    let meter_id = first.meter_id.clone();
    let mut half_hourly = false;
    for (i, r) in readings.iter().enumerate() {
        if r.meter_id != meter_id {
            return Err(IngestError::MixedMeters(meter_id, r.meter_id.clone()));
        }
        let (m, s) = (r.timestamp.minute(), r.timestamp.second());
        if s != 0 || r.timestamp.nanosecond() != 0 || (m != 0 && m != 30) {
            return Err(IngestError::OffGridTimestamp {
                meter_id,
                timestamp: r.timestamp,
            });
        }
        half_hourly |= m == 30;
        if i > 0 {
            let prev = readings[i - 1].timestamp;
            if r.timestamp == prev {
                return Err(IngestError::DuplicateTimestamp {
                    meter_id,
                    timestamp: r.timestamp,
                });
            }
            if r.timestamp < prev {
                return Err(IngestError::Unsorted(r.timestamp));
            }
        }
    }

    let start = truncate_to_hour(first.timestamp);
    let last = truncate_to_hour(readings[readings.len() - 1].timestamp);
    let n_hours = ((last - start).num_hours() + 1) as usize;
    let expected = if half_hourly { 2u8 } else { 1 };
    let mut sums = vec![0.0f64; n_hours];
    let mut counts = vec![0u8; n_hours];
    let mut poisoned = vec![false; n_hours];
    for r in readings {
        let h = (truncate_to_hour(r.timestamp) - start).num_hours() as usize;
        counts[h] += 1;
        match r.kwh {
            Some(v) if v.is_finite() && v >= 0.0 => sums[h] += v,
            _ => poisoned[h] = true,
        }
    }
    let values = (0..n_hours)
        .map(|h| {
            if poisoned[h] || counts[h] != expected {
                MISSING
            } else {
                sums[h]
            }
        })
        .collect();
    Ok(MeterSeries::new(meter_id, "", start, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DropReason {
    TooManyMissing { missing: usize },
    LowVariability { std: f64 },
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::TooManyMissing { missing } => write!(f, "too many missing hours ({missing})"),
            DropReason::LowVariability { std } => write!(f, "standard deviation {std:.6} kWh"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedMeter {
    pub meter_id: String,
    pub reasons: Vec<DropReason>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<MeterSeries>,
    pub dropped: Vec<DroppedMeter>,
}

/// Sample standard deviation of the non-missing values (0 for fewer than two).
pub fn observed_std(values: &[f64]) -> f64 {
    let obs: Vec<f64> = values.iter().copied().filter(|v| !is_missing(*v)).collect();
    if obs.len() < 2 {
        return 0.0;
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let ss: f64 = obs.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (obs.len() - 1) as f64).sqrt()
}

/// Drops a meter iff it has more than `max_missing` missing hours or the
/// standard deviation of its observed hours is below `min_std`.
pub fn filter_meters(group: Vec<MeterSeries>, max_missing: usize, min_std: f64) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for m in group {
        let mut reasons = Vec::new();
        let missing = m.missing_count();
        if missing > max_missing {
            reasons.push(DropReason::TooManyMissing { missing });
        }
        let std = observed_std(&m.values);
        if std < min_std {
            reasons.push(DropReason::LowVariability { std });
        }
        if reasons.is_empty() {
            out.kept.push(m);
        } else {
            out.dropped.push(DroppedMeter {
                meter_id: m.meter_id,
                reasons,
            });
        }
    }
    out
}

/// Last observation carried forward; leading gaps take the first observation.
pub fn impute_locf(series: MeterSeries) -> Result<MeterSeries> {
    let first = series
        .values
        .iter()
        .copied()
        .find(|v| !is_missing(*v))
        .ok_or_else(|| IngestError::NothingObserved(series.meter_id.clone()))?;
    let mut last = first;
    let values = series
        .values
        .iter()
        .map(|&v| {
            if !is_missing(v) {
                last = v;
            }
            last
        })
        .collect();
    Ok(MeterSeries { values, ..series })
}

/// Parsed contents of the three input files.
#[derive(Debug, Clone)]
pub struct RawInputs {
    /// Readings per meter, sorted by timestamp.
    pub readings: BTreeMap<String, Vec<RawReading>>,
    pub weather: Vec<(NaiveDateTime, f64, f64)>,
    /// meter_id to group_id, in file order.
    pub segments: Vec<(String, String)>,
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let found = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    for (position, expected) in header.iter().enumerate() {
        let got = found.get(position).unwrap_or("");
        if got != *expected {
            return Err(IngestError::Header {
                path: path.to_owned(),
                position,
                expected: (*expected).to_owned(),
                found: got.to_owned(),
            });
        }
    }
    Ok(rdr)
}

fn csv_error(path: &Path, e: csv::Error) -> IngestError {
    let line = e.position().map_or(0, |p| p.line());
    IngestError::Format {
        path: path.to_owned(),
        line,
        message: e.to_string(),
    }
}

fn field_error(path: &Path, rec: &csv::StringRecord, message: String) -> IngestError {
    IngestError::Format {
        path: path.to_owned(),
        line: rec.position().map_or(0, |p| p.line()),
        message,
    }
}

fn parse_ts_field(path: &Path, rec: &csv::StringRecord, idx: usize) -> Result<NaiveDateTime> {
    let raw = rec.get(idx).unwrap_or("");
    parse_timestamp(raw).ok_or_else(|| field_error(path, rec, format!("bad timestamp `{raw}`")))
}

fn parse_f64_field(path: &Path, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse::<f64>()
        .map_err(|_| field_error(path, rec, format!("bad {name} `{raw}`")))
}

pub fn read_meter_file(path: &Path) -> Result<BTreeMap<String, Vec<RawReading>>> {
    let mut rdr = open_csv(path, &METER_HEADER)?;
    let mut out: BTreeMap<String, Vec<RawReading>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let meter_id = rec.get(0).unwrap_or("").to_owned();
        if meter_id.is_empty() {
            return Err(field_error(path, &rec, "empty meter_id".into()));
        }
        let timestamp = parse_ts_field(path, &rec, 1)?;
        let kwh = match rec.get(2).unwrap_or("") {
            "" => None,
            raw => Some(raw.parse::<f64>().map_err(|_| {
                field_error(path, &rec, format!("bad kwh `{raw}`"))
            })?),
        };
        out.entry(meter_id.clone()).or_default().push(RawReading {
            meter_id,
            timestamp,
            kwh,
        });
    }
    for readings in out.values_mut() {
        readings.sort_by_key(|r| r.timestamp);
    }
    Ok(out)
}

pub fn read_weather_file(path: &Path) -> Result<Vec<(NaiveDateTime, f64, f64)>> {
    let mut rdr = open_csv(path, &WEATHER_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let ts = parse_ts_field(path, &rec, 0)?;
        let temp = parse_f64_field(path, &rec, 1, "apparent_temperature")?;
        let hum = parse_f64_field(path, &rec, 2, "humidity")?;
        out.push((ts, temp, hum));
    }
    out.sort_by_key(|r| r.0);
    Ok(out)
}

pub fn read_segment_file(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = open_csv(path, &SEGMENT_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let meter = rec.get(0).unwrap_or("").to_owned();
        let group = rec.get(1).unwrap_or("").to_owned();
        if meter.is_empty() || group.is_empty() {
            return Err(field_error(path, &rec, "empty meter_id or group_id".into()));
        }
        out.push((meter, group));
    }
    Ok(out)
}

impl RawInputs {
    pub fn read(meter_file: &Path, weather_file: &Path, segment_file: &Path) -> Result<Self> {
        Ok(Self {
            readings: read_meter_file(meter_file)?,
            weather: read_weather_file(weather_file)?,
            segments: read_segment_file(segment_file)?,
        })
    }

    /// Distinct group ids in segment-file order.
    pub fn group_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.segments
            .iter()
            .filter(|(_, g)| seen.insert(g.clone()))
            .map(|(_, g)| g.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub max_missing: usize,
    pub min_std: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_missing: DEFAULT_MAX_MISSING,
            min_std: DEFAULT_MIN_STD,
        }
    }
}

/// Pads a series with missing markers so it spans `[start, start + n_hours)`.
fn align(series: &MeterSeries, start: NaiveDateTime, n_hours: usize) -> MeterSeries {
    let offset = (series.start - start).num_hours() as usize;
    let mut values = vec![MISSING; n_hours];
    values[offset..offset + series.len()].copy_from_slice(&series.values);
    MeterSeries::new(series.meter_id.clone(), series.group_id.clone(), start, values)
}

fn slice_weather(
    weather: &[(NaiveDateTime, f64, f64)],
    start: NaiveDateTime,
    n_hours: usize,
) -> Result<WeatherSeries> {
    let end = hour_at(start, n_hours);
    let by_ts: HashMap<NaiveDateTime, (f64, f64)> =
        weather.iter().map(|(t, a, h)| (*t, (*a, *h))).collect();
    let (w_start, w_end) = match (weather.first(), weather.last()) {
        (Some(f), Some(l)) => (f.0, l.0 + Duration::hours(1)),
        _ => (start, start),
    };
    if w_start > start || w_end < end {
        return Err(IngestError::WeatherTooShort {
            weather_start: w_start,
            weather_end: w_end,
            meter_start: start,
            meter_end: end,
        });
    }
    let mut apparent_temperature = Vec::with_capacity(n_hours);
    let mut humidity = Vec::with_capacity(n_hours);
    for h in 0..n_hours {
        let t = hour_at(start, h);
        let (a, u) = by_ts.get(&t).copied().ok_or(IngestError::WeatherGap(t))?;
        apparent_temperature.push(a);
        humidity.push(u);
    }
    Ok(WeatherSeries {
        start,
        apparent_temperature,
        humidity,
    })
}

/// A filtered, imputed group together with what filtering removed.
#[derive(Debug, Clone)]
pub struct LoadedGroup {
    pub dataset: GroupDataset,
    pub dropped: Vec<DroppedMeter>,
}

/// Builds one group from parsed inputs: hourly aggregation, alignment on the
/// union horizon of the group's meters, filtering, imputation, validation.
pub fn assemble_group(inputs: &RawInputs, group_id: &str, filter: FilterConfig) -> Result<LoadedGroup> {
    let mut series = Vec::new();
    for (meter_id, g) in inputs.segments.iter().filter(|(_, g)| g == group_id) {
        let readings = inputs
            .readings
            .get(meter_id)
            .ok_or_else(|| IngestError::UnknownMeter {
                meter_id: meter_id.clone(),
                group_id: g.clone(),
            })?;
        let mut s = aggregate_to_hourly(readings)?;
        s.group_id = group_id.to_owned();
        series.push(s);
    }

    let (start, n_hours) = match (
        series.iter().map(|s| s.start).min(),
        series.iter().map(MeterSeries::end).max(),
    ) {
        (Some(s), Some(e)) => (s, (e - s).num_hours() as usize),
        _ => {
            return Ok(LoadedGroup {
                dataset: GroupDataset {
                    group_id: group_id.to_owned(),
                    meters: Vec::new(),
                    weather: WeatherSeries {
                        start: NaiveDateTime::default(),
                        apparent_temperature: Vec::new(),
                        humidity: Vec::new(),
                    },
                    aggregate: Vec::new(),
                },
                dropped: Vec::new(),
            })
        }
    };
    let weather = slice_weather(&inputs.weather, start, n_hours)?;
    let aligned: Vec<_> = series.iter().map(|s| align(s, start, n_hours)).collect();
    let outcome = filter_meters(aligned, filter.max_missing, filter.min_std);
    let meters = outcome
        .kept
        .into_iter()
        .map(impute_locf)
        .collect::<Result<Vec<_>>>()?;

    let dataset = GroupDataset {
        group_id: group_id.to_owned(),
        meters,
        weather,
        aggregate: Vec::new(),
    };
    // A group emptied by filtering has nothing to validate; callers warn.
    let violations = if dataset.meters.is_empty() { Vec::new() } else { validate_group(&dataset) };
    if !violations.is_empty() {
        return Err(IngestError::Invalid {
            group_id: group_id.to_owned(),
            violations: violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        });
    }
    Ok(LoadedGroup {
        dataset,
        dropped: outcome.dropped,
    })
}

/// Reads the three files and returns the filtered, imputed members of `group_id`.
pub fn load_group(
    meter_file: &Path,
    weather_file: &Path,
    segment_file: &Path,
    group_id: &str,
) -> Result<GroupDataset> {
    let inputs = RawInputs::read(meter_file, weather_file, segment_file)?;
    Ok(assemble_group(&inputs, group_id, FilterConfig::default())?.dataset)
}

/// Writes a group as JSON. Floats are written in shortest round-trip form,
/// so [`load_archive`] gives back an identical dataset.
pub fn save_archive(group: &GroupDataset, path: &Path) -> Result<()> {
    let io = |source| IngestError::Io { path: path.to_owned(), source };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, group).map_err(|source| IngestError::Archive { path: path.to_owned(), source })?;
    std::io::Write::flush(&mut w).map_err(io)
}

/// Reads a group written by [`save_archive`] and re-checks its invariants.
pub fn load_archive(path: &Path) -> Result<GroupDataset> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.to_owned(), source })?;
    let group: GroupDataset = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|source| IngestError::Archive { path: path.to_owned(), source })?;
    let violations = validate_group(&group);
    if !violations.is_empty() {
        return Err(IngestError::Invalid {
            group_id: group.group_id.clone(),
            violations: violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        });
    }
    Ok(group)
}
