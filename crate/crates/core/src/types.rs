//! Core domain types shared by the whole pipeline.
//!
//! Consumption is hourly kWh in `f64`. A missing reading is stored as `NaN`
//! inside [`MeterSeries::values`] (see [`MISSING`]) and serialized as `null`.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Forecast horizon in hours.
pub const HORIZON: usize = 24;
/// Number of lagged hours in one input window.
pub const TIMESTEPS: usize = 24;
/// Width of one hourly feature row.
pub const N_FEATURES: usize = 33;

/// Missing-value marker used before imputation.
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

/// Timestamp of hour `offset` counted from `start`.
pub fn hour_at(start: NaiveDateTime, offset: usize) -> NaiveDateTime {
    start + Duration::hours(offset as i64)
}

/// One meter's hourly consumption history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterSeries {
    pub meter_id: String,
    pub group_id: String,
    pub start: NaiveDateTime,
    #[serde(with = "nullable_f64")]
    pub values: Vec<f64>,
}

impl MeterSeries {
    pub fn new(
        meter_id: impl Into<String>,
        group_id: impl Into<String>,
        start: NaiveDateTime,
        values: Vec<f64>,
    ) -> Self {
        Self {
            meter_id: meter_id.into(),
            group_id: group_id.into(),
            start,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| is_missing(**v)).count()
    }

    /// Exclusive end timestamp of the series.
    pub fn end(&self) -> NaiveDateTime {
        hour_at(self.start, self.values.len())
    }
}

/// Hourly weather aligned with the meter horizon of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub start: NaiveDateTime,
    pub apparent_temperature: Vec<f64>,
    pub humidity: Vec<f64>,
}

impl WeatherSeries {
    pub fn len(&self) -> usize {
        self.apparent_temperature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apparent_temperature.is_empty()
    }
}

/// Hour-of-day and day-of-week indicator variables.
///
/// Reference levels are hour 0 and Monday, so `hour_dummies[k]` flags hour
/// `k + 1` and `dow_dummies[k]` flags Tuesday + `k` days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarVector {
    pub hour_dummies: [u8; 23],
    pub dow_dummies: [u8; 6],
}

impl CalendarVector {
    pub fn from_timestamp(ts: NaiveDateTime) -> Self {
        let mut hour_dummies = [0u8; 23];
        let mut dow_dummies = [0u8; 6];
        let hour = ts.hour() as usize;
        if hour > 0 {
            hour_dummies[hour - 1] = 1;
        }
        let dow = ts.weekday().num_days_from_monday() as usize;
        if dow > 0 {
            dow_dummies[dow - 1] = 1;
        }
        Self {
            hour_dummies,
            dow_dummies,
        }
    }

    /// Writes the 29 indicators into `out` as 0.0 / 1.0.
    pub fn write_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), 29);
        for (o, d) in out.iter_mut().zip(self.hour_dummies.iter().chain(&self.dow_dummies)) {
            *o = f64::from(*d);
        }
    }
}

/// All data needed to train and evaluate one group model.
///
/// `aggregate` stays empty until the training split is known and
/// [`crate::features::compute_aggregate`] fills it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDataset {
    pub group_id: String,
    pub meters: Vec<MeterSeries>,
    pub weather: WeatherSeries,
    #[serde(default)]
    pub aggregate: Vec<f64>,
}

impl GroupDataset {
    /// Length of the common hourly horizon (0 for an empty group).
    pub fn n_hours(&self) -> usize {
        self.meters.first().map_or(0, MeterSeries::len)
    }

    pub fn start(&self) -> NaiveDateTime {
        self.meters.first().map_or(self.weather.start, |m| m.start)
    }

    pub fn meter(&self, meter_id: &str) -> Option<&MeterSeries> {
        self.meters.iter().find(|m| m.meter_id == meter_id)
    }

    pub fn meter_ids(&self) -> Vec<String> {
        self.meters.iter().map(|m| m.meter_id.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodId {
    Naive,
    Arima,
    Lstm,
}

impl MethodId {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Naive => "naive",
            MethodId::Arima => "arima",
            MethodId::Lstm => "lstm",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(MethodId::Naive),
            "arima" => Ok(MethodId::Arima),
            "lstm" => Ok(MethodId::Lstm),
            other => Err(format!("unknown method `{other}` (expected naive, arima or lstm)")),
        }
    }
}

/// 24 hourly kWh forecasts issued at midnight of `origin_day`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub method: MethodId,
    pub meter_id: String,
    pub origin_day: NaiveDate,
    pub values: Vec<f64>,
}

impl ForecastSet {
    /// Clamps every value at 0. Panics unless `values` holds exactly
    /// [`HORIZON`] finite numbers, since every producer guarantees that.
    pub fn new(
        method: MethodId,
        meter_id: impl Into<String>,
        origin_day: NaiveDate,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(values.len(), HORIZON, "a forecast set holds {HORIZON} values");
        assert!(values.iter().all(|v| v.is_finite()), "non-finite forecast value");
        Self {
            method,
            meter_id: meter_id.into(),
            origin_day,
            values: values.into_iter().map(|v| v.max(0.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    MisalignedStart,
    LengthMismatch,
    NonFiniteValue,
    NegativeValue,
    HumidityOutOfRange,
    WeatherMisaligned,
    AggregateLengthMismatch,
    GroupMismatch,
    DuplicateMeter,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::MisalignedStart => "misaligned start",
            ViolationKind::LengthMismatch => "length mismatch",
            ViolationKind::NonFiniteValue => "non-finite value",
            ViolationKind::NegativeValue => "negative value",
            ViolationKind::HumidityOutOfRange => "humidity out of range",
            ViolationKind::WeatherMisaligned => "weather misaligned",
            ViolationKind::AggregateLengthMismatch => "aggregate length mismatch",
            ViolationKind::GroupMismatch => "group mismatch",
            ViolationKind::DuplicateMeter => "duplicate meter",
        };
        f.write_str(s)
    }
}

/// One broken invariant. `meter_id` is `None` for group-level rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub meter_id: Option<String>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.meter_id {
            Some(id) => write!(f, "meter {id}: {} ({})", self.kind, self.detail),
            None => write!(f, "group: {} ({})", self.kind, self.detail),
        }
    }
}

/// Checks every invariant of an imputed group and reports each breach.
pub fn validate_group(dataset: &GroupDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |meter: Option<&str>, kind, detail: String| {
        out.push(Violation {
            meter_id: meter.map(str::to_owned),
            kind,
            detail,
        })
    };

    let start = dataset.start();
    let n_hours = dataset.n_hours();
    let mut seen = std::collections::HashSet::new();
    for m in &dataset.meters {
        let id = Some(m.meter_id.as_str());
        if !seen.insert(m.meter_id.as_str()) {
            push(id, ViolationKind::DuplicateMeter, "meter listed twice".into());
        }
        if m.group_id != dataset.group_id {
            push(
                id,
                ViolationKind::GroupMismatch,
                format!("tagged `{}`, group is `{}`", m.group_id, dataset.group_id),
            );
        }
        if m.start != start {
            push(
                id,
                ViolationKind::MisalignedStart,
                format!("starts at {}, group starts at {start}", m.start),
            );
        }
        if m.len() != n_hours {
            push(
                id,
                ViolationKind::LengthMismatch,
                format!("{} hours, group has {n_hours}", m.len()),
            );
        }
        if let Some(h) = m.values.iter().position(|v| !v.is_finite()) {
            push(id, ViolationKind::NonFiniteValue, format!("first at hour {h}"));
        }
        if let Some(h) = m.values.iter().position(|v| *v < 0.0) {
            push(id, ViolationKind::NegativeValue, format!("first at hour {h}"));
        }
    }

    let w = &dataset.weather;
    if w.start != start || w.len() != n_hours || w.humidity.len() != n_hours {
        push(
            None,
            ViolationKind::WeatherMisaligned,
            format!(
                "weather starts {} with {}/{} hours, meters start {start} with {n_hours}",
                w.start,
                w.apparent_temperature.len(),
                w.humidity.len()
            ),
        );
    }
    if let Some(h) = w.apparent_temperature.iter().position(|v| !v.is_finite()) {
        push(None, ViolationKind::NonFiniteValue, format!("temperature at hour {h}"));
    }
    if let Some(h) = w
        .humidity
        .iter()
        .position(|v| !(0.0..=1.0).contains(v))
    {
        push(
            None,
            ViolationKind::HumidityOutOfRange,
            format!("humidity {} at hour {h}", w.humidity[h]),
        );
    }
    if !dataset.aggregate.is_empty() && dataset.aggregate.len() != n_hours {
        push(
            None,
            ViolationKind::AggregateLengthMismatch,
            format!("{} aggregate hours, group has {n_hours}", dataset.aggregate.len()),
        );
    }
    out
}

/// Day of the week with Monday as 0.
pub fn weekday_index(ts: NaiveDateTime) -> usize {
    ts.weekday().num_days_from_monday() as usize
}

/// Serializes `NaN` as `null` so missing markers survive JSON.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(values.iter().map(|v| if v.is_nan() { None } else { Some(*v) }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }
}
