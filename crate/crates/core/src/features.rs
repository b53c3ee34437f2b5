//! Normalization and windowing of a group into network-ready tensors.
//!
//! Each hour becomes a 33-wide feature row:
//!
//! | index  | feature                                            |
//! |--------|----------------------------------------------------|
//! | 0      | own consumption, `(log1p(z) - mu_n) / sigma_n`      |
//! | 1      | group aggregate, same transform with group stats   |
//! | 2      | apparent temperature, standardized                 |
//! | 3      | humidity, standardized                             |
//! | 4..=26 | hour-of-day dummies for hours 1..=23               |
//! | 27..=32| day-of-week dummies for Tuesday..=Sunday           |
//!
//! A sample pairs the 24 rows before an origin hour with the meter's 24
//! normalized consumption values from the origin onwards.

use crate::types::{hour_at, CalendarVector, GroupDataset, HORIZON, N_FEATURES, TIMESTEPS};
use chrono::NaiveDateTime;
use ndarray::{s, Array2, Array3, ArrayViewMut1};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;
use thiserror::Error;

/// Descriptor of the feature layout above; stored in model files.
pub const FEATURE_ORDER: &str = "v1:consumption,aggregate,apparent_temperature,humidity,\
hour_01..hour_23,dow_tue..dow_sun";

pub const CONSUMPTION: usize = 0;
pub const AGGREGATE: usize = 1;
pub const TEMPERATURE: usize = 2;
pub const HUMIDITY: usize = 3;
pub const CALENDAR: usize = 4;

/// Below this a standard deviation is treated as zero.
const MIN_SIGMA: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("series `{0}` has zero variance over the training window")]
    DegenerateStats(String),
    #[error("need at least {needed} hours, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("hour range {start}..{end} exceeds the {len}-hour series")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("training meter set is empty")]
    EmptyTrainingSet,
    #[error("unknown meter `{0}`")]
    UnknownMeter(String),
    #[error("group aggregate has not been computed")]
    MissingAggregate,
    #[error("stride must be positive")]
    ZeroStride,
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Location and scale of one series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mu: f64,
    pub sigma: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        Self { mu, sigma: var.sqrt() }
    }

    /// Stats of `log1p` consumption; errors when the variance vanishes.
    pub fn of_log1p(name: &str, kwh: &[f64]) -> Result<Self> {
        let logs: Vec<f64> = kwh.iter().map(|z| z.ln_1p()).collect();
        let st = Self::of(&logs);
        if !(st.sigma > MIN_SIGMA) {
            return Err(FeatureError::DegenerateStats(name.to_owned()));
        }
        Ok(st)
    }

    /// Plain standardization stats; a constant series keeps scale 1.
    fn of_exogenous(values: &[f64]) -> Self {
        let st = Self::of(values);
        if st.sigma > MIN_SIGMA {
            st
        } else {
            Self { mu: st.mu, sigma: 1.0 }
        }
    }

    fn standardize(&self, x: f64) -> f64 {
        (x - self.mu) / self.sigma
    }
}

/// `(log1p(z) - mu) / sigma`.
pub fn transform(z: f64, stats: &MeanStd) -> Result<f64> {
    if !(stats.sigma > 0.0) {
        return Err(FeatureError::DegenerateStats("transform".into()));
    }
    Ok((z.ln_1p() - stats.mu) / stats.sigma)
}

/// Inverse of [`transform`], clamped so the result is a valid kWh value.
pub fn inverse_transform(y: f64, stats: &MeanStd) -> f64 {
    (y * stats.sigma + stats.mu).exp_m1().max(0.0)
}

/// Normalization statistics fitted on the training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub meters: BTreeMap<String, MeanStd>,
    pub aggregate: MeanStd,
    pub temperature: MeanStd,
    pub humidity: MeanStd,
}

impl NormStats {
    pub fn meter(&self, meter_id: &str) -> Result<&MeanStd> {
        self.meters
            .get(meter_id)
            .ok_or_else(|| FeatureError::UnknownMeter(meter_id.to_owned()))
    }

    /// Keeps only the listed meters.
    pub fn restricted_to(&self, meter_ids: &[String]) -> Self {
        Self {
            meters: self
                .meters
                .iter()
                .filter(|(k, _)| meter_ids.contains(k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            ..self.clone()
        }
    }
}

/// Fits every statistic on the first `train_hours` hours only.
pub fn fit_norm_stats(group: &GroupDataset, train_hours: usize) -> Result<NormStats> {
    let len = group.n_hours();
    if train_hours > len {
        return Err(FeatureError::OutOfRange { start: 0, end: train_hours, len });
    }
    if train_hours < 2 {
        return Err(FeatureError::TooShort { needed: 2, got: train_hours });
    }
    if group.aggregate.len() != len {
        return Err(FeatureError::MissingAggregate);
    }
    let meters = group
        .meters
        .iter()
        .map(|m| Ok((m.meter_id.clone(), MeanStd::of_log1p(&m.meter_id, &m.values[..train_hours])?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(NormStats {
        meters,
        aggregate: MeanStd::of_log1p("aggregate", &group.aggregate[..train_hours])?,
        temperature: MeanStd::of_exogenous(&group.weather.apparent_temperature[..train_hours]),
        humidity: MeanStd::of_exogenous(&group.weather.humidity[..train_hours]),
    })
}

/// Pointwise sum of the training meters' consumption. Other meters never
/// contribute.
pub fn compute_aggregate(group: &GroupDataset, training_meter_ids: &[String]) -> Result<Vec<f64>> {
    if training_meter_ids.is_empty() {
        return Err(FeatureError::EmptyTrainingSet);
    }
    let mut agg = vec![0.0; group.n_hours()];
    for id in training_meter_ids {
        let m = group.meter(id).ok_or_else(|| FeatureError::UnknownMeter(id.clone()))?;
        for (a, v) in agg.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    Ok(agg)
}

/// Per-sample bookkeeping: which meter and which origin hour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    /// Index into [`FeatureTensor::meter_ids`].
    pub meter: usize,
    pub origin: usize,
}

/// Design tensor `(samples, 24, 33)` and target matrix `(samples, 24)`.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    pub design: Array3<f64>,
    pub target: Array2<f64>,
    pub meter_ids: Vec<String>,
    pub index: Vec<SampleKey>,
}

impl FeatureTensor {
    pub fn n_samples(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Writes the 32 meter-independent features (indices 1..33) of one hour.
fn fill_shared(
    mut row: ArrayViewMut1<f64>,
    ts: NaiveDateTime,
    aggregate: f64,
    temperature: f64,
    humidity: f64,
    stats: &NormStats,
) -> Result<()> {
    row[AGGREGATE] = transform(aggregate, &stats.aggregate)?;
    row[TEMPERATURE] = stats.temperature.standardize(temperature);
    row[HUMIDITY] = stats.humidity.standardize(humidity);
    let cal = CalendarVector::from_timestamp(ts);
    cal.write_into(row.slice_mut(s![CALENDAR..]).as_slice_mut().expect("contiguous row"));
    Ok(())
}

/// Builds every (window, target) pair with origin `t` such that
/// `hours.start + 24 <= t` and `t + 24 <= hours.end`, stepping by `stride`.
pub fn build_windows(
    group: &GroupDataset,
    stats: &NormStats,
    meter_ids: &[String],
    hours: Range<usize>,
    stride: usize,
) -> Result<FeatureTensor> {
    if stride == 0 {
        return Err(FeatureError::ZeroStride);
    }
    let len = group.n_hours();
    if hours.end > len || hours.start > hours.end {
        return Err(FeatureError::OutOfRange { start: hours.start, end: hours.end, len });
    }
    let span = hours.end - hours.start;
    if span < TIMESTEPS + HORIZON {
        return Err(FeatureError::TooShort { needed: TIMESTEPS + HORIZON, got: span });
    }
    if group.aggregate.len() != len {
        return Err(FeatureError::MissingAggregate);
    }

    let start = group.start();
    let mut shared = Array2::<f64>::zeros((span, N_FEATURES));
    for (k, h) in hours.clone().enumerate() {
        fill_shared(
            shared.row_mut(k),
            hour_at(start, h),
            group.aggregate[h],
            group.weather.apparent_temperature[h],
            group.weather.humidity[h],
            stats,
        )?;
    }

    let origins: Vec<usize> = (TIMESTEPS..=span - HORIZON).step_by(stride).collect();
    let n = origins.len() * meter_ids.len();
    let mut design = Array3::<f64>::zeros((n, TIMESTEPS, N_FEATURES));
    let mut target = Array2::<f64>::zeros((n, HORIZON));
    let mut index = Vec::with_capacity(n);

    let mut sample = 0;
    for (mi, id) in meter_ids.iter().enumerate() {
        let meter = group.meter(id).ok_or_else(|| FeatureError::UnknownMeter(id.clone()))?;
        let ms = stats.meter(id)?;
        let own = meter.values[hours.clone()]
            .iter()
            .map(|z| transform(*z, ms))
            .collect::<Result<Vec<f64>>>()?;
        for &t in &origins {
            let mut d = design.slice_mut(s![sample, .., ..]);
            d.assign(&shared.slice(s![t - TIMESTEPS..t, ..]));
            for k in 0..TIMESTEPS {
                d[[k, CONSUMPTION]] = own[t - TIMESTEPS + k];
            }
            target
                .slice_mut(s![sample, ..])
                .assign(&ndarray::ArrayView1::from(&own[t..t + HORIZON]));
            index.push(SampleKey { meter: mi, origin: hours.start + t });
            sample += 1;
        }
    }
    Ok(FeatureTensor {
        design,
        target,
        meter_ids: meter_ids.to_vec(),
        index,
    })
}

/// Everything known about one meter strictly before a forecast origin.
///
/// All slices end at the origin, so a window built from a view cannot see
/// the hours being forecast.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    /// Timestamp of index 0 of every slice.
    pub start: NaiveDateTime,
    pub consumption: &'a [f64],
    pub aggregate: &'a [f64],
    pub temperature: &'a [f64],
    pub humidity: &'a [f64],
}

impl<'a> HistoryView<'a> {
    /// View of `meter_id` in `group` truncated at hour `origin`.
    pub fn of_group(group: &'a GroupDataset, meter_id: &str, origin: usize) -> Result<Self> {
        let m = group
            .meter(meter_id)
            .ok_or_else(|| FeatureError::UnknownMeter(meter_id.to_owned()))?;
        let len = group.n_hours();
        if origin > len {
            return Err(FeatureError::OutOfRange { start: 0, end: origin, len });
        }
        if group.aggregate.len() != len {
            return Err(FeatureError::MissingAggregate);
        }
        Ok(Self {
            start: group.start(),
            consumption: &m.values[..origin],
            aggregate: &group.aggregate[..origin],
            temperature: &group.weather.apparent_temperature[..origin],
            humidity: &group.weather.humidity[..origin],
        })
    }

    /// The origin hour, i.e. the number of hours in the view.
    pub fn origin(&self) -> usize {
        self.consumption.len()
    }

    pub fn origin_timestamp(&self) -> NaiveDateTime {
        hour_at(self.start, self.origin())
    }

    /// The 24 × 33 window ending right before the origin.
    pub fn window(&self, meter: &MeanStd, stats: &NormStats) -> Result<Array2<f64>> {
        let origin = self.origin();
        if origin < TIMESTEPS {
            return Err(FeatureError::TooShort { needed: TIMESTEPS, got: origin });
        }
        let mut w = Array2::<f64>::zeros((TIMESTEPS, N_FEATURES));
        for k in 0..TIMESTEPS {
            let h = origin - TIMESTEPS + k;
            let mut row = w.row_mut(k);
            fill_shared(
                row.view_mut(),
                hour_at(self.start, h),
                self.aggregate[h],
                self.temperature[h],
                self.humidity[h],
                stats,
            )?;
            row[CONSUMPTION] = transform(self.consumption[h], meter)?;
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{MeterSeries, WeatherSeries};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn start() -> NaiveDateTime {
        NaiveDateTime::parse_from_str("2013-01-07 00:00", "%Y-%m-%d %H:%M").unwrap()
    }

    fn group_from(values: Vec<Vec<f64>>) -> GroupDataset {
        let n = values[0].len();
        GroupDataset {
            group_id: "g".into(),
            meters: values
                .into_iter()
                .enumerate()
                .map(|(i, v)| MeterSeries::new(format!("m{i}"), "g", start(), v))
                .collect(),
            weather: WeatherSeries {
                start: start(),
                apparent_temperature: (0..n).map(|h| 5.0 + (h % 7) as f64).collect(),
                humidity: (0..n).map(|h| 0.5 + 0.04 * (h % 5) as f64).collect(),
            },
            aggregate: Vec::new(),
        }
    }

    fn wavy(n: usize, phase: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|h| scale * (1.0 + 0.5 * (((h + phase) % 24) as f64 / 4.0).sin()) + 0.01 * (h % 3) as f64).collect()
    }

    fn prepared(values: Vec<Vec<f64>>, train_hours: usize) -> (GroupDataset, NormStats) {
        let mut g = group_from(values);
        let ids = g.meter_ids();
        g.aggregate = compute_aggregate(&g, &ids).unwrap();
        let stats = fit_norm_stats(&g, train_hours).unwrap();
        (g, stats)
    }

    #[test]
    fn transform_examples() {
        let unit = MeanStd { mu: 0.0, sigma: 1.0 };
        assert_eq!(transform(0.0, &unit).unwrap(), 0.0);
        let two = MeanStd { mu: 0.0, sigma: 2.0 };
        assert_abs_diff_eq!(transform(std::f64::consts::E - 1.0, &two).unwrap(), 0.5, epsilon = 1e-15);
        assert!(transform(1.0, &MeanStd { mu: 0.0, sigma: 0.0 }).is_err());
        let st = MeanStd { mu: 0.3, sigma: 0.7 };
        for z in [0.0, 0.5, 7.3] {
            assert_abs_diff_eq!(inverse_transform(transform(z, &st).unwrap(), &st), z, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_transform_examples() {
        let st = MeanStd { mu: 0.4, sigma: 1.3 };
        assert_eq!(inverse_transform(0.0, &st), 0.4f64.exp() - 1.0);
        assert_eq!(inverse_transform(-1e6, &st), 0.0);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let mut g = group_from(vec![vec![1.0; 60]]);
        g.aggregate = vec![2.0; 60];
        let err = fit_norm_stats(&g, 48).unwrap_err();
        assert_eq!(err, FeatureError::DegenerateStats("m0".into()));
    }

    #[test]
    fn stats_match_direct_computation() {
        // Oracle: mean and population variance written out longhand.
        let a = vec![0.2, 0.9, 1.4, 0.0, 2.5, 0.7, 9.0, 9.0];
        let b = vec![1.0, 1.1, 0.3, 0.8, 0.6, 0.2, 9.0, 9.0];
        let (_, st) = prepared(vec![a.clone(), b.clone()], 6);
        for (id, v) in [("m0", &a), ("m1", &b)] {
            let mut sum = 0.0;
            for x in &v[..6] {
                sum += (1.0 + x).ln();
            }
            let mean = sum / 6.0;
            let mut ss = 0.0;
            for x in &v[..6] {
                ss += ((1.0 + x).ln() - mean) * ((1.0 + x).ln() - mean);
            }
            let s = st.meter(id).unwrap();
            assert_abs_diff_eq!(s.mu, mean, epsilon = 1e-14);
            assert_abs_diff_eq!(s.sigma, (ss / 6.0).sqrt(), epsilon = 1e-14);
        }
    }

    #[test]
    fn stats_ignore_the_test_period() {
        let (mut g, st) = prepared(vec![wavy(100, 0, 1.0), wavy(100, 5, 2.0)], 60);
        for m in &mut g.meters {
            for v in &mut m.values[60..] {
                *v *= 3.0;
            }
        }
        for a in &mut g.aggregate[60..] {
            *a += 10.0;
        }
        assert_eq!(fit_norm_stats(&g, 60).unwrap(), st);
    }

    #[test]
    fn aggregate_sums_training_meters_only() {
        let g = group_from(vec![vec![1.0; 50], vec![2.0; 50], vec![7.0; 50]]);
        assert_eq!(compute_aggregate(&g, &["m0".into(), "m1".into()]).unwrap(), vec![3.0; 50]);
        assert_eq!(compute_aggregate(&g, &["m2".into()]).unwrap(), vec![7.0; 50]);
        assert_eq!(compute_aggregate(&g, &[]), Err(FeatureError::EmptyTrainingSet));
    }

    #[test]
    fn window_counts() {
        let (g, st) = prepared(vec![wavy(48, 0, 1.0)], 48);
        let t = build_windows(&g, &st, &g.meter_ids(), 0..48, 1).unwrap();
        assert_eq!(t.n_samples(), 1);
        assert_eq!(t.design.dim(), (1, 24, 33));
        let ms = st.meter("m0").unwrap();
        for k in 0..24 {
            assert_eq!(t.design[[0, k, 0]], transform(g.meters[0].values[k], ms).unwrap());
            assert_eq!(t.target[[0, k]], transform(g.meters[0].values[24 + k], ms).unwrap());
        }

        let (g, st) = prepared(vec![wavy(72, 0, 1.0)], 72);
        assert_eq!(build_windows(&g, &st, &g.meter_ids(), 0..72, 1).unwrap().n_samples(), 72 - 48 + 1);

        let (g, st) = prepared(vec![wavy(48, 0, 1.0), wavy(48, 3, 1.5)], 48);
        let t = build_windows(&g, &st, &g.meter_ids(), 0..48, 1).unwrap();
        assert_eq!(t.n_samples(), 2);
        assert_ne!(t.index[0].meter, t.index[1].meter);

        assert!(matches!(
            build_windows(&g, &st, &g.meter_ids(), 0..47, 1),
            Err(FeatureError::TooShort { .. })
        ));
    }

    #[test]
    fn calendar_features_ignore_the_meter() {
        let (g, st) = prepared(vec![wavy(96, 0, 1.0), wavy(96, 7, 3.0)], 96);
        let t = build_windows(&g, &st, &g.meter_ids(), 0..96, 1).unwrap();
        let per_meter = t.n_samples() / 2;
        for s in 0..per_meter {
            let a = t.design.slice(s![s, .., 1..]);
            let b = t.design.slice(s![s + per_meter, .., 1..]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn history_window_matches_tensor_rows() {
        let (g, st) = prepared(vec![wavy(120, 2, 1.0), wavy(120, 9, 0.5)], 120);
        let t = build_windows(&g, &st, &g.meter_ids(), 0..120, 1).unwrap();
        for (s, key) in t.index.iter().enumerate().step_by(13) {
            let id = &t.meter_ids[key.meter];
            let view = HistoryView::of_group(&g, id, key.origin).unwrap();
            let w = view.window(st.meter(id).unwrap(), &st).unwrap();
            assert_eq!(w, t.design.slice(s![s, .., ..]));
        }
    }

    proptest! {
        #[test]
        fn normalized_training_window_is_standard(
            vals in proptest::collection::vec(0.0f64..8.0, 60..120),
            train in 48usize..60,
        ) {
            let mut g = group_from(vec![vals.clone()]);
            g.aggregate = vals.clone();
            prop_assume!(MeanStd::of_log1p("x", &vals[..train]).is_ok());
            let st = fit_norm_stats(&g, train).unwrap();
            let ms = st.meter("m0").unwrap();
            let z: Vec<f64> = vals[..train].iter().map(|v| transform(*v, ms).unwrap()).collect();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let std = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-9);
        }

        #[test]
        fn training_tensor_ignores_later_hours(
            vals in proptest::collection::vec(0.1f64..5.0, 96..130),
            bump in 0.5f64..4.0,
        ) {
            let cut = 80;
            let mut g = group_from(vec![vals.clone()]);
            g.aggregate = vals.clone();
            let st = fit_norm_stats(&g, cut).unwrap();
            let a = build_windows(&g, &st, &g.meter_ids(), 0..cut, 1).unwrap();
            for v in &mut g.meters[0].values[cut..] { *v += bump; }
            for v in &mut g.aggregate[cut..] { *v += bump; }
            for v in &mut g.weather.apparent_temperature[cut..] { *v -= bump; }
            let b = build_windows(&g, &st, &g.meter_ids(), 0..cut, 1).unwrap();
            prop_assert_eq!(a.design, b.design);
            prop_assert_eq!(a.target, b.target);
        }
    }
}
