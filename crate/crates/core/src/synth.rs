//! Seeded synthetic smart-meter groups.
//!
//! Each meter follows
//!
//! ```text
//! z_{m,t} = max(0, s_m · (base + daily(h_t) + weekly(t) + β_m (T_t − T̄) + ε_{m,t}))
//! ```
//!
//! where `s_m` is a log-normal meter scale, so a meter's mean and standard
//! deviation move together. The noise `ε` is AR(1) and `T` is the group's
//! shared temperature. Contiguous zero spells of geometric length are laid
//! over the result.

use crate::ingestion::{format_timestamp, METER_HEADER, SEGMENT_HEADER, WEATHER_HEADER};
use crate::types::{hour_at, weekday_index, GroupDataset, MeterSeries, WeatherSeries};
use chrono::{NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub group_id: String,
    pub n_meters: usize,
    pub n_hours: usize,
    pub start: NaiveDateTime,
    /// Level of the unscaled profile.
    pub base_load: f64,
    /// Height of the morning and evening peaks.
    pub daily_amplitude: f64,
    /// Weekend uplift (weekdays sit at −0.4 of it).
    pub weekly_amplitude: f64,
    /// Mean per-°C response; each meter draws its own within ±50%.
    pub temperature_sensitivity: f64,
    /// Innovation std of the consumption noise.
    pub noise_std: f64,
    /// AR(1) coefficient of the consumption noise.
    pub noise_ar: f64,
    /// Log-space std of the meter scale `s_m`.
    pub scale_log_std: f64,
    /// Median meter scale in kWh.
    pub scale_median: f64,
    /// Per-hour probability that a zero spell starts.
    pub zero_inflation: f64,
    /// Mean zero-spell length in hours.
    pub zero_spell_mean_hours: f64,
    pub temperature_mean: f64,
    pub temperature_daily_amplitude: f64,
    pub temperature_annual_amplitude: f64,
    /// Std of the AR(1) weather disturbance (0.95 persistence).
    pub weather_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            group_id: "synthetic".into(),
            n_meters: 100,
            n_hours: 8760,
            start: NaiveDate::from_ymd_opt(2013, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            base_load: 1.0,
            daily_amplitude: 1.0,
            weekly_amplitude: 0.2,
            temperature_sensitivity: -0.03,
            noise_std: 0.15,
            noise_ar: 0.7,
            scale_log_std: 0.5,
            scale_median: 0.25,
            zero_inflation: 0.0005,
            zero_spell_mean_hours: 36.0,
            temperature_mean: 10.0,
            temperature_daily_amplitude: 4.0,
            temperature_annual_amplitude: 6.0,
            weather_noise_std: 0.8,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_meters == 0 || self.n_hours == 0 {
            return bad("n_meters and n_hours must be positive".into());
        }
        for (name, v) in [
            ("base_load", self.base_load),
            ("daily_amplitude", self.daily_amplitude),
            ("weekly_amplitude", self.weekly_amplitude),
            ("noise_std", self.noise_std),
            ("scale_log_std", self.scale_log_std),
            ("temperature_daily_amplitude", self.temperature_daily_amplitude),
            ("temperature_annual_amplitude", self.temperature_annual_amplitude),
            ("weather_noise_std", self.weather_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and ≥ 0"));
            }
        }
        if !(self.scale_median > 0.0 && self.scale_median.is_finite()) {
            return bad(format!("scale_median = {} must be positive", self.scale_median));
        }
        if !(0.0..=1.0).contains(&self.zero_inflation) {
            return bad(format!("zero_inflation = {} outside [0, 1]", self.zero_inflation));
        }
        if !(self.noise_ar.abs() < 1.0) {
            return bad(format!("noise_ar = {} must satisfy |φ| < 1", self.noise_ar));
        }
        if !(self.zero_spell_mean_hours >= 1.0) {
            return bad("zero_spell_mean_hours must be at least 1".into());
        }
        if !self.temperature_mean.is_finite() || !self.temperature_sensitivity.is_finite() {
            return bad("temperature parameters must be finite".into());
        }
        Ok(())
    }
}

/// Circular Gaussian bump centred on `centre` o'clock.
fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let mut d = (hour - centre).abs();
    if d > 12.0 {
        d = 24.0 - d;
    }
    (-(d * d) / (2.0 * width * width)).exp()
}

/// Deterministic daily shape: morning and evening peaks over a night trough.
pub fn daily_profile(hour: u32) -> f64 {
    let h = hour as f64;
    0.6 * bump(h, 8.0, 1.5) + bump(h, 19.0, 2.0) - 0.35
}

/// Weekend days lifted by 1, weekdays lowered by 0.4.
pub fn weekly_profile(ts: NaiveDateTime) -> f64 {
    if weekday_index(ts) >= 5 {
        1.0
    } else {
        -0.4
    }
}

fn weather(cfg: &SynthConfig) -> WeatherSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut disturbance = 0.0;
    let mut temp = Vec::with_capacity(cfg.n_hours);
    let mut hum = Vec::with_capacity(cfg.n_hours);
    for t in 0..cfg.n_hours {
        let ts = hour_at(cfg.start, t);
        let h = ts.hour() as f64;
        disturbance = 0.95 * disturbance + cfg.weather_noise_std * unit.sample(&mut rng);
        let day_of_year = t as f64 / 8760.0;
        let daily = (2.0 * PI * (h - 9.0) / 24.0).sin();
        temp.push(
            cfg.temperature_mean
                + cfg.temperature_daily_amplitude * daily
                + cfg.temperature_annual_amplitude * -(2.0 * PI * day_of_year).cos()
                + disturbance,
        );
        hum.push((0.75 - 0.12 * daily - 0.02 * disturbance).clamp(0.0, 1.0));
    }
    WeatherSeries {
        start: cfg.start,
        apparent_temperature: temp,
        humidity: hum,
    }
}

fn meter(cfg: &SynthConfig, m: usize, weather: &WeatherSeries) -> MeterSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(m as u64 + 1);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let scale = LogNormal::new(cfg.scale_median.ln(), cfg.scale_log_std)
        .expect("validated scale")
        .sample(&mut rng);
    let beta = cfg.temperature_sensitivity * rng.random_range(0.5..1.5);
    let spell_end_p = 1.0 / cfg.zero_spell_mean_hours;

    let mut eps = 0.0;
    let mut in_spell = false;
    let mut values = Vec::with_capacity(cfg.n_hours);
    for t in 0..cfg.n_hours {
        let ts = hour_at(cfg.start, t);
        eps = cfg.noise_ar * eps + cfg.noise_std * unit.sample(&mut rng);
        let level = cfg.base_load
            + cfg.daily_amplitude * daily_profile(ts.hour())
            + cfg.weekly_amplitude * weekly_profile(ts)
            + beta * (weather.apparent_temperature[t] - cfg.temperature_mean)
            + eps;
        if cfg.zero_inflation > 0.0 {
            if in_spell {
                in_spell = rng.random::<f64>() >= spell_end_p;
            } else {
                in_spell = rng.random::<f64>() < cfg.zero_inflation;
            }
        }
        values.push(if in_spell { 0.0 } else { (scale * level).max(0.0) });
    }
    MeterSeries::new(format!("SYN{m:05}"), cfg.group_id.clone(), cfg.start, values)
}

/// Generates a group. Every meter draws from its own stream of the seed, so
/// the result does not depend on generation order.
pub fn generate_group(cfg: &SynthConfig) -> Result<GroupDataset, SynthError> {
    cfg.validate()?;
    let weather = weather(cfg);
    let meters = (0..cfg.n_meters).map(|m| meter(cfg, m, &weather)).collect();
    Ok(GroupDataset {
        group_id: cfg.group_id.clone(),
        meters,
        weather,
        aggregate: Vec::new(),
    })
}

/// Writes `meters.csv`, `weather.csv` and `segments.csv` in the ingestion
/// formats, with values at full precision.
pub fn write_ingestion_files(group: &GroupDataset, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("meters.csv"))?;
    w.write_record(METER_HEADER)?;
    for m in &group.meters {
        for (t, v) in m.values.iter().enumerate() {
            w.write_record([&m.meter_id, &format_timestamp(hour_at(m.start, t)), &v.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("weather.csv"))?;
    w.write_record(WEATHER_HEADER)?;
    let ws = &group.weather;
    for t in 0..ws.len() {
        w.write_record([
            format_timestamp(hour_at(ws.start, t)),
            ws.apparent_temperature[t].to_string(),
            ws.humidity[t].to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("segments.csv"))?;
    w.write_record(SEGMENT_HEADER)?;
    for m in &group.meters {
        w.write_record([&m.meter_id, &group.group_id])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::seasonal_naive;
    use crate::ingestion::load_group;
    use crate::types::validate_group;
    use proptest::prelude::*;

    fn quiet(weekly: f64) -> SynthConfig {
        SynthConfig {
            n_meters: 4,
            n_hours: 24 * 7 * 4,
            weekly_amplitude: weekly,
            noise_std: 0.0,
            zero_inflation: 0.0,
            temperature_annual_amplitude: 0.0,
            weather_noise_std: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noise_free_series_are_periodic() {
        let g = generate_group(&quiet(0.2)).unwrap();
        for m in &g.meters {
            for t in 168..m.values.len() {
                assert_eq!(m.values[t], m.values[t - 168]);
            }
        }
        let g = generate_group(&quiet(0.0)).unwrap();
        for m in &g.meters {
            for t in 24..m.values.len() {
                assert_eq!(m.values[t], m.values[t - 24]);
            }
            // Seasonal naive is exact from day 2 on.
            for day in 1..m.values.len() / 24 {
                let f = seasonal_naive(&m.values[..day * 24]).unwrap();
                assert_eq!(f, m.values[day * 24..day * 24 + 24].to_vec());
            }
        }
    }

    #[test]
    fn same_seed_same_group() {
        let cfg = SynthConfig { n_meters: 5, n_hours: 500, ..SynthConfig::default() };
        assert_eq!(generate_group(&cfg).unwrap(), generate_group(&cfg).unwrap());
        let other = generate_group(&SynthConfig { seed: 7, ..cfg.clone() }).unwrap();
        assert_ne!(generate_group(&cfg).unwrap(), other);
    }

    #[test]
    fn meter_mean_and_std_are_proportional() {
        let g = generate_group(&SynthConfig { n_meters: 100, n_hours: 24 * 120, ..SynthConfig::default() }).unwrap();
        let (means, stds): (Vec<f64>, Vec<f64>) = g
            .meters
            .iter()
            .map(|m| {
                let n = m.values.len() as f64;
                let mu = m.values.iter().sum::<f64>() / n;
                let var = m.values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
                (mu, var.sqrt())
            })
            .unzip();
        let corr = pearson(&means, &stds);
        assert!(corr > 0.9, "correlation {corr}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn zero_spells_are_contiguous_blocks() {
        let cfg = SynthConfig {
            n_meters: 3,
            n_hours: 5000,
            zero_inflation: 0.01,
            zero_spell_mean_hours: 20.0,
            base_load: 3.0,
            ..SynthConfig::default()
        };
        let g = generate_group(&cfg).unwrap();
        let zeros: usize = g.meters.iter().map(|m| m.values.iter().filter(|v| **v == 0.0).count()).sum();
        let runs: usize = g
            .meters
            .iter()
            .map(|m| m.values.windows(2).filter(|w| w[0] != 0.0 && w[1] == 0.0).count())
            .sum();
        assert!(runs > 0);
        let mean_run = zeros as f64 / runs as f64;
        assert!(mean_run > 10.0 && mean_run < 35.0, "mean spell {mean_run}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let d = SynthConfig::default();
        assert!(SynthConfig { zero_inflation: 1.5, ..d.clone() }.validate().is_err());
        assert!(SynthConfig { daily_amplitude: -1.0, ..d.clone() }.validate().is_err());
        assert!(SynthConfig { noise_ar: 1.0, ..d.clone() }.validate().is_err());
        assert!(SynthConfig { n_meters: 0, ..d }.validate().is_err());
    }

    #[test]
    fn files_round_trip_through_ingestion() {
        let cfg = SynthConfig { n_meters: 3, n_hours: 24 * 10, ..SynthConfig::default() };
        let g = generate_group(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_ingestion_files(&g, dir.path()).unwrap();
        let back = load_group(
            &dir.path().join("meters.csv"),
            &dir.path().join("weather.csv"),
            &dir.path().join("segments.csv"),
            &cfg.group_id,
        )
        .unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_is_valid(seed in 0u64..1000, noise in 0.0f64..1.0, zi in 0.0f64..0.05) {
            let cfg = SynthConfig { n_meters: 3, n_hours: 400, seed, noise_std: noise, zero_inflation: zi, ..SynthConfig::default() };
            let g = generate_group(&cfg).unwrap();
            prop_assert!(g.meters.iter().all(|m| m.values.iter().all(|v| v.is_finite() && *v >= 0.0)));
            prop_assert!(g.weather.humidity.iter().all(|h| (0.0..=1.0).contains(h)));
            prop_assert!(validate_group(&g).is_empty());
        }
    }
}
