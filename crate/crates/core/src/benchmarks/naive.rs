use super::{BenchmarkError, Result};
use crate::types::{ForecastSet, MeterSeries, MethodId, HORIZON};

/// Repeats the last 24 observed hours.
pub fn seasonal_naive(history: &[f64]) -> Result<Vec<f64>> {
    if history.len() < HORIZON {
        return Err(BenchmarkError::TooShort {
            needed: HORIZON,
            got: history.len(),
        });
    }
    Ok(history[history.len() - HORIZON..].to_vec())
}

/// Seasonal naive forecast for the day starting at hour index `origin`,
/// using only hours before it.
pub fn seasonal_naive_forecast(series: &MeterSeries, origin: usize) -> Result<ForecastSet> {
    let end = origin.min(series.values.len());
    let values = seasonal_naive(&series.values[..end])?;
    Ok(ForecastSet::new(
        MethodId::Naive,
        series.meter_id.clone(),
        crate::types::hour_at(series.start, origin).date(),
        values,
    ))
}
