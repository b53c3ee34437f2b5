//! Univariate benchmarks: seasonal naive and automatic seasonal ARIMA.

mod arima;
mod naive;
pub mod optim;

pub use arima::{
    arima_forecast, difference, fit_arima_auto, fit_arima_over, fit_order, forecast_transformed, one_step_predictions,
    ArimaOrder, ArimaSpec, AutoArima, COMMON_START, MIN_FIT_HOURS, SEASON,
};
pub use naive::{seasonal_naive, seasonal_naive_forecast};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("history too short: need {needed} hours, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("non-finite value at hour {index}")]
    NonFinite { index: usize },
    #[error("order {0} is outside the search box")]
    OrderOutOfRange(ArimaOrder),
}

pub type Result<T> = std::result::Result<T, BenchmarkError>;
