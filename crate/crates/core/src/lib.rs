//! Short-term load forecasting for groups of smart meters.
//!
//! One LSTM is trained per group on the pooled windows of its training
//! meters and then forecasts the next 24 hours for any meter of the group,
//! including meters it never saw. Seasonal naive and an automatic seasonal
//! ARIMA serve as benchmarks inside a rolling-origin back-test.

pub mod backtest;
pub mod benchmarks;
pub mod features;
pub mod ingestion;
pub mod lstm;
pub mod synth;
pub mod types;

pub use types::*;
