//! Pooled LSTM forecaster: one network per group of meters.
//!
//! Topology (defaults): LSTM(33 → 32) → LSTM(32 → 16) → Dense(16 → 24), with
//! the dense head reading the last hidden state of the second layer. Trained
//! by backpropagation through time on mean absolute error with Adam.

mod adam;
mod gradcheck;
mod io;
mod network;
mod train;

pub use adam::{adam_step, Adam, AdamConfig};
pub use gradcheck::{gradient_check, gradient_check_on, GradCheck, REL_FLOOR, TINY};
pub use io::{load_model, read_model, save_model, write_model, ModelFileError, FORMAT_VERSION, MAGIC};
pub use network::{
    lstm_cell_forward, mae_loss, DenseWeights, DropoutMasks, DropoutRates, LstmLayerWeights, Mode, Network,
};
pub use train::{fit_network, train, TrainOutcome};

use crate::features::{inverse_transform, FeatureError, HistoryView, MeanStd, NormStats, FEATURE_ORDER};
use crate::types::{ForecastSet, MethodId, HORIZON, N_FEATURES, TIMESTEPS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation at timestep {timestep}")]
    NonFinite { timestep: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training tensor is empty")]
    EmptyTensor,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
}

pub type Result<T> = std::result::Result<T, LstmError>;

/// Layer sizes of the stacked network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub horizon: usize,
    pub timesteps: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            input: N_FEATURES,
            hidden1: 32,
            hidden2: 16,
            horizon: HORIZON,
            timesteps: TIMESTEPS,
        }
    }
}

impl Topology {
    /// `4H(I + H + 1)` per LSTM layer plus `(H2 + 1) * horizon` for the head.
    pub fn param_count(&self) -> usize {
        let lstm = |i: usize, h: usize| 4 * h * (i + h + 1);
        lstm(self.input, self.hidden1) + lstm(self.hidden1, self.hidden2) + (self.hidden2 + 1) * self.horizon
    }
}

pub fn param_count(model: &LstmModel) -> usize {
    model.network.param_count()
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Rows of the feature tensor per mini-batch; the last batch may be smaller.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: DropoutRates,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 40,
            batch_size: 1000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            dropout: DropoutRates::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LstmError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, r) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.dropout.as_array().iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad(format!("dropout rates {:?} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Training details stored in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub train_hours: usize,
    pub train_meter_ids: Vec<String>,
}

/// A trained network with everything needed to turn its output into kWh.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub topology: Topology,
    pub network: Network,
    /// Stats of the training meters, the aggregate and the weather channels.
    pub norm_stats: NormStats,
    pub feature_order: String,
    pub meta: TrainingMeta,
}

impl LstmModel {
    pub fn new(network: Network, norm_stats: NormStats, meta: TrainingMeta) -> Self {
        Self {
            topology: network.topology(TIMESTEPS),
            network,
            norm_stats,
            feature_order: FEATURE_ORDER.to_owned(),
            meta,
        }
    }

    /// Stats for `meter_id`: the stored ones for a training meter, otherwise
    /// fitted on `history` (the meter's own pre-origin consumption).
    pub fn meter_stats(&self, meter_id: &str, history: &[f64]) -> Result<MeanStd> {
        match self.norm_stats.meters.get(meter_id) {
            Some(s) => Ok(*s),
            None => Ok(MeanStd::of_log1p(meter_id, history)?),
        }
    }
}

/// 24-hour-ahead kWh forecast from the window that ends at the view's origin.
pub fn predict_24h(
    model: &LstmModel,
    meter_id: &str,
    history: &HistoryView<'_>,
    meter_stats: &MeanStd,
) -> Result<ForecastSet> {
    let window = history.window(meter_stats, &model.norm_stats)?;
    let y = model.network.predict(window.view())?;
    let kwh = y.iter().map(|v| inverse_transform(*v, meter_stats)).collect();
    Ok(ForecastSet::new(
        MethodId::Lstm,
        meter_id,
        history.origin_timestamp().date(),
        kwh,
    ))
}
