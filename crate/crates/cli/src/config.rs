//! The run configuration file.
//!
//! One TOML file with optional `[filter]`, `[plan]`, `[train]`, `[backtest]`
//! and `[synth]` tables. Missing keys take their defaults; unknown tables
//! and keys are rejected so a typo cannot silently fall back to a default.

use anyhow::{Context, Result};
use loadcast::backtest::{BacktestConfig, PlanConfig};
use loadcast::ingestion::FilterConfig;
use loadcast::lstm::TrainConfig;
use loadcast::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub filter: FilterConfig,
    pub plan: PlanConfig,
    pub train: TrainConfig,
    pub backtest: BacktestConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    /// The named tables with defaults filled in, as TOML.
    pub fn render(&self, sections: &[&str]) -> String {
        let full = toml::Table::try_from(self).expect("config serializes to a table");
        let picked: toml::Table = full.into_iter().filter(|(k, _)| sections.contains(&k.as_str())).collect();
        toml::to_string(&picked).expect("table serializes")
    }

    pub fn echo(&self, sections: &[&str]) {
        eprintln!("# effective configuration\n{}", self.render(sections));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = RunConfig::parse("[train]\nepochs = 3\n[plan]\ntrain_meters = 4\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.plan.train_meters, Some(4));
        assert_eq!(cfg.plan.train_fraction, 0.8);
    }

    #[test]
    fn echo_shows_filled_defaults_and_reparses() {
        let cfg = RunConfig::parse("[train]\nepochs = 3\n").unwrap();
        let text = cfg.render(&["train", "plan"]);
        assert!(text.contains("epochs = 3"));
        assert!(text.contains("batch_size = 1000"));
        assert!(text.contains("learning_rate = 0.001"));
        assert!(!text.contains("[synth]"));
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.plan, cfg.plan);
    }

    #[test]
    fn typos_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::parse("[trian]\n").is_err());
        assert!(RunConfig::parse("[train]\nlearning_rate = -1.0\n").is_err());
        assert!(RunConfig::parse("[synth]\nzero_inflation = 2.0\n").is_err());
        assert!(RunConfig::parse("[backtest]\nmethods = [\"prophet\"]\n").is_err());
    }

    #[test]
    fn synth_start_parses_as_timestamp() {
        let cfg = RunConfig::parse("[synth]\nstart = \"2014-03-01T00:00:00\"\nn_meters = 2\n").unwrap();
        assert_eq!(cfg.synth.start.to_string(), "2014-03-01 00:00:00");
    }
}
