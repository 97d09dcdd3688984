//! Experiment configuration, read from a single JSON document.
//!
//! ```json
//! {
//!   "task":      { "kind": "regression-teacher", "input_dim": 16, ... },
//!   "scenario":  { "mode": "cross-silo", "clients": 5, "participants": 5 },
//!   "round":     { "rounds": 100, "local_epochs": 3, "batch_size": 16, "lr": 0.0003 },
//!   "quantizer": { "bits": 2, "block_size": 256 },
//!   "model":     { "hidden": [32, 32], "rank": 4 },
//!   "seeds":     [1, 2, 3, 4, 5]
//! }
//! ```
//!
//! Every section may be omitted and falls back to its defaults. Unknown keys
//! anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::lora::{Activation, Schedule};
use crate::protocol::{BitWidth, Weighting};
use crate::quantizer::DEFAULT_BLOCK_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioMode {
    /// Every client trains every round.
    CrossSilo,
    /// A random subset of `participants` clients trains each round.
    CrossDevice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: ScenarioMode,
    pub clients: usize,
    /// Defaults to `clients`.
    #[serde(default)]
    pub participants: Option<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: ScenarioMode::CrossSilo,
            clients: 5,
            participants: None,
        }
    }
}

impl ScenarioConfig {
    pub fn participants(&self) -> usize {
        self.participants.unwrap_or(self.clients)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.participants();
        if self.clients == 0 || c == 0 || c > self.clients {
            return Err(Error::Config(format!(
                "need 1 <= participants ({c}) <= clients ({})",
                self.clients
            )));
        }
        if self.mode == ScenarioMode::CrossSilo && c != self.clients {
            return Err(Error::Config(
                "cross-silo scenarios train every client each round".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weighting: Weighting,
    /// Rounds at which to measure proxy/global gradient alignment.
    pub alignment_rounds: Vec<usize>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_epochs: 3,
            batch_size: 16,
            lr: 3e-4,
            weighting: Weighting::Participants,
            alignment_rounds: Vec::new(),
        }
    }
}

impl RoundConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.batch_size == 0 {
            return Err(Error::Config("rounds and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub bits: BitWidth,
    pub block_size: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            bits: BitWidth::Bits(2),
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub rank: usize,
    /// Layer indices carrying adapters; `None` adapts every layer.
    pub adapted_layers: Option<Vec<usize>>,
    /// Full-parameter training of the backbone on the source task.
    pub pretrain: Schedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            rank: 4,
            adapted_layers: None,
            pretrain: Schedule {
                epochs: 30,
                batch_size: 32,
                lr: 0.05,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub round: RoundConfig,
    #[serde(default)]
    pub quantizer: QuantizerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            scenario: ScenarioConfig::default(),
            round: RoundConfig::default(),
            quantizer: QuantizerConfig::default(),
            model: ModelConfig::default(),
            seeds: default_seeds(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.task.input_dim)
            .chain(self.model.hidden.iter().copied())
            .chain(std::iter::once(self.task.output_dim))
            .collect()
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        match &self.model.adapted_layers {
            Some(layers) => layers.clone(),
            None => (0..self.model.hidden.len() + 1).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.scenario.validate()?;
        self.round.validate()?;
        if self.scenario.clients > self.task.train {
            return Err(Error::Config(format!(
                "{} clients but only {} training samples",
                self.scenario.clients, self.task.train
            )));
        }
        if let BitWidth::Bits(w) = self.quantizer.bits {
            if !(1..=crate::quantizer::MAX_BITS).contains(&w) {
                return Err(Error::Config(format!("unsupported bit width {w}")));
            }
        }
        if self.quantizer.block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if self.model.rank == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("rank and hidden widths must be positive".into()));
        }
        let layers = self.model.hidden.len() + 1;
        let widths = self.widths();
        for &l in &self.adapted_layers() {
            if l >= layers {
                return Err(Error::Config(format!("adapted layer {l} does not exist")));
            }
            if self.model.rank > widths[l].min(widths[l + 1]) {
                return Err(Error::Config(format!(
                    "rank {} too large for layer {l}",
                    self.model.rank
                )));
            }
        }
        if self.model.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.widths(), vec![16, 32, 32, 4]);
        assert_eq!(c.adapted_layers(), vec![0, 1, 2]);
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"extra": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"round": {"rounds": 3, "momentum": 0.9}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"quantizer": {"bits": "off", "blocks": 2}}"#).is_err());
    }

    #[test]
    fn scenario_rules() {
        let bad = r#"{"scenario": {"mode": "cross-silo", "clients": 5, "participants": 3}}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
        let ok = r#"{"scenario": {"mode": "cross-device", "clients": 50, "participants": 5}}"#;
        assert_eq!(ExperimentConfig::from_json(ok).unwrap().scenario.participants(), 5);
        let too_many = r#"{"scenario": {"mode": "cross-device", "clients": 5, "participants": 6}}"#;
        assert!(ExperimentConfig::from_json(too_many).is_err());
    }

    #[test]
    fn quantizer_values() {
        let c = ExperimentConfig::from_json(r#"{"quantizer": {"bits": "off"}}"#).unwrap();
        assert_eq!(c.quantizer.bits, BitWidth::Off);
        assert!(ExperimentConfig::from_json(r#"{"quantizer": {"bits": 9}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"rank": 40}}"#).is_err());
    }
}
