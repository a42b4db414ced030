use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emission::Variant;
use crate::error::{Error, Result};
use crate::glancing::GlancingConfig;
use crate::loss::Aggregation;
use crate::model::{ModelConfig, OptimizerConfig};
use crate::util::{config_hash, derive_seed};

/// Everything a training run depends on. Identical configs produce
/// identical checkpoints and logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// `None` trains without glancing.
    pub glancing: Option<GlancingConfig>,
    pub aggregation: Aggregation,
    pub epochs: usize,
    /// Sentences per optimizer step.
    pub batch_size: usize,
    /// Stop after this many epochs without a dev improvement.
    pub patience: Option<usize>,
    pub decode_iterations: usize,
    /// Source-token budget per decoding batch.
    pub batch_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            glancing: Some(GlancingConfig::default()),
            aggregation: Aggregation::MeanPerSample,
            epochs: 20,
            batch_size: 32,
            patience: Some(3),
            decode_iterations: 2,
            batch_tokens: 10_000,
        }
    }
}

pub(crate) const STREAM_INIT: u64 = 10;
pub(crate) const STREAM_GLANCE: u64 = 11;
pub(crate) const STREAM_SHUFFLE: u64 = 12;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decode_iterations == 0 || self.batch_tokens == 0 {
            return Err(Error::Config(
                "epochs, batch_size, decode_iterations and batch_tokens must be positive".into(),
            ));
        }
        if let Some(g) = &self.glancing {
            g.validate()?;
        }
        if self.model.vocab_size > 0 {
            self.model.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    /// Copy with every sub-seed derived from the root seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.model.seed = derive_seed(self.seed, &[STREAM_INIT]);
        if let Some(g) = &mut c.glancing {
            g.seed = derive_seed(self.seed, &[STREAM_GLANCE]);
        }
        c
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.model.vocab_size = 50;
        let text = serde_json::to_string(&c).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.seed = 7;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c = RunConfig::from_json(r#"{"epochs": 3, "model": {"hidden": 16}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.batch_size, 32);
        assert!(RunConfig::from_json(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn resolved_seeds_follow_root() {
        let a = RunConfig::default().resolved();
        let mut b = RunConfig::default();
        b.seed = 43;
        let b = b.resolved();
        assert_ne!(a.model.seed, b.model.seed);
        assert_ne!(a.glancing.unwrap().seed, b.glancing.unwrap().seed);
    }
}
