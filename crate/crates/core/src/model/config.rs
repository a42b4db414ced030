use serde::{Deserialize, Serialize};

use crate::emission::Variant;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of real tokens `|V|`.
    pub vocab_size: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Inner width of the feed-forward sublayers.
    pub ffn_hidden: usize,
    /// Upsampling ratio `T`.
    pub upsample: usize,
    pub max_source_len: usize,
    pub dropout: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            hidden: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_hidden: 256,
            upsample: 4,
            max_source_len: 64,
            dropout: 0.1,
            seed: 0,
            variant: Variant::CopyAware,
        }
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("upsample", self.upsample),
            ("max_source_len", self.max_source_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the emission lattice this model produces.
    pub fn output_columns(&self) -> usize {
        self.variant.columns(self.vocab_size)
    }

    /// Rows of the embedding table: every token plus KEEP and BLANK.
    pub fn embedding_rows(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn block_parameters(&self) -> usize {
        let h = self.hidden;
        let f = self.ffn_hidden;
        // two layer norms, qkv, output projection, two ffn matrices
        4 * h + (3 * h * h + 3 * h) + (h * h + h) + (h * f + f) + (f * h + h)
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let t = self.upsample;
        let c = self.output_columns();
        self.embedding_rows() * h
            + (self.encoder_layers + self.decoder_layers) * self.block_parameters()
            + 2 * h
            + (h * t * h + t * h)
            + 2 * h
            + (h * c + c)
    }
}
