use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            dropout_rate: 0.1,
            vocab_size: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("num_layers, d_ff and max_seq_len must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be set".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn num_parameters(&self) -> usize {
        let d = self.d_model;
        // Four d×d projections; biases on query, value and output only.
        let attn = 4 * d * d + 3 * d;
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let ln = 2 * d;
        let enc_layer = attn + ffn + 2 * ln;
        let dec_layer = 2 * attn + ffn + 3 * ln;
        self.vocab_size * d + self.num_layers * (enc_layer + dec_layer) + 2 * ln
    }
}
