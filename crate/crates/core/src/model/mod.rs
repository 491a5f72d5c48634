//! Toy decoder-only transformer whose MLP intermediate neurons are maskable.

mod checkpoint;
mod transformer;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use transformer::{
    lm_loss, next_token_targets, Block, Forward, ForwardOptions, TransformerModel,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Intermediate width is `mlp_ratio · d_model`.
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub label_smoothing: Real,
    pub seed: u64,
    pub tie_embeddings: bool,
    pub init_std: Real,
    /// Per-layer intermediate widths after compaction; `None` means uniform.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_widths: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            max_seq_len: 64,
            label_smoothing: 0.0,
            seed: 0,
            tie_embeddings: true,
            init_std: 0.02,
            mlp_widths: None,
        }
    }
}

impl ModelConfig {
    /// Uncompacted intermediate width `m`.
    pub fn mlp_width(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    /// Intermediate width of each layer.
    pub fn layer_widths(&self) -> Vec<usize> {
        match &self.mlp_widths {
            Some(w) => w.clone(),
            None => vec![self.mlp_width(); self.n_layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if let Some(w) = &self.mlp_widths {
            if w.len() != self.n_layers {
                return Err(Error::Config(format!(
                    "mlp_widths has {} entries for {} layers",
                    w.len(),
                    self.n_layers
                )));
            }
            if w.iter().any(|&m| m > self.mlp_width()) {
                return Err(Error::Config(
                    "mlp_widths entry exceeds mlp_ratio · d_model".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
