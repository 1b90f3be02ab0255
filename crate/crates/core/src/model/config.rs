use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where layer normalization sits inside an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// Normalize before attention and before the feed-forward map.
    Pre,
    /// Normalize after each residual addition.
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Window length `l`.
    pub seq_len: usize,
    /// Model dimension `d`.
    pub d_model: usize,
    /// Number of buckets `k`.
    pub n_classes: usize,
    pub num_heads: usize,
    /// Key/query/value width per head.
    pub head_size: usize,
    pub num_blocks: usize,
    pub ff_dim: usize,
    pub mlp_units: Vec<usize>,
    pub dropout: f64,
    pub mlp_dropout: f64,
    pub layernorm_epsilon: f64,
    pub norm_placement: NormPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 32,
            d_model: 16,
            n_classes: 7,
            num_heads: 8,
            head_size: 64,
            num_blocks: 6,
            ff_dim: 64,
            mlp_units: vec![10],
            dropout: 0.25,
            mlp_dropout: 0.25,
            layernorm_epsilon: 1e-6,
            norm_placement: NormPlacement::Pre,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("num_blocks", self.num_blocks),
            ("ff_dim", self.ff_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.mlp_units.contains(&0) {
            return Err(Error::Config("mlp_units entries must be at least 1".into()));
        }
        for (name, rate) in [("dropout", self.dropout), ("mlp_dropout", self.mlp_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if !(self.layernorm_epsilon.is_finite() && self.layernorm_epsilon >= 0.0) {
            return Err(Error::Config("layernorm_epsilon must be >= 0".into()));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, hk) = (self.d_model, self.num_heads * self.head_size);
        let attention = 3 * (d * hk + hk) + (hk * d + d);
        let norms = 4 * d;
        let ff = (d * self.ff_dim + self.ff_dim) + (self.ff_dim * d + d);
        let mut head = 0;
        let mut fan_in = self.seq_len;
        for &u in &self.mlp_units {
            head += fan_in * u + u;
            fan_in = u;
        }
        head += fan_in * self.n_classes + self.n_classes;
        self.num_blocks * (attention + norms + ff) + head
    }
}
