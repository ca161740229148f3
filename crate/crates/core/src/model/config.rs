use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Precision;

/// Rule `g_i` choosing the source view for decoder layer `i` of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every layer reads the last encoder layer `S_N`.
    Conventional,
    /// Granularity consistent: `S_{N-i+1}`.
    Gca,
    /// Granularity parallel: `S_i`.
    Gpa,
    /// Fine-grained: `S_1`.
    Fga,
    /// Full matching: `sum_j (S_j W_ij + b_ij)`.
    Fma,
    /// Adaptive matching: `sum_j alpha_ij S_j` with `sum_j alpha_ij = 1`.
    Ama,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Conventional,
        Strategy::Gca,
        Strategy::Gpa,
        Strategy::Fga,
        Strategy::Fma,
        Strategy::Ama,
    ];

    pub const MULTI_VIEW: [Strategy; 5] = [
        Strategy::Gca,
        Strategy::Gpa,
        Strategy::Fga,
        Strategy::Fma,
        Strategy::Ama,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Conventional => "conventional",
            Strategy::Gca => "gca",
            Strategy::Gpa => "gpa",
            Strategy::Fga => "fga",
            Strategy::Fma => "fma",
            Strategy::Ama => "ama",
        }
    }

    /// 1-based encoder layer selected for decoder layer `i`, for the
    /// strategies that select a single view.
    pub fn selected_layer(self, i: usize, n: usize) -> Option<usize> {
        match self {
            Strategy::Conventional => Some(n),
            Strategy::Gca => Some(n + 1 - i),
            Strategy::Gpa => Some(i),
            Strategy::Fga => Some(1),
            Strategy::Fma | Strategy::Ama => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown strategy `{s}`")))
    }
}

/// How the routed view enters cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    /// The routed view replaces `S_N`.
    Direct,
    /// `LN(g_i(S) + S_N)` with a layer-specific normalization.
    Soft,
}

impl Integration {
    pub const ALL: [Integration; 2] = [Integration::Direct, Integration::Soft];

    pub fn name(self) -> &'static str {
        match self {
            Integration::Direct => "direct",
            Integration::Soft => "soft",
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" | "direct-replacement" => Ok(Integration::Direct),
            "soft" | "soft-integration" => Ok(Integration::Soft),
            _ => Err(Error::Parse(format!("unknown integration mode `{s}`"))),
        }
    }
}

/// Hyperparameters of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layers in both the encoder and the decoder.
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub strategy: Strategy,
    pub integration: Integration,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            src_vocab: 16,
            tgt_vocab: 16,
            max_len: 64,
            strategy: Strategy::Conventional,
            integration: Integration::Direct,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Same config with the integration mode made canonical: the
    /// conventional strategy has nothing to integrate.
    pub fn normalized(mut self) -> Self {
        if self.strategy == Strategy::Conventional {
            self.integration = Integration::Direct;
        }
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy, integration: Integration) -> Self {
        self.strategy = strategy;
        self.integration = integration;
        self.normalized()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Equal on every field other than strategy and integration.
    pub fn same_backbone(&self, other: &ModelConfig) -> bool {
        let strip = |c: &ModelConfig| ModelConfig {
            strategy: Strategy::Conventional,
            integration: Integration::Direct,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}
