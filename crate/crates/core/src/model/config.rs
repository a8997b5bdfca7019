use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full model or one of its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Hierarchical encoder, label-wise attention, preprocessed per-eye input.
    #[default]
    Full,
    /// No filtering or eye split: one unsplit record in, `2L` outputs.
    WoP,
    /// Flat token-level encoder instead of the hierarchy; a one-column `C`.
    WoC,
    /// No sentence-level transformer: `C = A`.
    WoS,
    /// Mean pooling of `C` instead of label attention.
    WoL,
    /// Flat encoder and mean pooling.
    WoW,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        Self::Full,
        Self::WoP,
        Self::WoC,
        Self::WoS,
        Self::WoL,
        Self::WoW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoP => "wo_p",
            Self::WoC => "wo_c",
            Self::WoS => "wo_s",
            Self::WoL => "wo_l",
            Self::WoW => "wo_w",
        }
    }

    pub fn uses_flat_encoder(self) -> bool {
        matches!(self, Self::WoC | Self::WoW)
    }

    pub fn uses_sentence_layer(self) -> bool {
        matches!(self, Self::Full | Self::WoP | Self::WoL)
    }

    pub fn uses_label_attention(self) -> bool {
        matches!(self, Self::Full | Self::WoP | Self::WoC | Self::WoS)
    }

    pub fn uses_preprocessing(self) -> bool {
        self != Self::WoP
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant {s:?}; expected one of full, wo_p, wo_c, wo_s, wo_l, wo_w"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub word_layers: usize,
    pub sentence_layers: usize,
    pub n_heads: usize,
    /// Number of diseases `L`.
    pub n_labels: usize,
    pub vocab_size: usize,
    pub max_tokens_per_sentence: usize,
    pub max_sentences: usize,
    pub max_tokens_flat: usize,
    pub dropout: f64,
    pub variant: AblationVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            word_layers: 5,
            sentence_layers: 1,
            n_heads: 8,
            n_labels: 6,
            vocab_size: 0,
            max_tokens_per_sentence: 64,
            max_sentences: 64,
            max_tokens_flat: 512,
            dropout: 0.1,
            variant: AblationVariant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("word_layers", self.word_layers),
            ("n_heads", self.n_heads),
            ("n_labels", self.n_labels),
            ("vocab_size", self.vocab_size),
            ("max_tokens_per_sentence", self.max_tokens_per_sentence),
            ("max_sentences", self.max_sentences),
            ("max_tokens_flat", self.max_tokens_flat),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.sentence_layers != 1 {
            return Err(Error::config(
                "the sentence-level encoder has exactly one layer",
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Sigmoid outputs per document: `2L` for the unsplit variant, else `L`.
    pub fn n_outputs(&self) -> usize {
        if self.variant == AblationVariant::WoP {
            2 * self.n_labels
        } else {
            self.n_labels
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
