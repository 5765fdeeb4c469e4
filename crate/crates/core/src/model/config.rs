use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Steps of history fed to the encoder (6 h at 5-minute sampling).
pub const CONTEXT_LEN: usize = 72;
/// Steps forecast by the decoder (3 h at 5-minute sampling).
pub const HORIZON_LEN: usize = 36;

/// Mean-scaling plus uniform binning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub n_bins: usize,
    pub bin_low: f64,
    pub bin_high: f64,
}

impl TokenizerConfig {
    /// Two special tokens follow the bins: PAD (also the decoder start token) and EOS.
    pub const N_SPECIAL: usize = 2;

    pub fn desk() -> Self {
        TokenizerConfig {
            n_bins: 128,
            bin_low: -10.0,
            bin_high: 10.0,
        }
    }

    /// Vocabulary of the published checkpoints: 4096 ids in total.
    pub fn chronos() -> Self {
        TokenizerConfig {
            n_bins: 4094,
            bin_low: -15.0,
            bin_high: 15.0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.n_bins + Self::N_SPECIAL
    }

    pub fn pad_id(&self) -> usize {
        self.n_bins
    }

    pub fn eos_id(&self) -> usize {
        self.n_bins + 1
    }

    pub fn bin_width(&self) -> f64 {
        (self.bin_high - self.bin_low) / self.n_bins as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::Config(format!("n_bins must be >= 2, got {}", self.n_bins)));
        }
        if self.bin_low >= self.bin_high || !self.bin_low.is_finite() || !self.bin_high.is_finite()
        {
            return Err(Error::Config(format!(
                "bin range [{}, {}] is empty or non-finite",
                self.bin_low, self.bin_high
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Tiny,
    Small,
    Base,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Desk,
        Preset::Tiny,
        Preset::Small,
        Preset::Base,
        Preset::Large,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::Large => "large",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model preset {s:?}")))
    }
}

/// Architecture of the encoder-decoder forecaster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub include_linear_bias: bool,
    pub context_len: usize,
    pub horizon_len: usize,
    pub tokenizer: TokenizerConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (d_model, n_heads, layers, d_ff, tokenizer) = match p {
            Preset::Desk => (64, 4, 2, 256, TokenizerConfig::desk()),
            Preset::Tiny => (256, 4, 4, 1024, TokenizerConfig::chronos()),
            Preset::Small => (512, 8, 6, 2048, TokenizerConfig::chronos()),
            Preset::Base => (768, 12, 12, 3072, TokenizerConfig::chronos()),
            Preset::Large => (1024, 16, 24, 4096, TokenizerConfig::chronos()),
        };
        ModelConfig {
            d_model,
            n_heads,
            n_encoder_layers: layers,
            n_decoder_layers: layers,
            d_ff,
            include_linear_bias: true,
            context_len: CONTEXT_LEN,
            horizon_len: HORIZON_LEN,
            tokenizer,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.context_len == 0 || self.horizon_len == 0 {
            return Err(Error::Config("d_ff, context_len and horizon_len must be positive".into()));
        }
        Ok(())
    }

    /// Number of attention blocks that carry Q/K/V/O projections:
    /// encoder self-attention, decoder self-attention and cross-attention.
    pub fn attention_blocks(&self) -> usize {
        self.n_encoder_layers + 2 * self.n_decoder_layers
    }

    /// Closed-form parameter total of a freshly built model.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let bias = usize::from(self.include_linear_bias);
        let linear = |d_in: usize, d_out: usize| d_in * d_out + bias * d_out;
        let norm = 2 * d;
        let attention = 4 * linear(d, d);
        let ff = linear(d, self.d_ff) + linear(self.d_ff, d);
        let encoder_layer = attention + ff + 2 * norm;
        let decoder_layer = 2 * attention + ff + 3 * norm;
        self.vocab_size() * d
            + (self.context_len + self.horizon_len) * d
            + self.n_encoder_layers * encoder_layer
            + self.n_decoder_layers * decoder_layer
            + 2 * norm
            + self.vocab_size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in Preset::ALL {
            ModelConfig::preset(p).validate().unwrap();
        }
    }

    #[test]
    fn preset_parse_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("mini".parse::<Preset>().is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = ModelConfig::preset(Preset::Desk);
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vocab_includes_specials() {
        let t = TokenizerConfig::desk();
        assert_eq!(t.vocab_size(), 130);
        assert_eq!(t.pad_id(), 128);
        assert_eq!(TokenizerConfig::chronos().vocab_size(), 4096);
    }
}
