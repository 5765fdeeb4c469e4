use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Proj;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    BitFit,
    LnTuning,
    LoRA,
    VeRA,
    FourierFT,
    FullFT,
    ZeroShot,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::BitFit,
        Method::LnTuning,
        Method::LoRA,
        Method::VeRA,
        Method::FourierFT,
        Method::FullFT,
        Method::ZeroShot,
    ];

    /// The five parameter-efficient methods.
    pub const PEFT: [Method; 5] = [
        Method::BitFit,
        Method::LnTuning,
        Method::LoRA,
        Method::VeRA,
        Method::FourierFT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BitFit => "bitfit",
            Method::LnTuning => "lntuning",
            Method::LoRA => "lora",
            Method::VeRA => "vera",
            Method::FourierFT => "fourierft",
            Method::FullFT => "fullft",
            Method::ZeroShot => "zeroshot",
        }
    }

    /// Methods that add a weight update next to frozen projection matrices.
    pub fn is_additive(self) -> bool {
        matches!(self, Method::LoRA | Method::VeRA | Method::FourierFT)
    }

    pub fn is_selective(self) -> bool {
        matches!(self, Method::BitFit | Method::LnTuning)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        let key = key.to_ascii_lowercase();
        let alias = match key.as_str() {
            "ln" | "lnt" | "layernorm" => "lntuning",
            "full" | "finetune" => "fullft",
            "fourier" => "fourierft",
            "zero" | "none" => "zeroshot",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown adaptation method {s:?}")))
    }
}

/// Which biases BitFit unfreezes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitFitScope {
    /// Every bias-classified parameter.
    #[default]
    AllBiases,
    /// Only the bias of the decoder's final layer norm (`d_model` values).
    FinalNormOnly,
}

/// Which layer-norm parameters LN tuning unfreezes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnScope {
    /// Scale and bias of the norms in front of attention sub-blocks.
    #[default]
    Attention,
    /// Scale and bias of every layer norm.
    All,
    /// Scale of every layer norm.
    AllScaleOnly,
}

macro_rules! kebab_from_str {
    ($ty:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($ty)))),
                }
            }
        }
    };
}

kebab_from_str!(BitFitScope, "all-biases" => BitFitScope::AllBiases, "final-norm-only" => BitFitScope::FinalNormOnly);
kebab_from_str!(LnScope, "attention" => LnScope::Attention, "all" => LnScope::All, "all-scale-only" => LnScope::AllScaleOnly);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub method: Method,
    pub targets: Vec<Proj>,
    /// LoRA / VeRA rank.
    pub rank: usize,
    /// FourierFT spectral coefficients per adapted matrix.
    pub n_coefficients: usize,
    /// FourierFT output scale.
    pub alpha: f64,
    /// Seed of the frozen state shared across layers.
    pub shared_seed: u64,
    pub bitfit_scope: BitFitScope,
    pub ln_scope: LnScope,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::new(Method::ZeroShot)
    }
}

impl AdapterConfig {
    /// Defaults: every projection targeted, LoRA rank 2, VeRA rank 16,
    /// FourierFT n=50 and α=300.
    pub fn new(method: Method) -> Self {
        AdapterConfig {
            method,
            targets: Proj::ALL.to_vec(),
            rank: if method == Method::VeRA { 16 } else { 2 },
            n_coefficients: 50,
            alpha: 300.0,
            shared_seed: 0x5eed,
            bitfit_scope: BitFitScope::default(),
            ln_scope: LnScope::default(),
        }
    }

    pub fn with_rank(mut self, r: usize) -> Self {
        self.rank = r;
        self
    }

    pub fn with_coefficients(mut self, n: usize) -> Self {
        self.n_coefficients = n;
        self
    }

    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        match self.method {
            Method::LoRA | Method::VeRA if self.rank == 0 => {
                Err(Error::Config(format!("{} rank must be at least 1", self.method)))
            }
            Method::FourierFT if self.n_coefficients == 0 || self.n_coefficients > d_in * d_out => {
                Err(Error::Config(format!(
                    "n_coefficients must lie in 1..={}, got {}",
                    d_in * d_out,
                    self.n_coefficients
                )))
            }
            Method::FourierFT if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)))
            }
            m if m.is_additive() && self.targets.is_empty() => {
                Err(Error::Config(format!("{m} needs at least one target matrix")))
            }
            _ => Ok(()),
        }
    }
}
