//! Closed-form trainable-parameter accounting.

use std::fmt;

use super::config::{AdapterConfig, BitFitScope, LnScope, Method};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterBudgetReport {
    pub method: Method,
    pub total: usize,
    /// Per-group breakdown; sums to `total`.
    pub groups: Vec<(String, usize)>,
    /// Parameter count of the full base model.
    pub base_total: usize,
    pub note: Option<String>,
}

impl ParameterBudgetReport {
    pub fn fraction_of_base(&self) -> f64 {
        self.total as f64 / self.base_total as f64
    }
}

impl fmt::Display for ParameterBudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({}M)", self.total, format_millions(self.total))?;
        for (name, n) in &self.groups {
            writeln!(f, "  {name}: {n}")?;
        }
        writeln!(
            f,
            "  fraction of base model ({}): {:.4}%",
            self.base_total,
            100.0 * self.fraction_of_base()
        )?;
        if let Some(note) = &self.note {
            writeln!(f, "  note: {note}")?;
        }
        Ok(())
    }
}

/// `count / 10⁶` to three significant figures, trailing zeros trimmed.
pub fn format_millions(count: usize) -> String {
    if count == 0 {
        return "0".into();
    }
    let m = count as f64 / 1e6;
    let decimals = (2 - m.log10().floor() as i32).max(0) as usize;
    let s = format!("{m:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Trainable parameters `cfg` would create on a model built from `mcfg`.
pub fn count_trainable_params(cfg: &AdapterConfig, mcfg: &ModelConfig) -> ParameterBudgetReport {
    let d = mcfg.d_model;
    let enc = mcfg.n_encoder_layers;
    let dec = mcfg.n_decoder_layers;
    let bias = usize::from(mcfg.include_linear_bias);
    let t = cfg.targets.len();
    let norms = 2 * enc + 3 * dec + 2;
    let mut note = None;
    let groups: Vec<(String, usize)> = match cfg.method {
        Method::ZeroShot => Vec::new(),
        Method::FullFT => vec![("all parameters".into(), mcfg.parameter_count())],
        Method::LoRA | Method::VeRA | Method::FourierFT => {
            let per_matrix = match cfg.method {
                Method::LoRA => cfg.rank * (d + d),
                Method::VeRA => cfg.rank + d,
                _ => cfg.n_coefficients,
            };
            vec![
                ("encoder.self_attn".into(), enc * t * per_matrix),
                ("decoder.self_attn".into(), dec * t * per_matrix),
                ("decoder.cross_attn".into(), dec * t * per_matrix),
            ]
        }
        Method::BitFit => match cfg.bitfit_scope {
            BitFitScope::AllBiases => vec![
                ("attention projection biases".into(), bias * 4 * d * mcfg.attention_blocks()),
                ("feed-forward biases".into(), bias * (mcfg.d_ff + d) * (enc + dec)),
                ("layer-norm biases".into(), d * norms),
                ("head bias".into(), mcfg.vocab_size()),
            ],
            BitFitScope::FinalNormOnly => vec![("decoder.final_norm.bias".into(), d)],
        },
        Method::LnTuning => {
            note = Some(match cfg.ln_scope {
                LnScope::Attention => "scale and bias of the norms in front of attention sub-blocks",
                LnScope::All => "scale and bias of every layer norm",
                LnScope::AllScaleOnly => "scale of every layer norm, one d_model vector each",
            }
            .to_string());
            match cfg.ln_scope {
                LnScope::Attention => vec![("attention layer norms".into(), 2 * d * mcfg.attention_blocks())],
                LnScope::All => vec![("layer norms".into(), 2 * d * norms)],
                LnScope::AllScaleOnly => vec![("layer-norm scales".into(), d * norms)],
            }
        }
    };
    ParameterBudgetReport {
        method: cfg.method,
        total: groups.iter().map(|(_, n)| n).sum(),
        groups,
        base_total: mcfg.parameter_count(),
        note,
    }
}
