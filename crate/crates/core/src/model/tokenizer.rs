//! Mean scaling followed by uniform binning.

use super::config::TokenizerConfig;
use crate::error::{Error, Result};

/// Token ids of a context plus the scale needed to map forecasts back.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub scale: f64,
}

/// Mean absolute value of the series, or 1.0 when that is zero.
pub fn mean_scale(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let s = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!("non-finite value at position {i}"))),
        None => Ok(()),
    }
}

impl TokenizerConfig {
    /// Bin index of an already-scaled value.
    pub fn bin_of(&self, scaled: f64) -> usize {
        let clamped = scaled.clamp(self.bin_low, self.bin_high);
        let idx = ((clamped - self.bin_low) / self.bin_width()).floor() as usize;
        idx.min(self.n_bins - 1)
    }

    pub fn bin_center(&self, id: usize) -> f64 {
        self.bin_low + (id as f64 + 0.5) * self.bin_width()
    }

    pub fn tokenize(&self, context: &[f64]) -> Result<Tokenized> {
        check_finite(context)?;
        let scale = mean_scale(context);
        Ok(Tokenized {
            ids: self.tokenize_with_scale(context, scale)?,
            scale,
        })
    }

    /// Tokenizes with an externally fixed scale (used for horizon targets).
    pub fn tokenize_with_scale(&self, values: &[f64], scale: f64) -> Result<Vec<usize>> {
        check_finite(values)?;
        Ok(values.iter().map(|&v| self.bin_of(v / scale)).collect())
    }

    /// Maps ids back to values at bin centers. Special ids decode to zero.
    pub fn detokenize(&self, ids: &[usize], scale: f64) -> Vec<f64> {
        ids.iter()
            .map(|&id| {
                if id < self.n_bins {
                    self.bin_center(id) * scale
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zeros_fall_back_to_unit_scale() {
        let t = TokenizerConfig::desk();
        let tok = t.tokenize(&[0.0; 72]).unwrap();
        assert_eq!(tok.scale, 1.0);
        let zero_bin = t.bin_of(0.0);
        assert!(t.bin_center(zero_bin) - t.bin_width() / 2.0 <= 0.0);
        assert!(tok.ids.iter().all(|&id| id == zero_bin));
    }

    #[test]
    fn constant_series_maps_to_bin_of_one() {
        let t = TokenizerConfig::desk();
        let tok = t.tokenize(&[3.5; 72]).unwrap();
        assert_eq!(tok.scale, 3.5);
        let lo = t.bin_center(tok.ids[0]) - t.bin_width() / 2.0;
        assert!(lo <= 1.0 && 1.0 < lo + t.bin_width());
        assert!(tok.ids.iter().all(|&id| id == tok.ids[0]));
    }

    #[test]
    fn round_trip_within_half_bin() {
        let t = TokenizerConfig::desk();
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let x: Vec<f64> = (0..72).map(|_| rng.uniform_range(-3.0, 5.0)).collect();
            let tok = t.tokenize(&x).unwrap();
            let back = t.detokenize(&tok.ids, tok.scale);
            let bound = t.bin_width() * tok.scale / 2.0;
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() <= bound + 1e-12, "{a} vs {b}, bound {bound}");
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let t = TokenizerConfig::desk();
        assert!(matches!(t.tokenize(&[1.0, f64::NAN]), Err(Error::Data(_))));
        assert!(t.tokenize(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn out_of_range_clamps_to_edge_bins() {
        let t = TokenizerConfig::desk();
        assert_eq!(t.bin_of(1e9), t.n_bins - 1);
        assert_eq!(t.bin_of(-1e9), 0);
    }
}
