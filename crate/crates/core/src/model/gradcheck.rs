//! Finite-difference audit of the full model's loss gradient.

use super::network::{ForecastModel, TokenBatch};
use crate::error::Result;
use crate::numerics::{Rng, Tape};

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error denominator floor.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst: f64,
    pub worst_param: String,
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates whose ±h neighborhood straddles a ReLU kink (the central
    /// difference at h and h/10 disagree), so no derivative exists to compare.
    pub skipped: usize,
    pub tensors: usize,
}

fn loss(model: &ForecastModel, batch: &TokenBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let l = model.loss_tape(&mut tape, batch, None)?;
    Ok(tape.value(l)[0])
}

fn central(model: &mut ForecastModel, batch: &TokenBatch, idx: usize, coord: usize, h: f64) -> Result<f64> {
    let x0 = model.params.get(idx).data()[coord];
    model.params.get_mut(idx).data_mut()[coord] = x0 + h;
    let up = loss(model, batch);
    model.params.get_mut(idx).data_mut()[coord] = x0 - h;
    let down = loss(model, batch);
    model.params.get_mut(idx).data_mut()[coord] = x0;
    Ok((up? - down?) / (2.0 * h))
}

/// Compares the tape gradient of the teacher-forced loss with central
/// differences on `probes` coordinates of every registered tensor: the
/// largest-magnitude entries first, then random ones.
pub fn check_model_gradients(
    model: &ForecastModel,
    batch: &TokenBatch,
    probes: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let mut work = model.clone();
    work.params.set_all_requires_grad(true);
    work.params.zero_grads();
    let mut tape = Tape::new();
    let l = work.loss_tape(&mut tape, batch, None)?;
    tape.backward(l)?.apply(&mut [&mut work.params]);
    let grads: Vec<Vec<f64>> = (0..work.params.len())
        .map(|i| work.params.get(i).grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        worst: 0.0,
        worst_param: String::new(),
        checked: 0,
        skipped: 0,
        tensors: work.params.len(),
    };
    for (idx, g) in grads.iter().enumerate() {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut queue: Vec<usize> = order.iter().take(probes.div_ceil(2)).copied().collect();
        let mut compared = 0;
        let mut attempts = 0;
        while compared < probes.min(g.len()) && attempts < 4 * probes {
            attempts += 1;
            let coord = if queue.is_empty() { rng.below(g.len()) } else { queue.remove(0) };
            let coarse = central(&mut work, batch, idx, coord, FD_STEP)?;
            let fine = central(&mut work, batch, idx, coord, FD_STEP / 10.0)?;
            if (coarse - fine).abs() > 1e-4 * coarse.abs().max(fine.abs()).max(FD_FLOOR) {
                report.skipped += 1;
                continue;
            }
            let err = (g[coord] - coarse).abs() / g[coord].abs().max(coarse.abs()).max(FD_FLOOR);
            if err > report.worst {
                report.worst = err;
                report.worst_param = format!("{}[{coord}]", work.params.name(idx));
            }
            report.checked += 1;
            compared += 1;
        }
    }
    Ok(report)
}
