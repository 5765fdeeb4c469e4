use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::log::ExperimentLog;
use crate::adapters::{count_trainable_params, Adapter, AdapterConfig, Method, ParameterBudgetReport};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, MetricReport};
use crate::model::{ForecastModel, ModelConfig, TokenBatch, WeightAdapter};
use crate::numerics::{Rng, Tape};
use crate::pipeline::{SplitDataset, VitalsWindow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Rate used by pretraining.
    pub learning_rate: f64,
    /// Rates tried by fine-tuning; the best by validation MSE is kept.
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Sampling used for the validation MSE.
    pub val_eval: EvalConfig,
    /// Validation windows used per evaluation (a seeded subset); 0 = all.
    pub max_val_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_grid: vec![1e-2, 1e-3, 1e-4, 1e-5],
            batch_size: 16,
            max_steps: 200,
            eval_every: 20,
            patience: 5,
            seed: 0,
            adam: AdamConfig::default(),
            val_eval: EvalConfig { n_samples: 20, n_runs: 1 },
            max_val_windows: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad_lr = |lr: f64| !(lr > 0.0 && lr.is_finite());
        if bad_lr(self.learning_rate) || self.lr_grid.is_empty() || self.lr_grid.iter().any(|&l| bad_lr(l)) {
            return Err(Error::Config("learning rates must be positive and the grid non-empty".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_steps, eval_every and patience must be at least 1".into(),
            ));
        }
        if self.val_eval.n_samples == 0 || self.val_eval.n_runs == 0 {
            return Err(Error::Config("validation sampling needs at least one sample and run".into()));
        }
        Ok(())
    }
}

/// Per-window token rows, concatenated on demand into batches.
struct TokenRows {
    rows: Vec<TokenBatch>,
}

impl TokenRows {
    fn new(cfg: &ModelConfig, windows: &[VitalsWindow]) -> Result<Self> {
        let rows = windows
            .iter()
            .map(|w| TokenBatch::from_pairs(cfg, [(w.context.as_slice(), w.horizon.as_slice())]))
            .collect::<Result<_>>()?;
        Ok(TokenRows { rows })
    }

    fn batch(&self, idx: &[usize]) -> TokenBatch {
        let mut out = TokenBatch {
            size: 0,
            context: Vec::new(),
            decoder_input: Vec::new(),
            targets: Vec::new(),
        };
        for &i in idx {
            let r = &self.rows[i];
            out.size += r.size;
            out.context.extend_from_slice(&r.context);
            out.decoder_input.extend_from_slice(&r.decoder_input);
            out.targets.extend_from_slice(&r.targets);
        }
        out
    }
}

/// Shuffled fixed-size batches; each epoch's last partial batch is kept.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, rng: Rng) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
            size,
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

fn as_dyn(a: Option<&Adapter>) -> Option<&dyn WeightAdapter> {
    a.map(|a| a as &dyn WeightAdapter)
}

/// One optimizer step on `batch`; returns the batch loss.
fn train_step(
    model: &mut ForecastModel,
    adapter: Option<&mut Adapter>,
    batch: &TokenBatch,
    opt: &mut Adam,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = model.loss_tape(&mut tape, batch, as_dyn(adapter.as_deref()))?;
    let loss = tape.value(l)[0];
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss {loss} at step {}", opt.steps() + 1)));
    }
    let grads = tape.backward(l)?;
    match adapter {
        Some(a) => {
            grads.apply(&mut [model.params_mut(), a.params_mut()]);
            opt.step(&mut [model.params_mut(), a.params_mut()])?;
        }
        None => {
            grads.apply(&mut [model.params_mut()]);
            opt.step(&mut [model.params_mut()])?;
        }
    }
    Ok(loss)
}

/// Mean teacher-forced token cross-entropy over `windows`.
pub fn token_loss(model: &ForecastModel, adapter: Option<&Adapter>, windows: &[VitalsWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("loss over zero windows".into()));
    }
    let rows = TokenRows::new(model.config(), windows)?;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(32) {
        let mut tape = Tape::new();
        let l = model.loss_tape(&mut tape, &rows.batch(chunk), as_dyn(adapter))?;
        total += tape.value(l)[0] * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: ForecastModel,
    /// Training-batch loss per step.
    pub losses: Vec<f64>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Full-parameter training on every window of the training split at
/// `cfg.learning_rate` for `cfg.max_steps` steps. Validation token loss is
/// logged every `eval_every` steps.
pub fn pretrain(
    mut model: ForecastModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
    log: &mut ExperimentLog,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train = &data.splits.train;
    if train.is_empty() {
        return Err(Error::Data("pretraining needs training windows".into()));
    }
    let val: &[VitalsWindow] = if data.splits.val.is_empty() { train } else { &data.splits.val };
    model.params_mut().set_all_requires_grad(true);
    model.params_mut().zero_grads();
    let rows = TokenRows::new(model.config(), train)?;
    let rng = Rng::new(cfg.seed).child_named("pretrain");
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, rng.child(0));
    let mut opt = Adam::new(cfg.learning_rate, cfg.adam)?;
    let initial_val_loss = token_loss(&model, None, val)?;
    log.event("pretrain_start", &[("val_loss", initial_val_loss.to_string())]);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut last_val = initial_val_loss;
    for step in 1..=cfg.max_steps {
        let loss = train_step(&mut model, None, &rows.batch(&batcher.next()), &mut opt)?;
        losses.push(loss);
        log.event("step", &[("phase", "pretrain".into()), ("step", step.to_string()), ("loss", loss.to_string()), ("lr", cfg.learning_rate.to_string())]);
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            last_val = token_loss(&model, None, val)?;
            log.event("eval", &[("phase", "pretrain".into()), ("step", step.to_string()), ("val_loss", last_val.to_string())]);
        }
    }
    model.params_mut().set_all_requires_grad(false);
    Ok(PretrainOutcome {
        model,
        losses,
        initial_val_loss,
        final_val_loss: last_val,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Base model with any selected parameters tuned; frozen tensors are
    /// copies of the base checkpoint.
    pub model: ForecastModel,
    pub adapter: Adapter,
    /// Selected rate; `None` when no training happened.
    pub learning_rate: Option<f64>,
    pub steps: usize,
    pub val_mse: f64,
    /// Test-split evaluation.
    pub report: MetricReport,
    pub budget: ParameterBudgetReport,
}

struct Candidate {
    model: ForecastModel,
    adapter: Adapter,
    val_mse: f64,
    steps: usize,
}

fn val_subset(windows: &[VitalsWindow], max: usize, rng: &mut Rng) -> Vec<VitalsWindow> {
    if max == 0 || windows.len() <= max {
        return windows.to_vec();
    }
    let mut idx = rng.sample_indices(windows.len(), max);
    idx.sort_unstable();
    idx.into_iter().map(|i| windows[i].clone()).collect()
}

/// Trains one adapter at one learning rate with early stopping; returns
/// the best state seen at an evaluation point.
#[allow(clippy::too_many_arguments)]
fn train_at_rate(
    base: &ForecastModel,
    adapter_cfg: &AdapterConfig,
    rows: &TokenRows,
    val: &[VitalsWindow],
    cfg: &TrainConfig,
    lr: f64,
    rng: &Rng,
    val_rng: &Rng,
    log: &mut ExperimentLog,
) -> Result<Candidate> {
    let method = adapter_cfg.method.name();
    let mut model = base.clone();
    let mut adapter = Adapter::attach(&mut model, adapter_cfg.clone(), &mut rng.child_named("init"))?;
    let mut batcher = Batcher::new(rows.rows.len(), cfg.batch_size, rng.child_named("batches"));
    let mut opt = Adam::new(lr, cfg.adam)?;
    let mut best: Option<Candidate> = None;
    let mut stale = 0;
    for step in 1..=cfg.max_steps {
        let loss = train_step(&mut model, Some(&mut adapter), &rows.batch(&batcher.next()), &mut opt)?;
        log.event(
            "step",
            &[("method", method.into()), ("lr", lr.to_string()), ("step", step.to_string()), ("loss", loss.to_string())],
        );
        if step % cfg.eval_every != 0 && step != cfg.max_steps {
            continue;
        }
        let mse = evaluate(&model, Some(&adapter), val, &cfg.val_eval, &mut val_rng.clone())?.mse_raw;
        log.event(
            "eval",
            &[("method", method.into()), ("lr", lr.to_string()), ("step", step.to_string()), ("val_mse", mse.to_string())],
        );
        if best.as_ref().is_none_or(|b| mse < b.val_mse) {
            best = Some(Candidate {
                model: model.clone(),
                adapter: adapter.clone(),
                val_mse: mse,
                steps: step,
            });
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.event("early_stop", &[("method", method.into()), ("lr", lr.to_string()), ("step", step.to_string())]);
                break;
            }
        }
    }
    Ok(best.expect("max_steps >= 1 guarantees one evaluation"))
}

/// Attaches `adapter_cfg` to a copy of `base`, runs the learning-rate grid
/// with early stopping on validation MSE, keeps the best rate, and
/// evaluates it on the test split. Zero-shot skips training.
pub fn finetune(
    base: &ForecastModel,
    adapter_cfg: &AdapterConfig,
    data: &SplitDataset,
    cfg: &TrainConfig,
    test_eval: &EvalConfig,
    log: &mut ExperimentLog,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.splits.val.is_empty() || data.splits.test.is_empty() {
        return Err(Error::Data("fine-tuning needs validation and test windows".into()));
    }
    let method = adapter_cfg.method;
    let budget = count_trainable_params(adapter_cfg, base.config());
    let root = Rng::new(cfg.seed).child_named(method.name());
    let val = val_subset(&data.splits.val, cfg.max_val_windows, &mut Rng::new(cfg.seed).child_named("val-subset"));
    // every candidate is scored with the same sampling streams
    let val_rng = Rng::new(cfg.seed).child_named("val");

    let chosen = if method == Method::ZeroShot {
        let mut model = base.clone();
        let adapter = Adapter::attach(&mut model, adapter_cfg.clone(), &mut root.child_named("init"))?;
        let val_mse = evaluate(&model, Some(&adapter), &val, &cfg.val_eval, &mut val_rng.clone())?.mse_raw;
        (Candidate { model, adapter, val_mse, steps: 0 }, None)
    } else {
        if data.splits.train.is_empty() {
            return Err(Error::Data("fine-tuning needs training windows".into()));
        }
        let rows = TokenRows::new(base.config(), &data.splits.train)?;
        let mut best: Option<(Candidate, f64)> = None;
        for (i, &lr) in cfg.lr_grid.iter().enumerate() {
            let c = train_at_rate(base, adapter_cfg, &rows, &val, cfg, lr, &root.child(i as u64), &val_rng, log)?;
            log.event(
                "lr_result",
                &[("method", method.name().into()), ("lr", lr.to_string()), ("val_mse", c.val_mse.to_string()), ("steps", c.steps.to_string())],
            );
            if best.as_ref().is_none_or(|(b, _)| c.val_mse < b.val_mse) {
                best = Some((c, lr));
            }
        }
        let (c, lr) = best.expect("non-empty grid");
        (c, Some(lr))
    };
    let (c, learning_rate) = chosen;
    let live = c.adapter.trainable_count(&c.model);
    if live != budget.total {
        return Err(Error::Contract(format!(
            "{method}: live trainable count {live} differs from the closed form {}",
            budget.total
        )));
    }
    let report = evaluate(&c.model, Some(&c.adapter), &data.splits.test, test_eval, &mut Rng::new(cfg.seed).child_named("test"))?;
    log.event(
        "finetune_done",
        &[
            ("method", method.name().into()),
            ("lr", learning_rate.map_or("none".into(), |l| l.to_string())),
            ("val_mse", c.val_mse.to_string()),
            ("test_mse", report.mse_raw.to_string()),
            ("params", budget.total.to_string()),
        ],
    );
    Ok(FinetuneOutcome {
        model: c.model,
        adapter: c.adapter,
        learning_rate,
        steps: c.steps,
        val_mse: c.val_mse,
        report,
        budget,
    })
}
