//! Training loop, evaluation with frozen caches, and per-step metrics.
//!
//! One train step is strictly serial: forward in training mode (which
//! commits each block's cache update), backward, gradient hand-off to the
//! named parameters, one AdamW step at the scheduled rate. Evaluation
//! freezes every cache on entry and thaws on exit, so repeated eval passes
//! read the same state and leave no trace.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{accuracy, Model};
use crate::optim::{lr_at, AdamW};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tasks::TaskBatch;

/// Keeps the dropout stream decorrelated from the data stream under a
/// shared user seed.
const DROPOUT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Steps between evaluation passes; 0 evaluates only at the end.
    pub eval_interval: u64,
    /// Batches held out for each evaluation pass.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup: 10,
            steps: 100,
            batch: 8,
            seed: 0,
            eval_interval: 0,
            eval_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::config("lr must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("steps and batch must be positive"));
        }
        if self.warmup > self.steps {
            return Err(Error::config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup, self.steps
            )));
        }
        if self.eval_batches == 0 {
            return Err(Error::config("eval_batches must be positive"));
        }
        Ok(())
    }

    pub fn optimizer<T: Real>(&self) -> Result<AdamW<T>> {
        AdamW::new(self.beta1, self.beta2, self.eps, self.weight_decay)
    }
}

/// Mutable loop state, split out from the config so a checkpoint can
/// capture and restore it mid-run.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed train steps.
    pub step: u64,
    pub data_rng: SeededRng,
    pub dropout_rng: SeededRng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            data_rng: SeededRng::new(seed),
            dropout_rng: SeededRng::new(seed ^ DROPOUT_SEED_SALT),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    /// Absent when no target in the batch was labeled.
    pub accuracy: Option<f64>,
    /// Mean mixing ratio per layer; empty for a baseline model.
    pub lambda_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Mean of `inspect` ratios per layer, skipping layers without a cache.
pub fn lambda_layer_means<T: Real>(model: &Model<T>) -> Vec<f64> {
    model
        .lambda_by_layer()
        .iter()
        .filter(|heads| !heads.is_empty())
        .map(|heads| heads.iter().sum::<f64>() / heads.len() as f64)
        .collect()
}

/// Per-block parameter magnitudes and gate statistics, attached to the
/// abort error when a loss turns non-finite.
fn diagnostics<T: Real>(model: &mut Model<T>) -> String {
    let mut per_group: BTreeMap<String, f64> = BTreeMap::new();
    model.for_each_param(&mut |name, tensor| {
        let group = match name.split('.').collect::<Vec<_>>().as_slice() {
            ["blocks", i, ..] => format!("blocks.{i}"),
            _ => String::from("head"),
        };
        let m = tensor.max_abs().as_f64();
        let entry = per_group.entry(group).or_insert(0.0);
        if m > *entry {
            *entry = m;
        }
    });
    let mut msg = String::new();
    for (group, m) in &per_group {
        msg.push_str(&format!(" |{group}|max={m:.3e}"));
    }
    for (i, block) in model.blocks.iter().enumerate() {
        if let Some(cb) = &block.attn.cached {
            let heads = block.attn.inspect_lambda();
            let mix = heads.iter().sum::<f64>() / heads.len().max(1) as f64;
            msg.push_str(&format!(
                "; block {i}: mix={mix:.3}, |C|max={:.3e}, |gates|max={:.3e}",
                cb.cache.c.max_abs().as_f64(),
                cb.cache
                    .w_u
                    .max_abs()
                    .max(cb.cache.w_r.max_abs())
                    .max(cb.cache.w_c.max_abs())
                    .as_f64(),
            ));
        }
    }
    msg
}

/// Runs one optimizer step on one fresh batch and reports its metrics.
/// The recorded step number counts this step as completed.
pub fn train_step<T, F>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    next_batch: &mut F,
) -> Result<MetricsRecord>
where
    T: Real,
    F: FnMut(&mut SeededRng) -> Result<TaskBatch>,
{
    let lr = lr_at(state.step + 1, cfg.lr, cfg.warmup);
    let batch = next_batch(&mut state.data_rng)?;
    let mut tape = Tape::new();
    let pass = match model.forward(&mut tape, &batch, true, &mut state.dropout_rng) {
        Ok(pass) => pass,
        Err(Error::Numeric(m)) => {
            return Err(Error::numeric(format!(
                "{m} at step {};{}",
                state.step,
                diagnostics(model)
            )))
        }
        Err(e) => return Err(e),
    };
    let loss = tape.value(pass.loss_node)[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss {loss} at step {};{}",
            state.step,
            diagnostics(model)
        )));
    }
    tape.backward(pass.loss_node)?;

    let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (name, node) in &pass.binds {
        if let Some(g) = tape.grad(*node) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    let acc = accuracy(&pass.logits, &batch.labels);
    drop(tape);

    opt.begin_step();
    let mut failed = None;
    model.for_each_param(&mut |name, tensor| {
        tensor.zero_grad();
        if let Some(g) = grads.remove(&name) {
            tensor.accumulate_grad(&g);
        }
        if failed.is_none() {
            if let Err(e) = opt.update(&name, tensor, lr) {
                failed = Some(e);
            }
        }
        tensor.zero_grad();
    });
    if let Some(e) = failed {
        return Err(e);
    }

    state.step += 1;
    Ok(MetricsRecord {
        step: state.step,
        split: Split::Train,
        loss,
        accuracy: acc,
        lambda_mean: lambda_layer_means(model),
    })
}

fn evaluate_inner<T: Real>(model: &mut Model<T>, batches: &[TaskBatch]) -> Result<EvalStats> {
    let mut rng = SeededRng::new(0);
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    for batch in batches {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, false, &mut rng)?;
        loss_sum += tape.value(pass.loss_node)[0].as_f64();
        if let Some(a) = accuracy(&pass.logits, &batch.labels) {
            acc_sum += a;
            acc_n += 1;
        }
    }
    Ok(EvalStats {
        loss: loss_sum / batches.len() as f64,
        accuracy: (acc_n > 0).then(|| acc_sum / acc_n as f64),
    })
}

/// Mean loss and accuracy over the given batches with every cache frozen;
/// caches and RNG streams are untouched on exit, so back-to-back calls
/// report identical numbers.
pub fn evaluate<T: Real>(model: &mut Model<T>, batches: &[TaskBatch]) -> Result<EvalStats> {
    if batches.is_empty() {
        return Err(Error::config("evaluate needs at least one batch"));
    }
    model.freeze_caches();
    let out = evaluate_inner(model, batches);
    model.thaw_caches();
    out
}

/// Trains from `state.step` up to `cfg.steps`, emitting one record per
/// train step plus an eval record at every interval boundary and at the
/// end (when `eval_set` is non-empty). Resuming from a restored state
/// continues the record stream exactly where it left off.
pub fn train_loop<T, F, R>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut next_batch: F,
    eval_set: &[TaskBatch],
    mut on_record: R,
) -> Result<()>
where
    T: Real,
    F: FnMut(&mut SeededRng) -> Result<TaskBatch>,
    R: FnMut(&MetricsRecord),
{
    cfg.validate()?;
    while state.step < cfg.steps {
        let rec = train_step(model, opt, cfg, state, &mut next_batch)?;
        on_record(&rec);
        let at_interval = cfg.eval_interval > 0 && state.step % cfg.eval_interval == 0;
        if (at_interval || state.step == cfg.steps) && !eval_set.is_empty() {
            let stats = evaluate(model, eval_set)?;
            on_record(&MetricsRecord {
                step: state.step,
                split: Split::Eval,
                loss: stats.loss,
                accuracy: stats.accuracy,
                lambda_mean: lambda_layer_means(model),
            });
        }
    }
    Ok(())
}
