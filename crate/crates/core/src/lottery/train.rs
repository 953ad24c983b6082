use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward, loss_and_grad, Batch, LrSchedule, OptimState, Real, SgdConfig};
use crate::complexity::{CostModel, FlopLedger, Phase, SampleCost};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{apply_mask, lot_update, rise_update, FrozenReference, Mask};
use crate::model::{ModelSpec, ParamVector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    /// Arithmetic of forward/backward passes; parameters and optimizer state stay 64-bit.
    #[serde(default)]
    pub precision: Precision,
    /// Masked retraining restarts the schedule at its first epoch instead of
    /// continuing from the rewind epoch.
    #[serde(default)]
    pub restart_schedule: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            epochs: default_epochs(),
            batch_size: default_batch(),
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            seed: 0,
            precision: Precision::F64,
            restart_schedule: false,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        self.schedule.validate(self.epochs)
    }
}

/// What happens to the inactive coordinates after each optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub enum UpdateRule {
    Vanilla,
    /// Inactive entries are held at zero.
    Lot(Mask),
    /// Inactive entries are held at the frozen reference.
    Rise(Mask, FrozenReference),
}

impl UpdateRule {
    pub fn mask(&self) -> Option<&Mask> {
        match self {
            UpdateRule::Vanilla => None,
            UpdateRule::Lot(m) | UpdateRule::Rise(m, _) => Some(m),
        }
    }

    fn apply(&self, params: &[f64], update: &[f64]) -> Result<ParamVector> {
        match self {
            UpdateRule::Vanilla => Ok(params.iter().zip(update).map(|(w, u)| w - u).collect::<Vec<_>>().into()),
            UpdateRule::Lot(m) => lot_update(params, update, m),
            UpdateRule::Rise(m, f) => rise_update(params, update, m, f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlgorithmTag {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "1-LOT")]
    OneLot,
    #[serde(rename = "I-LOT")]
    ILot,
    #[serde(rename = "RISE")]
    Rise,
}

impl AlgorithmTag {
    pub fn for_lot(iterations: usize) -> Self {
        if iterations == 1 {
            AlgorithmTag::OneLot
        } else {
            AlgorithmTag::ILot
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AlgorithmTag::Vanilla => "vanilla",
            AlgorithmTag::OneLot => "1-LOT",
            AlgorithmTag::ILot => "I-LOT",
            AlgorithmTag::Rise => "RISE",
        }
    }
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub algorithm: AlgorithmTag,
    pub seed: u64,
    #[serde(skip)]
    pub final_params: ParamVector,
    #[serde(skip)]
    pub mask: Option<Mask>,
    pub active_count: usize,
    pub param_count: usize,
    pub start_epoch: usize,
    pub test_accuracy: f64,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub test_accuracy_curve: Vec<f64>,
    pub ledger: FlopLedger,
    pub wall_clock_s: f64,
}

/// Hooks into the training loop, used to check invariants step by step.
pub trait Observer {
    fn on_start(&mut self, _phase: Phase, _start_epoch: usize, _params: &[f64]) {}
    fn on_step(&mut self, _phase: Phase, _epoch: usize, _step: usize, _params: &[f64]) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Model and data shared by every run of an experiment.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub model: &'a ModelSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub cost: CostModel,
}

impl<'a> TrainContext<'a> {
    pub fn new(model: &'a ModelSpec, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        for (name, d) in [("train", train), ("test", test)] {
            if d.shape() != model.input() || d.n_classes() != model.n_classes() {
                return Err(Error::Shape(format!(
                    "{name} set ({:?}, {} classes) does not fit model input {:?} with {} classes",
                    d.shape(),
                    d.n_classes(),
                    model.input(),
                    model.n_classes()
                )));
            }
        }
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        Ok(TrainContext { model, train, test, cost: CostModel::default() })
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(crate::DATA_ORDER_STREAM);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn grad_in(precision: Precision, model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, ParamVector)> {
    match precision {
        Precision::F64 => loss_and_grad::<f64>(model, params, batch),
        Precision::F32 => loss_and_grad::<f32>(model, params, batch),
    }
}

fn eval_in<T: Real>(model: &ModelSpec, params: &[f64], data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let c = model.n_classes();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in data.batches(batch_size) {
        let (loss, g) = forward::<T>(model, params, &batch)?;
        loss_sum += loss * batch.len() as f64;
        for (row, &label) in g.logits().data().chunks(c).zip(&batch.labels) {
            let pred = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(pred == label);
        }
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Mean loss and accuracy of `params` over `data`; ties in the logits go to the lower class.
pub fn evaluate(model: &ModelSpec, params: &[f64], data: &Dataset, batch_size: usize, precision: Precision) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    match precision {
        Precision::F64 => eval_in::<f64>(model, params, data, batch_size),
        Precision::F32 => eval_in::<f32>(model, params, data, batch_size),
    }
}

/// Trains from `start_epoch` to the end of the recipe under `rule`.
///
/// The data order of an epoch depends only on the recipe seed and the epoch
/// number, so a run rewound to epoch `k` sees exactly the batches the
/// uninterrupted run would have seen from `k` on.
#[allow(clippy::too_many_arguments)]
pub fn train(
    ctx: &TrainContext<'_>,
    params: &[f64],
    recipe: &TrainRecipe,
    rule: &UpdateRule,
    start_epoch: usize,
    phase: Phase,
    algorithm: AlgorithmTag,
    observer: &mut dyn Observer,
) -> Result<(ParamVector, RunResult, OptimState)> {
    train_from_state(ctx, params, None, recipe, rule, start_epoch, recipe.epochs, phase, algorithm, observer)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_from_state(
    ctx: &TrainContext<'_>,
    params: &[f64],
    momentum: Option<Vec<f64>>,
    recipe: &TrainRecipe,
    rule: &UpdateRule,
    start_epoch: usize,
    end_epoch: usize,
    phase: Phase,
    algorithm: AlgorithmTag,
    observer: &mut dyn Observer,
) -> Result<(ParamVector, RunResult, OptimState)> {
    recipe.validate()?;
    let n = ctx.model.param_count();
    if params.len() != n {
        return Err(Error::Length { expected: n, got: params.len() });
    }
    if let Some(m) = rule.mask() {
        if m.len() != n {
            return Err(Error::Length { expected: n, got: m.len() });
        }
    }
    if start_epoch > end_epoch || end_epoch > recipe.epochs {
        return Err(Error::WarmupTooLong { k: start_epoch.max(end_epoch), epochs: recipe.epochs });
    }
    let clock = Instant::now();
    let mut state = match momentum {
        Some(m) if m.len() == n => OptimState::with_buffer(recipe.sgd, m),
        Some(m) => return Err(Error::Length { expected: n, got: m.len() }),
        None => OptimState::new(recipe.sgd, n),
    };
    let mut w = match rule {
        UpdateRule::Lot(m) => apply_mask(params, m)?,
        _ => ParamVector::from(params.to_vec()),
    };
    if let Some(m) = rule.mask() {
        state.zero_inactive(m.bits());
    }
    let sample_cost = SampleCost::of(ctx.model, &ctx.cost, rule.mask())?;
    let mut ledger = FlopLedger::new();
    let (mut train_loss, mut test_loss, mut test_acc) = (Vec::new(), Vec::new(), Vec::new());
    observer.on_start(phase, start_epoch, &w);

    for epoch in start_epoch..end_epoch {
        let lr = if recipe.restart_schedule {
            recipe.schedule.rate(epoch - start_epoch, recipe.epochs - start_epoch)
        } else {
            recipe.schedule.rate(epoch, recipe.epochs)
        };
        let order = epoch_order(recipe.seed, epoch, ctx.train.len());
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(recipe.batch_size).enumerate() {
            let batch = ctx.train.batch(idx);
            let (loss, grad) = grad_in(recipe.precision, ctx.model, &w, &batch).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, step {step}")),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
            let update = state.update_term(&w, &grad, lr)?;
            if let Some(m) = rule.mask() {
                state.zero_inactive(m.bits());
            }
            w = rule.apply(&w, &update)?;
            ledger.accrue(phase, sample_cost, batch.len());
            observer.on_step(phase, epoch, step, &w);
        }
        ledger.end_epoch(phase);
        train_loss.push(loss_sum / ctx.train.len() as f64);
        let (tl, ta) = evaluate(ctx.model, &w, ctx.test, recipe.batch_size.max(256), recipe.precision)?;
        test_loss.push(tl);
        test_acc.push(ta);
    }

    let test_accuracy = match test_acc.last() {
        Some(&a) => a,
        None if ctx.test.is_empty() => 0.0,
        None => evaluate(ctx.model, &w, ctx.test, recipe.batch_size.max(256), recipe.precision)?.1,
    };
    let result = RunResult {
        algorithm,
        seed: recipe.seed,
        active_count: rule.mask().map_or(n, |m| m.active_count()),
        param_count: n,
        mask: rule.mask().cloned(),
        final_params: w.clone(),
        start_epoch,
        test_accuracy,
        train_loss,
        test_loss,
        test_accuracy_curve: test_acc,
        ledger,
        wall_clock_s: clock.elapsed().as_secs_f64(),
    };
    Ok((w, result, state))
}
