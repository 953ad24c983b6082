//! Ticket discovery and retraining: iterative LOT with zeroed non-winners,
//! warm-up with per-epoch checkpoints, and RISE with frozen non-winners.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, CheckpointStore, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use train::{
    evaluate, train, AlgorithmTag, NoObserver, Observer, Precision, RunResult, TrainContext, TrainRecipe, UpdateRule,
};

use serde::{Deserialize, Serialize};

use crate::complexity::{FlopLedger, Phase, SampleCost};
use crate::error::{Error, Result};
use crate::mask::{apply_mask, magnitude_prune, validate_retain, FrozenReference, Mask};
use crate::model::ParamVector;
use train::train_from_state;

/// Ticket-finding procedure run after warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    Ilot { retain: f64, iterations: usize },
    Rise { retain: f64 },
}

impl Method {
    pub fn tag(&self) -> AlgorithmTag {
        match self {
            Method::Vanilla => AlgorithmTag::Vanilla,
            Method::Ilot { iterations, .. } => AlgorithmTag::for_lot(*iterations),
            Method::Rise { .. } => AlgorithmTag::Rise,
        }
    }
}

/// State of the full model after `k` warm-up epochs.
#[derive(Clone, Debug)]
pub struct Warmup {
    pub k: usize,
    pub params: ParamVector,
    pub momentum: Vec<f64>,
    pub ledger: FlopLedger,
}

/// Trains the full model from `w0` for `k` epochs, storing `W^0..=W^k`.
///
/// Epochs already present in `store` as a contiguous prefix are replayed from
/// disk instead of retrained; they are still charged to the ledger so the
/// cost of a run does not depend on what was cached.
pub fn warmup(
    ctx: &TrainContext<'_>,
    w0: &[f64],
    k: usize,
    recipe: &TrainRecipe,
    store: &mut CheckpointStore,
    observer: &mut dyn Observer,
) -> Result<Warmup> {
    recipe.validate()?;
    if k > recipe.epochs {
        return Err(Error::WarmupTooLong { k, epochs: recipe.epochs });
    }
    let n = ctx.model.param_count();
    if w0.len() != n {
        return Err(Error::Length { expected: n, got: w0.len() });
    }
    if let Ok(c0) = store.get(0) {
        let same = c0.seed == recipe.seed
            && c0.params.len() == n
            && c0.params.iter().zip(w0).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Invalid("checkpoint store holds snapshots of a different run".into()));
        }
    } else {
        store.insert(Checkpoint { epoch: 0, seed: recipe.seed, params: w0.to_vec().into(), momentum: Some(vec![0.0; n]) })?;
    }

    let cached = store.contiguous_prefix(k).unwrap_or(0);
    let full = SampleCost::of(ctx.model, &ctx.cost, None)?;
    let mut ledger = FlopLedger::new();
    for _ in 0..cached {
        ledger.accrue(Phase::Warmup, full, ctx.train.len());
        ledger.end_epoch(Phase::Warmup);
    }
    let start = store.get(cached)?;
    let mut params = start.params.clone();
    let mut momentum = start.momentum.clone().unwrap_or_else(|| vec![0.0; n]);
    for epoch in cached..k {
        let (w, run, state) = train_from_state(
            ctx,
            &params,
            Some(momentum),
            recipe,
            &UpdateRule::Vanilla,
            epoch,
            epoch + 1,
            Phase::Warmup,
            AlgorithmTag::Vanilla,
            observer,
        )?;
        ledger.merge(&run.ledger);
        params = w;
        momentum = state.buffer().to_vec();
        store.insert(Checkpoint {
            epoch: epoch + 1,
            seed: recipe.seed,
            params: params.clone(),
            momentum: Some(momentum.clone()),
        })?;
    }
    if k == 0 {
        ledger.phases.push((Phase::Warmup, Default::default()));
    }
    Ok(Warmup { k, params, momentum, ledger })
}

/// Result of the iterative LOT loop.
#[derive(Clone, Debug)]
pub struct LotOutcome {
    /// Mask after the last pruning round.
    pub mask: Mask,
    /// Mask in force during each iteration (the first is all ones).
    pub masks: Vec<Mask>,
    pub runs: Vec<RunResult>,
}

/// `iterations` rounds of: rewind to `rewind · M`, train with zeroed
/// non-winners from `start_epoch`, keep `retain` percent of the active weights.
pub fn i_lot_r(
    ctx: &TrainContext<'_>,
    rewind: &[f64],
    retain: f64,
    iterations: usize,
    recipe: &TrainRecipe,
    start_epoch: usize,
    observer: &mut dyn Observer,
) -> Result<LotOutcome> {
    validate_retain(retain)?;
    if iterations == 0 {
        return Err(Error::Invalid("lottery iterations must be at least 1".into()));
    }
    let prunable = ctx.model.layout().weight_flags();
    let tag = AlgorithmTag::for_lot(iterations);
    let mut mask = Mask::ones(ctx.model.param_count());
    let mut masks = Vec::with_capacity(iterations);
    let mut runs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let w = apply_mask(rewind, &mask)?;
        let rule = UpdateRule::Lot(mask.clone());
        let (trained, run, _) = train_from_state(
            ctx,
            &w,
            None,
            recipe,
            &rule,
            start_epoch,
            recipe.epochs,
            Phase::Discovery,
            tag,
            observer,
        )?;
        let next = magnitude_prune(&trained, retain, &mask, &prunable)?;
        masks.push(mask);
        runs.push(run);
        mask = next;
    }
    Ok(LotOutcome { mask, masks, runs })
}

/// Trains the ticket `rewind · mask` from `start_epoch` with zeroed non-winners.
pub fn train_ticket(
    ctx: &TrainContext<'_>,
    rewind: &[f64],
    mask: &Mask,
    recipe: &TrainRecipe,
    start_epoch: usize,
    tag: AlgorithmTag,
    observer: &mut dyn Observer,
) -> Result<RunResult> {
    let w = apply_mask(rewind, mask)?;
    let rule = UpdateRule::Lot(mask.clone());
    let (_, run, _) =
        train_from_state(ctx, &w, None, recipe, &rule, start_epoch, recipe.epochs, Phase::Masked, tag, observer)?;
    Ok(run)
}

#[derive(Clone, Debug)]
pub struct RiseOutcome {
    pub mask: Mask,
    /// Full-model training used to find the mask.
    pub discovery: RunResult,
    /// Retraining from `W^k` with non-winners frozen at `W^k`.
    pub run: RunResult,
}

/// Trains the full model from `wk`, keeps `retain` percent of the weights by
/// final magnitude, then retrains from the same `wk` with the pruned entries
/// frozen at their `wk` values.
pub fn rise_r(
    ctx: &TrainContext<'_>,
    wk: &[f64],
    retain: f64,
    recipe: &TrainRecipe,
    start_epoch: usize,
    observer: &mut dyn Observer,
) -> Result<RiseOutcome> {
    validate_retain(retain)?;
    let n = ctx.model.param_count();
    if wk.len() != n {
        return Err(Error::Length { expected: n, got: wk.len() });
    }
    let (wf, discovery, _) = train_from_state(
        ctx,
        wk,
        None,
        recipe,
        &UpdateRule::Vanilla,
        start_epoch,
        recipe.epochs,
        Phase::Discovery,
        AlgorithmTag::Rise,
        observer,
    )?;
    let mask = magnitude_prune(&wf, retain, &Mask::ones(n), &ctx.model.layout().weight_flags())?;
    let frozen = FrozenReference::new(wk.to_vec().into());
    let rule = UpdateRule::Rise(mask.clone(), frozen);
    let (_, run, _) =
        train_from_state(ctx, wk, None, recipe, &rule, start_epoch, recipe.epochs, Phase::Masked, AlgorithmTag::Rise, observer)?;
    Ok(RiseOutcome { mask, discovery, run })
}

/// Everything produced by one (method, k) cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub mask: Option<Mask>,
    /// Reported run; its ledger covers warm-up, discovery and masked phases.
    pub result: RunResult,
    pub discovery: Vec<RunResult>,
    pub masks: Vec<Mask>,
}

/// Warm-up for `k` epochs, then the selected procedure with `W^k` as the
/// rewind (LOT) or freeze (RISE) point.
///
/// For LOT the returned result is the final ticket trained from `W^k · M`.
/// Vanilla ignores `k` and trains the full model for the whole recipe.
pub fn warmup_and_dispatch(
    ctx: &TrainContext<'_>,
    w0: &[f64],
    k: usize,
    recipe: &TrainRecipe,
    method: Method,
    store: &mut CheckpointStore,
    observer: &mut dyn Observer,
) -> Result<CellOutcome> {
    if k > recipe.epochs {
        return Err(Error::WarmupTooLong { k, epochs: recipe.epochs });
    }
    if let Method::Vanilla = method {
        let (_, mut result, _) = train_from_state(
            ctx,
            w0,
            None,
            recipe,
            &UpdateRule::Vanilla,
            0,
            recipe.epochs,
            Phase::Full,
            AlgorithmTag::Vanilla,
            observer,
        )?;
        if recipe.epochs == 0 {
            result.ledger.phases.push((Phase::Full, Default::default()));
        }
        return Ok(CellOutcome { mask: None, result, discovery: Vec::new(), masks: Vec::new() });
    }
    let wu = warmup(ctx, w0, k, recipe, store, observer)?;
    let (mask, mut result, discovery, masks) = match method {
        Method::Ilot { retain, iterations } => {
            let lot = i_lot_r(ctx, &wu.params, retain, iterations, recipe, k, observer)?;
            let ticket = train_ticket(ctx, &wu.params, &lot.mask, recipe, k, method.tag(), observer)?;
            (lot.mask, ticket, lot.runs, lot.masks)
        }
        Method::Rise { retain } => {
            let rise = rise_r(ctx, &wu.params, retain, recipe, k, observer)?;
            (rise.mask.clone(), rise.run, vec![rise.discovery], vec![rise.mask])
        }
        Method::Vanilla => unreachable!(),
    };
    let mut ledger = wu.ledger.clone();
    for d in &discovery {
        ledger.merge(&d.ledger);
    }
    ledger.merge(&result.ledger);
    if result.ledger.phases.is_empty() {
        ledger.merge(&FlopLedger { convention: String::new(), phases: vec![(Phase::Masked, Default::default())] });
    }
    result.ledger = ledger;
    Ok(CellOutcome { mask: Some(mask), result, discovery, masks })
}
