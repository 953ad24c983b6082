//! Backprop FLOP accounting.
//!
//! Counts are multiply-accumulates times [`CostModel::flops_per_mac`] (2 by
//! default). Per sample, a dense layer `m -> n` costs `2mn` forward, `2mn`
//! for the activation gradient and `2mn` for the weight gradient; a stride-1
//! convolution multiplies each by its number of output positions. Under a
//! mask only the weight-gradient part shrinks, to the active weights of each
//! layer: unstructured sparsity cannot skip activation backprop. Biases,
//! ReLU, pooling and the loss are not counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{ModelSpec, TensorKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub flops_per_mac: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { flops_per_mac: 2 }
    }
}

/// Per-sample cost of one parameterised layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub forward: u64,
    pub act_grad: u64,
    pub weight_grad: u64,
    pub weights: usize,
    pub active_weights: usize,
}

/// Per-sample costs for every parameterised layer, with the weight-gradient
/// part restricted to the weights active in `mask`.
pub fn layer_costs(model: &ModelSpec, cost: &CostModel, mask: Option<&Mask>) -> Result<Vec<LayerCost>> {
    if let Some(m) = mask {
        if m.len() != model.param_count() {
            return Err(Error::Length { expected: model.param_count(), got: m.len() });
        }
    }
    let mut out = Vec::new();
    for t in model.layout().tensors().iter().filter(|t| t.kind == TensorKind::Weight) {
        let layer = &model.layers()[t.layer];
        let positions = layer.positions() as u64;
        let weights = t.len();
        let active = match mask {
            Some(m) => m.bits()[t.range()].iter().filter(|&&b| b).count(),
            None => weights,
        };
        let full = cost.flops_per_mac * weights as u64 * positions;
        out.push(LayerCost {
            layer: t.layer,
            forward: full,
            act_grad: full,
            weight_grad: cost.flops_per_mac * active as u64 * positions,
            weights,
            active_weights: active,
        });
    }
    Ok(out)
}

/// Per-sample `(forward, activation-gradient, weight-gradient)` FLOPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCost {
    pub forward: u64,
    pub act_grad: u64,
    pub weight_grad: u64,
}

impl SampleCost {
    pub fn of(model: &ModelSpec, cost: &CostModel, mask: Option<&Mask>) -> Result<Self> {
        Ok(layer_costs(model, cost, mask)?.iter().fold(SampleCost::default(), |acc, l| SampleCost {
            forward: acc.forward + l.forward,
            act_grad: acc.act_grad + l.act_grad,
            weight_grad: acc.weight_grad + l.weight_grad,
        }))
    }

    pub fn backward(&self) -> u64 {
        self.act_grad + self.weight_grad
    }
}

/// Backward FLOPs for one epoch over `n_samples`.
pub fn epoch_flops(model: &ModelSpec, cost: &CostModel, n_samples: usize, mask: Option<&Mask>) -> Result<u64> {
    Ok(SampleCost::of(model, cost, mask)?.backward() * n_samples as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Plain training of the full model (vanilla runs).
    Full,
    /// Full-model epochs before the rewind point.
    Warmup,
    /// Training used only to find the mask.
    Discovery,
    /// Training of the masked model whose accuracy is reported.
    Masked,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Full => "full",
            Phase::Warmup => "warmup",
            Phase::Discovery => "discovery",
            Phase::Masked => "masked",
        }
    }
}

/// Whether mask-discovery training counts toward the reported total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LedgerMode {
    #[default]
    ExcludeDiscovery,
    CountDiscovery,
}

impl LedgerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LedgerMode::ExcludeDiscovery => "exclude-discovery",
            LedgerMode::CountDiscovery => "count-discovery",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub epochs: usize,
    pub samples: u64,
    pub forward: u64,
    pub act_grad: u64,
    pub weight_grad: u64,
}

impl PhaseTotals {
    pub fn backward(&self) -> u64 {
        self.act_grad + self.weight_grad
    }
}

/// Exact integer FLOP totals per phase, in first-accrual order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub convention: String,
    pub phases: Vec<(Phase, PhaseTotals)>,
}

impl FlopLedger {
    pub fn new() -> Self {
        FlopLedger { convention: "flops = 2 x multiply-accumulates".into(), phases: Vec::new() }
    }

    fn slot(&mut self, phase: Phase) -> &mut PhaseTotals {
        let i = match self.phases.iter().position(|(p, _)| *p == phase) {
            Some(i) => i,
            None => {
                self.phases.push((phase, PhaseTotals::default()));
                self.phases.len() - 1
            }
        };
        &mut self.phases[i].1
    }

    /// Charges one step of `n` samples at per-sample cost `c`.
    pub fn accrue(&mut self, phase: Phase, c: SampleCost, n: usize) {
        let t = self.slot(phase);
        let n64 = n as u64;
        t.samples += n64;
        t.forward += c.forward * n64;
        t.act_grad += c.act_grad * n64;
        t.weight_grad += c.weight_grad * n64;
    }

    pub fn end_epoch(&mut self, phase: Phase) {
        self.slot(phase).epochs += 1;
    }

    pub fn phase(&self, phase: Phase) -> Option<&PhaseTotals> {
        self.phases.iter().find(|(p, _)| *p == phase).map(|(_, t)| t)
    }

    pub fn merge(&mut self, other: &FlopLedger) {
        for (p, t) in &other.phases {
            let s = self.slot(*p);
            s.epochs += t.epochs;
            s.samples += t.samples;
            s.forward += t.forward;
            s.act_grad += t.act_grad;
            s.weight_grad += t.weight_grad;
        }
    }

    /// Backprop FLOPs summed over the phases counted under `mode`.
    pub fn backprop_total(&self, mode: LedgerMode) -> u64 {
        self.phases
            .iter()
            .filter(|(p, _)| mode == LedgerMode::CountDiscovery || *p != Phase::Discovery)
            .map(|(_, t)| t.backward())
            .sum()
    }
}

/// One tagged stretch of a recipe, for closed-form accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpec {
    pub phase: Option<Phase>,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub mask: Option<Mask>,
}

/// Ledger computed from phase arithmetic (`epochs x epoch cost`), for cross-checking per-step accrual.
pub fn recipe_flops(model: &ModelSpec, cost: &CostModel, phases: &[PhaseSpec]) -> Result<FlopLedger> {
    let mut ledger = FlopLedger::new();
    for (i, p) in phases.iter().enumerate() {
        let phase = p.phase.ok_or(Error::UntaggedPhase(i))?;
        let c = SampleCost::of(model, cost, p.mask.as_ref())?;
        for _ in 0..p.epochs {
            ledger.accrue(phase, c, p.samples_per_epoch);
            ledger.end_epoch(phase);
        }
        if p.epochs == 0 {
            ledger.slot(phase);
        }
    }
    Ok(ledger)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    /// Position in the input list.
    pub index: usize,
    pub flops: u64,
    pub accuracy: f64,
    pub dominated: bool,
}

/// Sorts `(flops, accuracy)` points by FLOPs and flags dominated ones: a point
/// is dominated iff another has no more FLOPs and no less accuracy, with at
/// least one strict.
pub fn pareto_points(points: &[(u64, f64)]) -> Vec<ParetoPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.cmp(&points[b].0).then(points[b].1.total_cmp(&points[a].1)).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(points.len());
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let flops = points[order[start]].0;
        let end = start + order[start..].iter().take_while(|&&i| points[i].0 == flops).count();
        // first in the group has the group's best accuracy
        let group_best = points[order[start]].1;
        for &i in &order[start..end] {
            let acc = points[i].1;
            let dominated = best_cheaper >= acc || group_best > acc;
            out.push(ParetoPoint { index: i, flops, accuracy: acc, dominated });
        }
        best_cheaper = best_cheaper.max(group_best);
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputShape, Layer};
    use proptest::prelude::*;

    fn dense43() -> ModelSpec {
        ModelSpec::new("d", InputShape::Flat(4), vec![Layer::dense(4, 3)], 3).unwrap()
    }

    #[test]
    fn dense_fixture() {
        let m = dense43();
        let c = CostModel::default();
        assert_eq!(epoch_flops(&m, &c, 1, None).unwrap(), 48);
        let mut bits = vec![false; 15];
        bits[..6].iter_mut().for_each(|b| *b = true);
        bits[12..].iter_mut().for_each(|b| *b = true);
        let half = Mask::from_bits(bits);
        assert_eq!(epoch_flops(&m, &c, 1, Some(&half)).unwrap(), 36);
        assert_eq!(epoch_flops(&m, &c, 0, Some(&half)).unwrap(), 0);
        assert_eq!(epoch_flops(&m, &c, 10, None).unwrap(), 480);
    }

    #[test]
    fn conv_counts_positions() {
        let m = ModelSpec::new(
            "c",
            InputShape::Image { channels: 1, height: 4, width: 4 },
            vec![
                Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, padding: 1, height: 4, width: 4 },
                Layer::Flatten,
                Layer::dense(32, 2),
            ],
            2,
        )
        .unwrap();
        let l = layer_costs(&m, &CostModel::default(), None).unwrap();
        assert_eq!(l[0].forward, 2 * 18 * 16);
        assert_eq!(l[1].forward, 2 * 64);
    }

    #[test]
    fn recipe_phase_arithmetic() {
        let m = dense43();
        let c = CostModel::default();
        let mask = Mask::from_bits((0..15).map(|i| i % 2 == 0 || i >= 12).collect());
        let phases = vec![
            PhaseSpec { phase: Some(Phase::Warmup), epochs: 5, samples_per_epoch: 100, mask: None },
            PhaseSpec { phase: Some(Phase::Discovery), epochs: 15, samples_per_epoch: 100, mask: None },
            PhaseSpec { phase: Some(Phase::Masked), epochs: 15, samples_per_epoch: 100, mask: Some(mask.clone()) },
        ];
        let ledger = recipe_flops(&m, &c, &phases).unwrap();
        let full = epoch_flops(&m, &c, 100, None).unwrap();
        let masked = epoch_flops(&m, &c, 100, Some(&mask)).unwrap();
        assert_eq!(ledger.backprop_total(LedgerMode::ExcludeDiscovery), 5 * full + 15 * masked);
        assert_eq!(ledger.backprop_total(LedgerMode::CountDiscovery), 20 * full + 15 * masked);
        assert_eq!(ledger, recipe_flops(&m, &c, &phases).unwrap());
        let untagged = vec![PhaseSpec { phase: None, epochs: 1, samples_per_epoch: 1, mask: None }];
        assert!(matches!(recipe_flops(&m, &c, &untagged), Err(Error::UntaggedPhase(0))));
    }

    #[test]
    fn pareto_examples() {
        let p = pareto_points(&[(100, 0.9), (200, 0.8)]);
        assert_eq!(p.iter().map(|x| x.dominated).collect::<Vec<_>>(), vec![false, true]);
        assert!(!pareto_points(&[(5, 0.1)])[0].dominated);
        let p = pareto_points(&[(200, 0.95), (100, 0.8), (150, 0.9)]);
        assert_eq!(p.iter().map(|x| x.flops).collect::<Vec<_>>(), vec![100, 150, 200]);
        assert!(p.iter().all(|x| !x.dominated));
        let p = pareto_points(&[(100, 0.5), (100, 0.5), (100, 0.4)]);
        assert_eq!(p.iter().map(|x| x.dominated).collect::<Vec<_>>(), vec![false, false, true]);
    }

    fn brute(points: &[(u64, f64)]) -> Vec<bool> {
        points
            .iter()
            .map(|&(f, a)| points.iter().any(|&(g, b)| g <= f && b >= a && (g < f || b > a)))
            .collect()
    }

    proptest! {
        #[test]
        fn pareto_matches_pairwise(points in prop::collection::vec((0u64..20, 0u32..10), 1..50)) {
            let pts: Vec<(u64, f64)> = points.iter().map(|&(f, a)| (f, a as f64 / 10.0)).collect();
            let expect = brute(&pts);
            let got = pareto_points(&pts);
            prop_assert!(got.windows(2).all(|w| w[0].flops <= w[1].flops));
            for p in got {
                prop_assert_eq!(p.dominated, expect[p.index]);
            }
        }
    }
}
