//! Hessian spectral density of the training loss on the masked model.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::autodiff::{hvp, Batch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::complexity::Phase;
use crate::lottery::{train, warmup, AlgorithmTag, CheckpointStore, NoObserver, TrainContext, TrainRecipe, UpdateRule};
use crate::mask::{apply_mask, magnitude_prune, validate_retain, Mask};
use crate::model::ModelSpec;

/// Coordinates the Hessian is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianDomain {
    /// Active coordinates only; pruned entries are not optimization variables.
    #[default]
    Restricted,
    /// All coordinates, evaluated at the masked point.
    Full,
}

/// `H v` restricted to the active subspace of `mask`: `v` is embedded on the
/// active coordinates, multiplied by the full Hessian at `params`, and the
/// result projected back.
pub fn masked_hvp(model: &ModelSpec, params: &[f64], mask: &Mask, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
    let op = HessianOperator::new(model, params, mask, std::slice::from_ref(batch), HessianDomain::Restricted)?;
    op.apply(v)
}

/// Puts `v` (indexed by active position) into a full-length vector, zeros elsewhere.
pub fn embed(mask: &Mask, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != mask.active_count() {
        return Err(Error::Length { expected: mask.active_count(), got: v.len() });
    }
    let mut out = vec![0.0; mask.len()];
    for (&i, &x) in mask.active_indices().iter().zip(v) {
        out[i] = x;
    }
    Ok(out)
}

/// Active coordinates of a full-length vector.
pub fn project(mask: &Mask, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != mask.len() {
        return Err(Error::Length { expected: mask.len(), got: w.len() });
    }
    Ok(mask.active_indices().iter().map(|&i| w[i]).collect())
}

/// Hessian of the mean loss over a fixed list of batches, as a linear operator.
pub struct HessianOperator<'a> {
    model: &'a ModelSpec,
    params: Vec<f64>,
    mask: Mask,
    batches: &'a [Batch],
    total: usize,
    domain: HessianDomain,
}

impl<'a> HessianOperator<'a> {
    pub fn new(model: &'a ModelSpec, params: &[f64], mask: &Mask, batches: &'a [Batch], domain: HessianDomain) -> Result<Self> {
        let n = model.param_count();
        if params.len() != n {
            return Err(Error::Length { expected: n, got: params.len() });
        }
        if mask.len() != n {
            return Err(Error::Length { expected: n, got: mask.len() });
        }
        let total: usize = batches.iter().map(Batch::len).sum();
        if total == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(HessianOperator { model, params: params.to_vec(), mask: mask.clone(), batches, total, domain })
    }

    pub fn dim(&self) -> usize {
        match self.domain {
            HessianDomain::Restricted => self.mask.active_count(),
            HessianDomain::Full => self.mask.len(),
        }
    }

    /// Sample-weighted mean of the per-batch products, accumulated in batch order.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let full_v = match self.domain {
            HessianDomain::Restricted => embed(&self.mask, v)?,
            HessianDomain::Full if v.len() == self.mask.len() => v.to_vec(),
            HessianDomain::Full => return Err(Error::Length { expected: self.mask.len(), got: v.len() }),
        };
        let mut acc = vec![0.0; full_v.len()];
        for b in self.batches.iter().filter(|b| !b.is_empty()) {
            let hv = hvp::<f64>(self.model, &self.params, b, &full_v)?;
            let w = b.len() as f64 / self.total as f64;
            for (a, h) in acc.iter_mut().zip(hv.iter()) {
                *a += w * h;
            }
        }
        match self.domain {
            HessianDomain::Restricted => project(&self.mask, &acc),
            HessianDomain::Full => Ok(acc),
        }
    }
}

/// Lanczos coefficients: `alpha` on the diagonal, `beta` off it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tridiagonal {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Step at which `beta` fell below the breakdown threshold, if it did.
    pub breakdown: Option<usize>,
}

impl Tridiagonal {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }
}

pub const BREAKDOWN_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Random-sign probe of unit norm.
pub fn rademacher(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| if rng.gen::<bool>() { s } else { -s }).collect()
}

/// Lanczos tridiagonalization with full reorthogonalization, from a
/// Rademacher start vector drawn from `seed`.
pub fn lanczos<F>(oracle: F, dim: usize, steps: usize, seed: u64) -> Result<Tridiagonal>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(crate::PROBE_STREAM);
    lanczos_from(oracle, rademacher(dim, &mut rng), steps)
}

pub fn lanczos_from<F>(mut oracle: F, start: Vec<f64>, steps: usize) -> Result<Tridiagonal>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let dim = start.len();
    if dim == 0 {
        return Err(Error::Invalid("Lanczos needs a non-empty space".into()));
    }
    if steps == 0 || steps > dim {
        return Err(Error::Invalid(format!("Lanczos steps must be in 1..={dim}, got {steps}")));
    }
    let n0 = norm(&start);
    if !(n0.is_finite() && n0 > 0.0) {
        return Err(Error::Invalid("Lanczos start vector must be non-zero".into()));
    }
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / n0).collect()];
    let (mut alpha, mut beta) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    let mut breakdown = None;
    for j in 0..steps {
        let q = &basis[j];
        let mut w = oracle(q)?;
        if w.len() != dim {
            return Err(Error::Length { expected: dim, got: w.len() });
        }
        let a = dot(&w, q);
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("Lanczos step {j}")));
        }
        alpha.push(a);
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        if j + 1 == steps {
            break;
        }
        let nb = norm(&w);
        if nb < BREAKDOWN_TOL {
            breakdown = Some(j + 1);
            break;
        }
        beta.push(nb);
        basis.push(w.into_iter().map(|x| x / nb).collect());
    }
    Ok(Tridiagonal { alpha, beta, breakdown })
}

/// Eigenvalue and quadrature weight (squared first eigenvector component).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RitzPair {
    pub value: f64,
    pub weight: f64,
}

/// Ritz values of `t` in ascending order with their Gauss quadrature weights.
pub fn ritz(t: &Tridiagonal) -> Vec<RitzPair> {
    let m = t.alpha.len();
    let mut mat = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        mat[(i, i)] = t.alpha[i];
        if i + 1 < m {
            mat[(i, i + 1)] = t.beta[i];
            mat[(i + 1, i)] = t.beta[i];
        }
    }
    let eig = SymmetricEigen::new(mat);
    let mut pairs: Vec<RitzPair> = (0..m)
        .map(|i| RitzPair { value: eig.eigenvalues[i], weight: eig.eigenvectors[(0, i)].powi(2) })
        .collect();
    pairs.sort_by(|a, b| a.value.total_cmp(&b.value));
    pairs
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (rows[i][j] + rows[j][i]));
    let mut ev: Vec<f64> = SymmetricEigen::new(mat).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Dense Hessian assembled column by column from products with unit vectors.
pub fn dense_hessian<F>(mut oracle: F, dim: usize) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut cols = Vec::with_capacity(dim);
    let mut e = vec![0.0; dim];
    for i in 0..dim {
        e[i] = 1.0;
        cols.push(oracle(&e)?);
        e[i] = 0.0;
    }
    // cols[i] is column i; return rows
    Ok((0..dim).map(|r| (0..dim).map(|c| cols[c][r]).collect()).collect())
}

/// Binned probability mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Histogram {
    /// `bins` equal bins over `[lo, hi]`; a zero-width range is widened symmetrically.
    pub fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
        let (lo, hi) = if hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1e-300) {
            (lo, hi)
        } else {
            let pad = 0.5 * lo.abs().max(1e-6);
            (lo - pad, hi + pad)
        };
        (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
    }

    /// Weighted points smeared by a Gaussian of width `sigma` and integrated over each bin.
    /// The outer bins absorb the tails, so the mass always sums to the total weight.
    pub fn broadened(points: &[RitzPair], edges: &[f64], sigma: f64) -> Histogram {
        let bins = edges.len() - 1;
        let mut mass = vec![0.0; bins];
        let cdf = |x: f64, mu: f64| {
            if sigma > 0.0 {
                0.5 * (1.0 + erf((x - mu) / (sigma * std::f64::consts::SQRT_2)))
            } else if x >= mu {
                1.0
            } else {
                0.0
            }
        };
        for p in points {
            let mut prev = 0.0;
            for (b, m) in mass.iter_mut().enumerate() {
                let c = if b + 1 == bins { 1.0 } else { cdf(edges[b + 1], p.value) };
                *m += p.weight * (c - prev);
                prev = c;
            }
        }
        Histogram { edges: edges.to_vec(), mass }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn l1(&self, other: &Histogram) -> Result<f64> {
        if self.edges != other.edges {
            return Err(Error::Invalid("histograms must share bin edges".into()));
        }
        Ok(self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlqSettings {
    #[serde(default = "default_probes")]
    pub n_probes: usize,
    #[serde(default = "default_steps")]
    pub lanczos_steps: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub probe_seed: u64,
    #[serde(default)]
    pub domain: HessianDomain,
}

fn default_probes() -> usize {
    8
}
fn default_steps() -> usize {
    80
}
fn default_bins() -> usize {
    201
}

impl Default for SlqSettings {
    fn default() -> Self {
        SlqSettings {
            n_probes: default_probes(),
            lanczos_steps: default_steps(),
            bins: default_bins(),
            probe_seed: 0,
            domain: HessianDomain::Restricted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    /// Ritz pairs per probe; the weights of each probe sum to one.
    pub probes: Vec<Vec<RitzPair>>,
    pub n_probes: usize,
    pub lanczos_steps: usize,
    pub sigma: f64,
    pub histogram: Histogram,
}

impl SpectrumEstimate {
    /// All Ritz pairs, weights scaled by `1 / n_probes`.
    pub fn pooled(&self) -> Vec<RitzPair> {
        let s = 1.0 / self.probes.len() as f64;
        self.probes.iter().flatten().map(|p| RitzPair { value: p.value, weight: p.weight * s }).collect()
    }

    pub fn extent(&self) -> (f64, f64) {
        self.probes
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.value), hi.max(p.value)))
    }

    /// Re-bins the estimate onto `edges` with broadening `sigma`.
    pub fn rebin(&self, edges: &[f64], sigma: f64) -> Histogram {
        Histogram::broadened(&self.pooled(), edges, sigma)
    }
}

/// Stochastic Lanczos quadrature from an arbitrary symmetric operator.
pub fn slq<F>(mut oracle: F, dim: usize, settings: &SlqSettings) -> Result<SpectrumEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if settings.n_probes == 0 {
        return Err(Error::Invalid("at least one probe is required".into()));
    }
    if settings.bins == 0 {
        return Err(Error::Invalid("at least one histogram bin is required".into()));
    }
    let steps = settings.lanczos_steps.min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.probe_seed);
    rng.set_stream(crate::PROBE_STREAM);
    let mut probes = Vec::with_capacity(settings.n_probes);
    for _ in 0..settings.n_probes {
        let start = rademacher(dim, &mut rng);
        let t = lanczos_from(&mut oracle, start, steps)?;
        probes.push(ritz(&t));
    }
    let mut est = SpectrumEstimate { probes, n_probes: settings.n_probes, lanczos_steps: steps, sigma: 0.0, histogram: Histogram { edges: vec![], mass: vec![] } };
    let (lo, hi) = est.extent();
    let edges = Histogram::edges(lo, hi, settings.bins);
    est.sigma = (edges[settings.bins] - edges[0]) / settings.bins as f64;
    est.histogram = est.rebin(&edges, est.sigma);
    Ok(est)
}

/// Spectral density of the Hessian of the mean loss over `data`, visited in
/// fixed batches of `batch_size`, at `params` (which should already be masked).
pub fn slq_density(
    model: &ModelSpec,
    params: &[f64],
    mask: &Mask,
    data: &Dataset,
    batch_size: usize,
    settings: &SlqSettings,
) -> Result<SpectrumEstimate> {
    if data.is_empty() {
        return Err(Error::Invalid("spectrum dataset is empty".into()));
    }
    let batches: Vec<Batch> = data.batches(batch_size).collect();
    let op = HessianOperator::new(model, params, mask, &batches, settings.domain)?;
    slq(|v| op.apply(v), op.dim(), settings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub near_zero_mass: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eps_rel: f64,
    /// Every Ritz value was zero; the whole mass is counted as near zero.
    pub degenerate: bool,
}

/// Mass of the bins whose centre satisfies `|lambda| <= eps_rel * max|ritz value|`.
pub fn flatness(spec: &SpectrumEstimate, eps_rel: f64) -> FlatnessReport {
    let (lo, hi) = spec.extent();
    let scale = lo.abs().max(hi.abs());
    if scale.is_nan() || scale <= 0.0 {
        return FlatnessReport { near_zero_mass: 1.0, lambda_min: lo, lambda_max: hi, eps_rel, degenerate: true };
    }
    let cut = eps_rel * scale;
    let h = &spec.histogram;
    let mass: f64 = h.centers().iter().zip(&h.mass).filter(|(c, _)| c.abs() <= cut).map(|(_, m)| m).sum();
    FlatnessReport { near_zero_mass: mass.clamp(0.0, 1.0), lambda_min: lo, lambda_max: hi, eps_rel, degenerate: false }
}

/// Settings of a spectrum sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSettings {
    #[serde(default = "default_probes")]
    pub n_probes: usize,
    #[serde(default = "default_steps")]
    pub lanczos_steps: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub probe_seed: u64,
    #[serde(default)]
    pub domain: HessianDomain,
    #[serde(default = "default_eps_rel")]
    pub eps_rel: f64,
    #[serde(default = "default_hvp_batch")]
    pub batch_size: usize,
    /// Use only the first `samples` training samples; all of them when absent.
    #[serde(default)]
    pub samples: Option<usize>,
}

fn default_eps_rel() -> f64 {
    0.01
}
fn default_hvp_batch() -> usize {
    500
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        let slq = SlqSettings::default();
        SpectrumSettings {
            n_probes: slq.n_probes,
            lanczos_steps: slq.lanczos_steps,
            bins: slq.bins,
            probe_seed: slq.probe_seed,
            domain: slq.domain,
            eps_rel: default_eps_rel(),
            batch_size: default_hvp_batch(),
            samples: None,
        }
    }
}

impl SpectrumSettings {
    pub fn slq(&self) -> SlqSettings {
        SlqSettings {
            n_probes: self.n_probes,
            lanczos_steps: self.lanczos_steps,
            bins: self.bins,
            probe_seed: self.probe_seed,
            domain: self.domain,
        }
    }
}

/// One (k, R) cell of a spectrum sweep; `reference` marks the unmasked model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub k: usize,
    pub retain: f64,
    pub reference: bool,
    pub active_count: usize,
    pub dim: usize,
    pub estimate: SpectrumEstimate,
    pub flatness: FlatnessReport,
}

/// For every `k`: recover `W^k`, find one-shot LOT masks for every `R` from a
/// single full training started at `W^k`, and estimate the spectrum at
/// `W^k * M`; one more row per `k` holds the unmasked `W^k`.
pub fn spectrum_experiment(
    ctx: &TrainContext<'_>,
    w0: &[f64],
    k_list: &[usize],
    retain_list: &[f64],
    recipe: &TrainRecipe,
    store: &mut CheckpointStore,
    settings: &SpectrumSettings,
) -> Result<Vec<SpectrumRow>> {
    if k_list.is_empty() || retain_list.is_empty() {
        return Err(Error::Invalid("spectrum sweep needs at least one k and one R".into()));
    }
    for &r in retain_list {
        validate_retain(r)?;
    }
    let data = match settings.samples {
        Some(n) => ctx.train.head(n),
        None => ctx.train.clone(),
    };
    let n = ctx.model.param_count();
    let prunable = ctx.model.layout().weight_flags();
    let mut rows = Vec::with_capacity(k_list.len() * (retain_list.len() + 1));
    for &k in k_list {
        let wk = warmup(ctx, w0, k, recipe, store, &mut NoObserver)?.params;
        let (trained, _, _) = train(
            ctx,
            &wk,
            recipe,
            &UpdateRule::Lot(Mask::ones(n)),
            k,
            Phase::Discovery,
            AlgorithmTag::OneLot,
            &mut NoObserver,
        )?;
        let mut cells: Vec<(f64, bool, Mask)> = Vec::with_capacity(retain_list.len() + 1);
        for &r in retain_list {
            cells.push((r, false, magnitude_prune(&trained, r, &Mask::ones(n), &prunable)?));
        }
        cells.push((100.0, true, Mask::ones(n)));
        for (retain, reference, mask) in cells {
            let at = apply_mask(&wk, &mask)?;
            let estimate = slq_density(ctx.model, &at, &mask, &data, settings.batch_size, &settings.slq())?;
            let flatness = flatness(&estimate, settings.eps_rel);
            let dim = match settings.domain {
                HessianDomain::Restricted => mask.active_count(),
                HessianDomain::Full => n,
            };
            rows.push(SpectrumRow { k, retain, reference, active_count: mask.active_count(), dim, estimate, flatness });
        }
    }
    Ok(rows)
}
