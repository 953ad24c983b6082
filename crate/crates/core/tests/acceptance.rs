//! End-to-end acceptance checks, one test per criterion.
//!
//! Every test prints a single `PASS`/`FAIL` line straight to stdout (bypassing
//! the test harness capture) and then asserts.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use llab::autodiff::{hvp, loss_and_grad, Batch};
use llab::complexity::{epoch_flops, pareto_points, recipe_flops, CostModel, Phase, PhaseSpec, SampleCost};
use llab::config::ExperimentConfig;
use llab::data::{load_dataset, BlobsSpec, Dataset, DatasetSpec};
use llab::grid::run_grid;
use llab::hessian::{
    dense_hessian, lanczos, ritz, slq, spectrum_experiment, symmetric_eigenvalues, HessianDomain, HessianOperator, Histogram,
    RitzPair, SlqSettings, SpectrumSettings,
};
use llab::lottery::{self, *};
use llab::mask::{magnitude_prune, Mask};
use llab::model::{build_model, init_params, InputShape, Layer, ModelSpec};

fn report(id: u32, what: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} criterion {id}: {what} ({detail})");
    let _ = out.flush();
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// The desk-scale task: default blobs and `mlp-small`.
fn desk_task() -> (ModelSpec, Dataset, Dataset) {
    let (train, test) = load_dataset(&DatasetSpec::SyntheticBlobs(BlobsSpec::default())).unwrap();
    let model = build_model("mlp-small", train.shape(), train.n_classes()).unwrap();
    (model, train, test)
}

fn desk_recipe(seed: u64) -> TrainRecipe {
    TrainRecipe { seed, ..Default::default() }
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelSpec {
    let classes = rng.gen_range(2..=5);
    if rng.gen_bool(0.3) {
        let channels = rng.gen_range(1..=2);
        let side = 4;
        let out_ch = rng.gen_range(2..=3);
        let layers = vec![
            Layer::Conv2d { in_channels: channels, out_channels: out_ch, kernel: 3, padding: 1, height: side, width: side },
            Layer::Relu,
            Layer::MaxPool2d { channels: out_ch, height: side, width: side },
            Layer::Flatten,
            Layer::dense(out_ch * 4, classes),
        ];
        return ModelSpec::new("rand-conv", InputShape::Image { channels, height: side, width: side }, layers, classes).unwrap();
    }
    let input = rng.gen_range(2..=8);
    let depth = rng.gen_range(1..=2);
    let mut layers = Vec::new();
    let mut width = input;
    for _ in 0..depth {
        let next = rng.gen_range(2..=14);
        layers.push(Layer::Dense { inputs: width, outputs: next, bias: rng.gen_bool(0.8) });
        layers.push(Layer::Relu);
        width = next;
    }
    layers.push(Layer::dense(width, classes));
    ModelSpec::new("rand-mlp", InputShape::Flat(input), layers, classes).unwrap()
}

#[test]
fn criterion_1_gradient_and_hvp_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_g, mut worst_h, mut worst_sym) = (0.0f64, 0.0f64, 0.0f64);
    let mut max_params = 0;
    for _ in 0..20 {
        let model = random_model(&mut rng);
        let n = model.param_count();
        max_params = max_params.max(n);
        // random biases too, so no unit sits exactly at a ReLU kink
        let mut w = init_params(&model, rng.gen()).into_vec();
        for (x, e) in w.iter_mut().zip(gauss(&mut rng, n, 0.1)) {
            *x += e;
        }
        let samples = 6;
        let inputs = gauss(&mut rng, samples * model.input().size(), 1.0);
        let labels = (0..samples).map(|_| rng.gen_range(0..model.n_classes())).collect();
        let batch = Batch::new(inputs, labels);

        let (_, g) = loss_and_grad::<f64>(&model, &w, &batch).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let (mut p, mut m) = (w.clone(), w.clone());
                p[i] += h;
                m[i] -= h;
                let lp = loss_and_grad::<f64>(&model, &p, &batch).unwrap().0;
                let lm = loss_and_grad::<f64>(&model, &m, &batch).unwrap().0;
                (lp - lm) / (2.0 * h)
            })
            .collect();
        worst_g = worst_g.max(rel_err(&g, &fd));

        let u = gauss(&mut rng, n, 1.0);
        let v = gauss(&mut rng, n, 1.0);
        let hu = hvp::<f64>(&model, &w, &batch, &u).unwrap();
        let hv = hvp::<f64>(&model, &w, &batch, &v).unwrap();
        let eps = 1e-5;
        let shifted = |s: f64| -> Vec<f64> {
            let p: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a + s * b).collect();
            loss_and_grad::<f64>(&model, &p, &batch).unwrap().1.into_vec()
        };
        let (gp, gm) = (shifted(eps), shifted(-eps));
        let fd_hu: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        worst_h = worst_h.max(rel_err(&hu, &fd_hu));
        let (a, b) = (dot(&hu, &v), dot(&hv, &u));
        worst_sym = worst_sym.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
    }
    let ok = max_params <= 1000 && worst_g <= 1e-4 && worst_h <= 1e-4 && worst_sym <= 1e-8;
    report(
        1,
        "gradient/HVP vs finite differences on 20 random models",
        ok,
        &format!("max params {max_params}, grad rel err {worst_g:.2e}, hvp rel err {worst_h:.2e}, symmetry {worst_sym:.2e}"),
    );
    assert!(ok);
}

fn tiny_task(dim: usize, hidden: usize) -> (ModelSpec, Dataset, Dataset) {
    let spec = BlobsSpec { n_classes: 3, dim, n_train: 150, n_test: 60, seed: 5, clusters_per_class: 2, ..Default::default() };
    let (train, test) = load_dataset(&DatasetSpec::SyntheticBlobs(spec)).unwrap();
    let layers = vec![Layer::dense(dim, hidden), Layer::Relu, Layer::dense(hidden, 3)];
    let model = ModelSpec::new("tiny", InputShape::Flat(dim), layers, 3).unwrap();
    (model, train, test)
}

/// Max distance from any point of `a` to the nearest point of `b`.
fn one_sided(a: &[f64], b: &[f64]) -> f64 {
    a.iter().map(|x| b.iter().map(|y| (x - y).abs()).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
}

#[test]
fn criterion_2_lanczos_and_slq_match_the_dense_spectrum() {
    // an unmasked net, and a larger one pruned below 300 active entries
    let cases = [(8usize, 16usize, 100.0), (10, 24, 70.0)];
    let mut worst_eig = 0.0f64;
    let mut worst_l1 = 0.0f64;
    let mut dims = Vec::new();
    for (dim, hidden, retain) in cases {
        let (model, train, test) = tiny_task(dim, hidden);
        let ctx = TrainContext::new(&model, &train, &test).unwrap();
        let recipe = TrainRecipe { epochs: 3, batch_size: 25, ..Default::default() };
        let w0 = init_params(&model, 1);
        let (w, _, _) =
            lottery::train(&ctx, &w0, &recipe, &UpdateRule::Vanilla, 0, Phase::Full, AlgorithmTag::Vanilla, &mut NoObserver).unwrap();
        let mask = magnitude_prune(&w, retain, &Mask::ones(w.len()), &model.layout().weight_flags()).unwrap();
        let wm = llab::mask::apply_mask(&w, &mask).unwrap();
        let batches: Vec<Batch> = train.batches(train.len()).collect();
        let op = HessianOperator::new(&model, &wm, &mask, &batches, HessianDomain::Restricted).unwrap();
        let n = op.dim();
        dims.push(n);
        assert!(n <= 300);

        let dense = dense_hessian(|v| op.apply(v), n).unwrap();
        let eig = symmetric_eigenvalues(&dense);
        let t = lanczos(|v| op.apply(v), n, n, 9).unwrap();
        let rz: Vec<f64> = ritz(&t).iter().map(|p| p.value).collect();
        worst_eig = worst_eig.max(one_sided(&rz, &eig)).max(one_sided(&eig, &rz));

        let est = slq(|v| op.apply(v), n, &SlqSettings { n_probes: 8, lanczos_steps: 80, ..Default::default() }).unwrap();
        let points: Vec<RitzPair> = eig.iter().map(|&value| RitzPair { value, weight: 1.0 / n as f64 }).collect();
        let exact = Histogram::broadened(&points, &est.histogram.edges, est.sigma);
        worst_l1 = worst_l1.max(est.histogram.l1(&exact).unwrap());
    }
    let ok = worst_eig <= 1e-6 && worst_l1 <= 0.1;
    report(
        2,
        "Lanczos eigenvalues and SLQ density vs dense Hessian",
        ok,
        &format!("dims {dims:?}, eigenvalue err {worst_eig:.2e}, histogram L1 {worst_l1:.4}"),
    );
    assert!(ok);
}

/// Per training segment (one `on_start` each): which entries stayed exactly zero,
/// and which stayed bit-equal to the segment's starting value, at every step.
#[derive(Default)]
struct Invariants {
    segments: Vec<Segment>,
}

struct Segment {
    phase: Phase,
    start: Vec<f64>,
    always_zero: Vec<bool>,
    always_start: Vec<bool>,
    steps: usize,
}

impl Observer for Invariants {
    fn on_start(&mut self, phase: Phase, _start_epoch: usize, params: &[f64]) {
        let n = params.len();
        self.segments.push(Segment { phase, start: params.to_vec(), always_zero: vec![true; n], always_start: vec![true; n], steps: 0 });
    }

    fn on_step(&mut self, _phase: Phase, _epoch: usize, _step: usize, params: &[f64]) {
        let s = self.segments.last_mut().unwrap();
        s.steps += 1;
        for (i, &p) in params.iter().enumerate() {
            s.always_zero[i] &= p == 0.0;
            s.always_start[i] &= p.to_bits() == s.start[i].to_bits();
        }
    }
}

impl Invariants {
    fn of(&self, phase: Phase) -> Vec<&Segment> {
        self.segments.iter().filter(|s| s.phase == phase && s.steps > 0).collect()
    }
}

#[test]
fn criterion_3_update_rule_invariants_hold_at_every_step() {
    let (model, train, test) = desk_task();
    let ctx = TrainContext::new(&model, &train, &test).unwrap();
    let recipe = desk_recipe(0);
    let w0 = init_params(&model, 0);
    let k = 2;
    let mut store = CheckpointStore::in_memory();

    let mut lot_obs = Invariants::default();
    let lot = warmup_and_dispatch(&ctx, &w0, k, &recipe, Method::Ilot { retain: 10.0, iterations: 2 }, &mut store, &mut lot_obs).unwrap();
    let mut chain = lot.masks.clone();
    chain.push(lot.mask.clone().unwrap());
    let lot_segments: Vec<&Segment> = lot_obs.of(Phase::Discovery).into_iter().chain(lot_obs.of(Phase::Masked)).collect();
    let lot_ok = lot_segments.len() == chain.len()
        && lot_segments
            .iter()
            .zip(&chain)
            .all(|(s, m)| (0..m.len()).filter(|&i| !m.is_active(i)).all(|i| s.always_zero[i]));
    let lot_steps: usize = lot_segments.iter().map(|s| s.steps).sum();

    let mut rise_obs = Invariants::default();
    let rise = warmup_and_dispatch(&ctx, &w0, k, &recipe, Method::Rise { retain: 10.0 }, &mut store, &mut rise_obs).unwrap();
    let wk = store.get(k).unwrap().params.clone();
    let rm = rise.mask.clone().unwrap();
    let masked = rise_obs.of(Phase::Masked);
    let rise_ok = masked.len() == 1
        && bits(&masked[0].start) == bits(&wk)
        && (0..rm.len()).filter(|&i| !rm.is_active(i)).all(|i| masked[0].always_start[i])
        && (0..rm.len()).filter(|&i| !rm.is_active(i)).all(|i| rise.result.final_params[i].to_bits() == wk[i].to_bits());

    let full = warmup_and_dispatch(&ctx, &w0, 0, &recipe, Method::Rise { retain: 100.0 }, &mut store, &mut NoObserver).unwrap();
    let vanilla = warmup_and_dispatch(&ctx, &w0, 0, &recipe, Method::Vanilla, &mut store, &mut NoObserver).unwrap();
    let same_ok = bits(&full.result.final_params) == bits(&vanilla.result.final_params)
        && full.result.train_loss == vanilla.result.train_loss
        && full.result.test_accuracy_curve == vanilla.result.test_accuracy_curve;

    let ok = lot_ok && rise_ok && same_ok;
    report(
        3,
        "LOT zeros, RISE frozen entries, RISE R=100 equals vanilla",
        ok,
        &format!("LOT zeros {lot_ok} over {lot_steps} steps, RISE frozen {rise_ok} over {} steps, R=100 bit-identical {same_ok}", masked.first().map_or(0, |s| s.steps)),
    );
    assert!(ok);
}

#[test]
fn criterion_4_lottery_loop_structure() {
    let (model, train, test) = desk_task();
    let ctx = TrainContext::new(&model, &train, &test).unwrap();
    let recipe = TrainRecipe { epochs: 6, seed: 1, ..Default::default() };
    let w0 = init_params(&model, 1);
    let (k, retain) = (2, 20.0);
    let mut store = CheckpointStore::in_memory();
    let mut obs = Invariants::default();
    let cell = warmup_and_dispatch(&ctx, &w0, k, &recipe, Method::Ilot { retain, iterations: 3 }, &mut store, &mut obs).unwrap();
    let wk = store.get(k).unwrap().params.clone();
    let flags = model.layout().weight_flags();

    let mut chain = cell.masks.clone();
    chain.push(cell.mask.clone().unwrap());
    let nested = chain.windows(2).all(|p| p[1].is_submask_of(&p[0]));
    // integer oracle for ceil(R/100 * previous) with R = 20
    let counts: Vec<usize> = chain.iter().map(|m| m.active_within(&flags)).collect();
    let counts_ok = counts.windows(2).all(|c| c[1] == (c[0] * 20).div_ceil(100));
    let biases_kept = chain.iter().all(|m| (0..m.len()).filter(|&i| !flags[i]).all(|i| m.is_active(i)));

    let starts: Vec<&Segment> = obs.segments.iter().filter(|s| matches!(s.phase, Phase::Discovery | Phase::Masked)).collect();
    let rewind_ok = starts.len() == chain.len()
        && starts.iter().zip(&chain).all(|(s, m)| {
            (0..m.len()).all(|i| {
                let want = if m.is_active(i) { wk[i].to_bits() } else { 0.0f64.to_bits() };
                s.start[i].to_bits() == want
            })
        });

    let ok = nested && counts_ok && biases_kept && rewind_ok;
    report(
        4,
        "I-LOT mask chain, pruning counts and rewind",
        ok,
        &format!("active weights {counts:?}, nested {nested}, rewind to W^k*M bit-exact {rewind_ok}"),
    );
    assert!(ok);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_5_sparse_tickets_have_flatter_spectra() {
    let (model, train, test) = desk_task();
    let ctx = TrainContext::new(&model, &train, &test).unwrap();
    let k = 1;
    // full training set, 8 probes, 80 Lanczos steps, 201 bins
    let settings = SpectrumSettings::default();
    let (mut wins, mut between) = (0, 0);
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let w0 = init_params(&model, seed);
        let mut store = CheckpointStore::in_memory();
        let rows = spectrum_experiment(&ctx, &w0, &[k], &[10.0, 50.0], &desk_recipe(seed), &mut store, &settings).unwrap();
        let nzm = |r: f64, reference: bool| {
            rows.iter().find(|row| row.reference == reference && (reference || row.retain == r)).unwrap().flatness.near_zero_mass
        };
        let (r10, r50, reference) = (nzm(10.0, false), nzm(50.0, false), nzm(100.0, true));
        if r10 > reference {
            wins += 1;
        }
        // "within noise" taken as 0.05 of near-zero mass
        let (lo, hi) = (r10.min(reference), r10.max(reference));
        if (lo..=hi).contains(&r50) || (r50 - reference).abs() <= 0.05 {
            between += 1;
        }
        lines.push(format!("seed {seed}: R10 {r10:.3} R50 {r50:.3} ref {reference:.3}"));
    }
    let ok = wins >= 2 && between >= 2;
    report(
        5,
        "near-zero Hessian mass: R=10 above reference, R=50 in between",
        ok,
        &format!("k={k}, R10 > ref in {wins}/3 seeds, R50 ordered in {between}/3; {}", lines.join("; ")),
    );
    assert!(ok);
}

#[test]
fn criterion_6_rise_beats_one_shot_lot_and_improves_with_k() {
    let (model, train, test) = desk_task();
    let ctx = TrainContext::new(&model, &train, &test).unwrap();
    let ks = [0usize, 5, 10];
    let mut gaps_at_5 = Vec::new();
    let mut rise_by_k = vec![Vec::new(); ks.len()];
    for seed in 0..3u64 {
        let w0 = init_params(&model, seed);
        let recipe = desk_recipe(seed);
        let mut store = CheckpointStore::in_memory();
        for (j, &k) in ks.iter().enumerate() {
            let lot = warmup_and_dispatch(&ctx, &w0, k, &recipe, Method::Ilot { retain: 10.0, iterations: 1 }, &mut store, &mut NoObserver)
                .unwrap();
            let rise = warmup_and_dispatch(&ctx, &w0, k, &recipe, Method::Rise { retain: 10.0 }, &mut store, &mut NoObserver).unwrap();
            rise_by_k[j].push(rise.result.test_accuracy);
            if k == 5 {
                gaps_at_5.push(rise.result.test_accuracy - lot.result.test_accuracy);
            }
        }
    }
    let gap = median(gaps_at_5);
    let medians: Vec<f64> = rise_by_k.into_iter().map(median).collect();
    let monotone = medians.windows(2).all(|m| m[1] >= m[0]);
    let ok = gap >= 0.05 && monotone;
    report(
        6,
        "RISE vs 1-LOT at R=10",
        ok,
        &format!("median gap at k=5 {:.1} points, RISE median accuracy over k=0,5,10 {:?}", 100.0 * gap, medians.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>()),
    );
    assert!(ok);
}

#[test]
fn criterion_7_flop_ledger_and_pareto_front() {
    let cost = CostModel::default();
    let fixture = ModelSpec::new("fixture", InputShape::Flat(4), vec![Layer::Dense { inputs: 4, outputs: 3, bias: false }], 3).unwrap();
    let full = SampleCost::of(&fixture, &cost, None).unwrap().backward();
    let half = Mask::from_bits((0..12).map(|i| i % 2 == 0).collect());
    let halved = SampleCost::of(&fixture, &cost, Some(&half)).unwrap().backward();
    let fixture_ok = full == 48 && halved == 36;

    let (model, train, test) = tiny_task(8, 16);
    let ctx = TrainContext::new(&model, &train, &test).unwrap();
    let recipe = TrainRecipe { epochs: 6, batch_size: 25, ..Default::default() };
    let w0 = init_params(&model, 0);
    let n = train.len();
    let spec = |phase, epochs, mask: Option<Mask>| PhaseSpec { phase: Some(phase), epochs, samples_per_epoch: n, mask };
    let mut store = CheckpointStore::in_memory();
    let rise = warmup_and_dispatch(&ctx, &w0, 2, &recipe, Method::Rise { retain: 30.0 }, &mut store, &mut NoObserver).unwrap();
    let rise_expect =
        recipe_flops(&model, &cost, &[spec(Phase::Warmup, 2, None), spec(Phase::Discovery, 4, None), spec(Phase::Masked, 4, rise.mask.clone())])
            .unwrap();
    let lot = warmup_and_dispatch(&ctx, &w0, 2, &recipe, Method::Ilot { retain: 30.0, iterations: 2 }, &mut store, &mut NoObserver).unwrap();
    let lot_expect = recipe_flops(
        &model,
        &cost,
        &[
            spec(Phase::Warmup, 2, None),
            spec(Phase::Discovery, 4, Some(lot.masks[0].clone())),
            spec(Phase::Discovery, 4, Some(lot.masks[1].clone())),
            spec(Phase::Masked, 4, lot.mask.clone()),
        ],
    )
    .unwrap();
    let vanilla = warmup_and_dispatch(&ctx, &w0, 2, &recipe, Method::Vanilla, &mut store, &mut NoObserver).unwrap();
    let vanilla_expect = recipe_flops(&model, &cost, &[spec(Phase::Full, 6, None)]).unwrap();
    let recipes_ok = rise.result.ledger == rise_expect && lot.result.ledger == lot_expect && vanilla.result.ledger == vanilla_expect;

    let (big, btrain, _) = desk_task();
    let w = init_params(&big, 3);
    let flags = big.layout().weight_flags();
    let dense_epoch = epoch_flops(&big, &cost, btrain.len(), None).unwrap();
    let cheaper_ok = [1.0, 10.0, 25.0, 50.0, 90.0, 99.0].iter().all(|&r| {
        let m = magnitude_prune(&w, r, &Mask::ones(w.len()), &flags).unwrap();
        epoch_flops(&big, &cost, btrain.len(), Some(&m)).unwrap() < dense_epoch
    });

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pareto_ok = true;
    for case in 0..300 {
        let len = rng.gen_range(1..=50);
        // coarse values so ties in either coordinate are common
        let pts: Vec<(u64, f64)> = (0..len).map(|_| (rng.gen_range(0..12u64) * 1000, rng.gen_range(0..10) as f64 / 10.0)).collect();
        let got = pareto_points(&pts);
        let sorted = got.windows(2).all(|w| w[0].flops <= w[1].flops);
        let mut seen = vec![false; len];
        for p in &got {
            seen[p.index] = true;
            let (f, a) = pts[p.index];
            let brute = pts.iter().any(|&(g, b)| g <= f && b >= a && (g < f || b > a));
            if brute != p.dominated || p.flops != f || p.accuracy != a {
                pareto_ok = false;
            }
        }
        if !sorted || seen.contains(&false) {
            pareto_ok = false;
        }
        if !pareto_ok {
            eprintln!("pareto mismatch in case {case}: {pts:?}");
            break;
        }
    }

    let ok = fixture_ok && recipes_ok && cheaper_ok && pareto_ok;
    report(
        7,
        "FLOP ledger fixture, recipe totals, masked savings, Pareto flags",
        ok,
        &format!("4->3 backward {full}/{halved}, recipe cross-check {recipes_ok}, masked cheaper {cheaper_ok}, pareto vs brute force {pareto_ok}"),
    );
    assert!(ok);
}

const GRID: &str = r#"
[model]
name = "mlp-small"
hidden = [32, 16]

[dataset]
kind = "synthetic-blobs"
n_train = 400
n_test = 200
dim = 10
n_classes = 4
clusters_per_class = 3

[recipe]
epochs = 4
batch_size = 50

[grid]
algorithms = ["ilot", "rise"]
retain = [10, 50, 90]
k = [0, 2]
seeds = [0]
"#;

fn csv_without_wall_clock(dir: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(dir.join("results.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let skip = headers.iter().position(|h| h == "wall_clock_s").unwrap();
    let mut rows = vec![headers.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, h)| h.to_string()).collect()];
    for rec in reader.records() {
        let rec = rec.unwrap();
        rows.push(rec.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, v)| v.to_string()).collect());
    }
    rows
}

#[test]
fn criterion_8_grid_rerun_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(GRID, tmp.path()).unwrap();
    let a = run_grid(&cfg, &tmp.path().join("a"), 1).unwrap();
    let b = run_grid(&cfg, &tmp.path().join("b"), 2).unwrap();
    let (ca, cb) = (csv_without_wall_clock(&tmp.path().join("a")), csv_without_wall_clock(&tmp.path().join("b")));
    let ok = a.rows.len() == 12 && a.failures == 0 && b.failures == 0 && ca == cb;
    report(
        8,
        "12-cell grid rerun gives an identical results.csv",
        ok,
        &format!("{} cells, {} failures, identical apart from wall clock: {}", a.rows.len(), a.failures + b.failures, ca == cb),
    );
    assert!(ok);
}
