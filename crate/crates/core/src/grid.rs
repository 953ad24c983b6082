//! Run grids, result persistence and plot data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::complexity::{pareto_points, FlopLedger, LedgerMode};
use crate::config::{Algorithm, ExperimentConfig};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::hessian::{spectrum_experiment, FlatnessReport, HessianDomain, Histogram, RitzPair, SpectrumRow};
use crate::lottery::{warmup, warmup_and_dispatch, CellOutcome, CheckpointStore, Method, NoObserver, RunResult, TrainContext, TrainRecipe};
use crate::mask::write_mask;
use crate::model::{init_params, ModelSpec};

pub const FLOP_CONVENTION: &str = "2*MAC";

/// One point of a run grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub retain: f64,
    pub k: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Cell {
    pub fn method(&self) -> Method {
        match self.algorithm {
            Algorithm::Vanilla => Method::Vanilla,
            Algorithm::Ilot => Method::Ilot { retain: self.retain, iterations: self.iterations },
            Algorithm::Rise => Method::Rise { retain: self.retain },
        }
    }

    pub fn name(&self) -> String {
        let tag = self.method().tag().as_str().to_lowercase();
        format!("{tag}_R{}_k{}_I{}_seed{}", self.retain, self.k, self.iterations, self.seed)
    }
}

/// Cells in grid order: algorithm, R, k, I, seed. Vanilla contributes one
/// cell per seed (R = 100, k = 0, I = 0); RISE does not iterate (I = 1).
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let g = &cfg.grid;
    let mut cells = Vec::new();
    let mut seen_vanilla = false;
    for &algorithm in &g.algorithms {
        match algorithm {
            Algorithm::Vanilla => {
                if seen_vanilla {
                    continue;
                }
                seen_vanilla = true;
                for &seed in &g.seeds {
                    cells.push(Cell { algorithm, retain: 100.0, k: 0, iterations: 0, seed });
                }
            }
            Algorithm::Ilot | Algorithm::Rise => {
                let iterations: &[usize] = if algorithm == Algorithm::Rise { &[1] } else { &g.iterations };
                for &retain in &g.retain {
                    for &k in &g.k {
                        for &i in iterations {
                            for &seed in &g.seeds {
                                cells.push(Cell { algorithm, retain, k, iterations: i, seed });
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

/// One line of the aggregate CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub algorithm: String,
    #[serde(rename = "R")]
    pub retain: f64,
    pub k: usize,
    #[serde(rename = "I")]
    pub iterations: usize,
    pub seed: u64,
    pub backprop_flops: Option<u64>,
    pub final_test_accuracy: Option<f64>,
    pub ledger_mode: LedgerMode,
    pub flop_convention: String,
    pub status: String,
    pub wall_clock_s: f64,
}

impl GridRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetHashes {
    pub train: String,
    pub test: String,
}

#[derive(Serialize)]
struct DiscoverySummary<'a> {
    test_accuracy: f64,
    active_count: usize,
    ledger: &'a FlopLedger,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    name: String,
    cell: Cell,
    status: &'static str,
    error: Option<String>,
    ledger_mode: LedgerMode,
    flop_convention: &'static str,
    backprop_flops: Option<u64>,
    dataset: &'a DatasetHashes,
    result: Option<&'a RunResult>,
    discovery: Vec<DiscoverySummary<'a>>,
    mask_file: Option<String>,
    config: &'a ExperimentConfig,
}

/// What a grid run left behind.
#[derive(Clone, Debug)]
pub struct GridSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<GridRow>,
    pub failures: usize,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::path(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::path(path, e))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    write_file(path, bytes)
}

struct Workbench {
    model: ModelSpec,
    train: Dataset,
    test: Dataset,
    hashes: DatasetHashes,
}

fn workbench(cfg: &ExperimentConfig) -> Result<Workbench> {
    let (train, test) = load_dataset(&cfg.dataset)?;
    let model = cfg.build_model(train.shape())?;
    let hashes = DatasetHashes { train: train.content_hash(), test: test.content_hash() };
    Ok(Workbench { model, train, test, hashes })
}

fn recipe_for(cfg: &ExperimentConfig, seed: u64) -> TrainRecipe {
    TrainRecipe { seed, ..cfg.recipe.clone() }
}

/// Runs `f` over `0..n` on up to `workers` threads; results come back in index order.
fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|o| o.expect("every slot filled")).collect()
}

/// Executes every cell of the grid and writes results under `out`.
///
/// Per-run failures are recorded and do not stop the grid; the returned
/// summary counts them. Warm-up trajectories are recorded once per seed.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<GridSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::path(out, e))?;
    cfg.write_resolved(out)?;
    let wb = workbench(cfg)?;
    let ctx = TrainContext::new(&wb.model, &wb.train, &wb.test)?;
    let cells = grid_cells(cfg);
    let seeds = &cfg.grid.seeds;

    // warm-up trajectories, one per seed, up to the largest k that needs one
    let k_max = cells.iter().filter(|c| c.algorithm != Algorithm::Vanilla).map(|c| c.k).max();
    let stores: Vec<Result<CheckpointStore>> = parallel_map(seeds.len(), workers, |i| {
        let seed = seeds[i];
        let mut store = CheckpointStore::on_disk(out.join("checkpoints").join(format!("seed_{seed}")))?;
        if let Some(k) = k_max {
            warmup(&ctx, &init_params(&wb.model, seed), k, &recipe_for(cfg, seed), &mut store, &mut NoObserver)?;
        }
        Ok(store.detached())
    });

    let outcomes: Vec<(Result<CellOutcome>, f64)> = parallel_map(cells.len(), workers, |i| {
        let cell = cells[i];
        let clock = Instant::now();
        let si = seeds.iter().position(|&s| s == cell.seed).expect("cell seed from grid");
        let outcome = match &stores[si] {
            Ok(store) => {
                let mut store = store.clone();
                let w0 = init_params(&wb.model, cell.seed);
                warmup_and_dispatch(&ctx, &w0, cell.k, &recipe_for(cfg, cell.seed), cell.method(), &mut store, &mut NoObserver)
            }
            Err(e) => Err(Error::Invalid(format!("warm-up for seed {} failed: {e}", cell.seed))),
        };
        (outcome, clock.elapsed().as_secs_f64())
    });

    let mut rows = Vec::with_capacity(cells.len());
    let mut ledger_rows = Vec::new();
    let mut failures = 0;
    for (cell, (outcome, wall)) in cells.iter().zip(&outcomes) {
        let name = cell.name();
        let tag = cell.method().tag().as_str().to_string();
        let mut record = RunRecord {
            name: name.clone(),
            cell: *cell,
            status: "ok",
            error: None,
            ledger_mode: cfg.ledger_mode,
            flop_convention: FLOP_CONVENTION,
            backprop_flops: None,
            dataset: &wb.hashes,
            result: None,
            discovery: Vec::new(),
            mask_file: None,
            config: cfg,
        };
        let row = match outcome {
            Ok(o) => {
                let flops = o.result.ledger.backprop_total(cfg.ledger_mode);
                if let Some(mask) = &o.mask {
                    let stem = out.join("masks").join(&name);
                    fs::create_dir_all(out.join("masks")).map_err(|e| Error::path(out, e))?;
                    write_mask(&stem, mask, cell.retain, cell.iterations, cell.k)?;
                    record.mask_file = Some(format!("masks/{name}.mask"));
                }
                record.backprop_flops = Some(flops);
                record.result = Some(&o.result);
                record.discovery = o
                    .discovery
                    .iter()
                    .map(|d| DiscoverySummary { test_accuracy: d.test_accuracy, active_count: d.active_count, ledger: &d.ledger })
                    .collect();
                for (phase, t) in &o.result.ledger.phases {
                    ledger_rows.push(LedgerRow {
                        run: name.clone(),
                        phase: phase.as_str().to_string(),
                        epochs: t.epochs,
                        flops_act_grad: t.act_grad,
                        flops_w_grad: t.weight_grad,
                        flops_total: t.backward(),
                        counted: cfg.ledger_mode == LedgerMode::CountDiscovery || *phase != crate::complexity::Phase::Discovery,
                        flop_convention: FLOP_CONVENTION.to_string(),
                    });
                }
                GridRow {
                    algorithm: tag,
                    retain: cell.retain,
                    k: cell.k,
                    iterations: cell.iterations,
                    seed: cell.seed,
                    backprop_flops: Some(flops),
                    final_test_accuracy: Some(o.result.test_accuracy),
                    ledger_mode: cfg.ledger_mode,
                    flop_convention: FLOP_CONVENTION.to_string(),
                    status: "ok".into(),
                    wall_clock_s: *wall,
                }
            }
            Err(e) => {
                failures += 1;
                record.status = "failed";
                record.error = Some(e.to_string());
                GridRow {
                    algorithm: tag,
                    retain: cell.retain,
                    k: cell.k,
                    iterations: cell.iterations,
                    seed: cell.seed,
                    backprop_flops: None,
                    final_test_accuracy: None,
                    ledger_mode: cfg.ledger_mode,
                    flop_convention: FLOP_CONVENTION.to_string(),
                    status: "failed".into(),
                    wall_clock_s: *wall,
                }
            }
        };
        write_file(&out.join("runs").join(format!("{name}.json")), serde_json::to_vec_pretty(&record)?)?;
        rows.push(row);
    }
    write_csv(&out.join("results.csv"), &rows)?;
    write_csv(&out.join("ledgers.csv"), &ledger_rows)?;
    write_pareto(out, &rows)?;
    Ok(GridSummary { out_dir: out.to_path_buf(), rows, failures })
}

#[derive(Serialize)]
struct LedgerRow {
    run: String,
    phase: String,
    epochs: usize,
    flops_act_grad: u64,
    flops_w_grad: u64,
    flops_total: u64,
    counted: bool,
    flop_convention: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub algorithm: String,
    #[serde(rename = "R")]
    pub retain: f64,
    pub k: usize,
    #[serde(rename = "I")]
    pub iterations: usize,
    pub seed: u64,
    pub backprop_flops: u64,
    pub final_test_accuracy: f64,
    pub ledger_mode: LedgerMode,
    pub dominated: bool,
}

/// Pareto flags over the completed rows, sorted by FLOPs.
pub fn pareto_rows(rows: &[GridRow]) -> Vec<ParetoRow> {
    let done: Vec<&GridRow> = rows.iter().filter(|r| r.ok()).collect();
    let pts: Vec<(u64, f64)> = done
        .iter()
        .map(|r| (r.backprop_flops.unwrap_or_default(), r.final_test_accuracy.unwrap_or_default()))
        .collect();
    pareto_points(&pts)
        .into_iter()
        .map(|p| {
            let r = done[p.index];
            ParetoRow {
                algorithm: r.algorithm.clone(),
                retain: r.retain,
                k: r.k,
                iterations: r.iterations,
                seed: r.seed,
                backprop_flops: p.flops,
                final_test_accuracy: p.accuracy,
                ledger_mode: r.ledger_mode,
                dominated: p.dominated,
            }
        })
        .collect()
}

fn write_pareto(dir: &Path, rows: &[GridRow]) -> Result<PathBuf> {
    let path = dir.join("pareto.csv");
    write_csv(&path, &pareto_rows(rows))?;
    Ok(path)
}

pub fn read_results(dir: &Path) -> Result<Vec<GridRow>> {
    let path = dir.join("results.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::path(&path, io),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    })?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<GridRow>, _>>()?)
}

/// Recomputes `pareto.csv` from the aggregate CSV of a result directory.
pub fn pareto_from_dir(dir: &Path) -> Result<PathBuf> {
    write_pareto(dir, &read_results(dir)?)
}

/// Everything stored for one (k, R) spectrum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub k: usize,
    #[serde(rename = "R")]
    pub retain: f64,
    pub reference: bool,
    pub seed: u64,
    pub probe_seed: u64,
    pub n_probes: usize,
    pub lanczos_steps: usize,
    pub domain: HessianDomain,
    pub samples: usize,
    pub active_count: usize,
    pub dim: usize,
    pub sigma: f64,
    pub dataset_train_hash: String,
    pub ritz: Vec<Vec<RitzPair>>,
    pub histogram: Histogram,
    pub flatness: FlatnessReport,
}

impl SpectrumRecord {
    pub fn file_stem(&self) -> String {
        if self.reference {
            format!("spectrum_k{}_ref", self.k)
        } else {
            format!("spectrum_k{}_R{}", self.k, self.retain)
        }
    }
}

#[derive(Serialize)]
struct FlatnessRow {
    k: usize,
    #[serde(rename = "R")]
    retain: f64,
    reference: bool,
    near_zero_mass: f64,
    lambda_min: f64,
    lambda_max: f64,
    eps_rel: f64,
    degenerate: bool,
}

/// Spectra for every `k` and `R` (overriding the configured lists when given),
/// one JSON per cell under `out/spectra`, plus a flatness table.
pub fn run_spectrum(
    cfg: &ExperimentConfig,
    out: &Path,
    k_list: Option<&[usize]>,
    retain_list: Option<&[f64]>,
) -> Result<Vec<SpectrumRecord>> {
    cfg.validate()?;
    let ks = k_list.unwrap_or(&cfg.spectrum.k);
    let rs = retain_list.unwrap_or(&cfg.spectrum.retain);
    if let Some(&k) = ks.iter().find(|&&k| k > cfg.recipe.epochs) {
        return Err(Error::WarmupTooLong { k, epochs: cfg.recipe.epochs });
    }
    fs::create_dir_all(out).map_err(|e| Error::path(out, e))?;
    cfg.write_resolved(out)?;
    let wb = workbench(cfg)?;
    let ctx = TrainContext::new(&wb.model, &wb.train, &wb.test)?;
    let seed = cfg.spectrum.seed;
    let mut store = CheckpointStore::on_disk(out.join("checkpoints").join(format!("seed_{seed}")))?;
    let settings = &cfg.spectrum.settings;
    let rows: Vec<SpectrumRow> =
        spectrum_experiment(&ctx, &init_params(&wb.model, seed), ks, rs, &recipe_for(cfg, seed), &mut store, settings)?;
    let samples = settings.samples.map_or(wb.train.len(), |n| n.min(wb.train.len()));
    let mut records = Vec::with_capacity(rows.len());
    let mut table = Vec::with_capacity(rows.len());
    for r in rows {
        let rec = SpectrumRecord {
            k: r.k,
            retain: r.retain,
            reference: r.reference,
            seed,
            probe_seed: settings.probe_seed,
            n_probes: r.estimate.n_probes,
            lanczos_steps: r.estimate.lanczos_steps,
            domain: settings.domain,
            samples,
            active_count: r.active_count,
            dim: r.dim,
            sigma: r.estimate.sigma,
            dataset_train_hash: wb.hashes.train.clone(),
            ritz: r.estimate.probes,
            histogram: r.estimate.histogram,
            flatness: r.flatness,
        };
        write_file(&out.join("spectra").join(format!("{}.json", rec.file_stem())), serde_json::to_vec_pretty(&rec)?)?;
        table.push(FlatnessRow {
            k: rec.k,
            retain: rec.retain,
            reference: rec.reference,
            near_zero_mass: rec.flatness.near_zero_mass,
            lambda_min: rec.flatness.lambda_min,
            lambda_max: rec.flatness.lambda_max,
            eps_rel: rec.flatness.eps_rel,
            degenerate: rec.flatness.degenerate,
        });
        records.push(rec);
    }
    write_csv(&out.join("spectra").join("flatness.csv"), &table)?;
    Ok(records)
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    algorithm: &'a str,
    #[serde(rename = "R")]
    retain: f64,
    group: String,
    k: usize,
    #[serde(rename = "I")]
    iterations: usize,
    seed: u64,
    backprop_flops: u64,
    log10_backprop_flops: f64,
    final_test_accuracy: f64,
    ledger_mode: LedgerMode,
    flop_convention: &'a str,
    view: &'a str,
}

#[derive(Serialize)]
struct HistRow {
    bin_lo: f64,
    bin_hi: f64,
    center: f64,
    mass: f64,
}

/// Writes plot-ready CSVs under `dir/plots`: accuracy-vs-FLOPs scatter (a
/// linear and a log view of the same rows) when runs exist, and one histogram
/// file per stored spectrum.
pub fn emit_plot_data(dir: &Path) -> Result<Vec<PathBuf>> {
    let plots = dir.join("plots");
    let mut written = Vec::new();
    if dir.join("results.csv").exists() {
        let rows = read_results(dir)?;
        for view in ["linear", "log"] {
            let scatter: Vec<ScatterRow> = rows
                .iter()
                .filter(|r| r.ok())
                .map(|r| {
                    let flops = r.backprop_flops.unwrap_or_default();
                    ScatterRow {
                        algorithm: &r.algorithm,
                        retain: r.retain,
                        group: format!("{} R={}", r.algorithm, r.retain),
                        k: r.k,
                        iterations: r.iterations,
                        seed: r.seed,
                        backprop_flops: flops,
                        log10_backprop_flops: (flops as f64).log10(),
                        final_test_accuracy: r.final_test_accuracy.unwrap_or_default(),
                        ledger_mode: r.ledger_mode,
                        flop_convention: FLOP_CONVENTION,
                        view,
                    }
                })
                .collect();
            let name = if view == "log" { "scatter_log.csv" } else { "scatter.csv" };
            write_csv(&plots.join(name), &scatter)?;
            written.push(plots.join(name));
        }
    }
    let spectra = dir.join("spectra");
    if spectra.is_dir() {
        let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
        for entry in fs::read_dir(&spectra).map_err(|e| Error::path(&spectra, e))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                files.insert(path.to_string_lossy().into_owned(), path);
            }
        }
        for path in files.values() {
            let rec: SpectrumRecord =
                serde_json::from_slice(&fs::read(path).map_err(|e| Error::path(path, e))?)?;
            let h = &rec.histogram;
            let rows: Vec<HistRow> = h
                .edges
                .windows(2)
                .zip(&h.mass)
                .map(|(w, &mass)| HistRow { bin_lo: w[0], bin_hi: w[1], center: 0.5 * (w[0] + w[1]), mass })
                .collect();
            let target = plots.join(format!("hist_{}.csv", rec.file_stem().trim_start_matches("spectrum_")));
            write_csv(&target, &rows)?;
            written.push(target);
        }
    }
    if written.is_empty() {
        return Err(Error::Format { what: "result directory", detail: format!("{} holds no runs or spectra", dir.display()) });
    }
    Ok(written)
}
