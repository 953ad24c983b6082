//! Python bindings for `llab`.
//!
//! Parameters, masks and updates cross the boundary as flat lists; batches as
//! a list of rows plus a list of labels.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use llab::autodiff::{self, Batch};
use llab::complexity::{self, CostModel};
use llab::config::{self, ExperimentConfig};
use llab::grid::{self, GridRow};
use llab::hessian::{self, SlqSettings, SpectrumEstimate};
use llab::mask::{self, FrozenReference};
use llab::model::{self, InputShape, ModelSpec};
use llab::Error;

create_exception!(llab_py, LlabError, PyException);
create_exception!(llab_py, ConfigError, LlabError);
create_exception!(llab_py, ShapeError, LlabError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::ConfigViolations(_) => ConfigError::new_err(msg),
        Error::Shape(_) | Error::Length { .. } | Error::InputShape(_) => ShapeError::new_err(msg),
        _ => LlabError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for llab::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn batch_from(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Batch> {
    if inputs.len() != labels.len() {
        return Err(ShapeError::new_err(format!("{} input rows but {} labels", inputs.len(), labels.len())));
    }
    Ok(Batch::new(inputs.concat(), labels))
}

/// A network architecture with its flat parameter layout.
#[pyclass(name = "Model", module = "llab_py", frozen)]
struct PyModel {
    spec: ModelSpec,
}

#[pymethods]
impl PyModel {
    /// `input` is a feature count or a `(channels, height, width)` tuple.
    #[new]
    #[pyo3(signature = (name, input, n_classes, hidden=None))]
    fn new(name: &str, input: &Bound<'_, PyAny>, n_classes: usize, hidden: Option<Vec<usize>>) -> PyResult<Self> {
        let shape = if let Ok(d) = input.extract::<usize>() {
            InputShape::Flat(d)
        } else {
            let (channels, height, width) = input.extract::<(usize, usize, usize)>()?;
            InputShape::Image { channels, height, width }
        };
        let spec = model::build_model_with(name, shape, n_classes, hidden.as_deref()).py()?;
        Ok(PyModel { spec })
    }

    #[getter]
    fn name(&self) -> &str {
        self.spec.name()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    /// True for weight entries, false for biases.
    fn weight_flags(&self) -> Vec<bool> {
        self.spec.layout().weight_flags()
    }

    fn init(&self, seed: u64) -> Vec<f64> {
        model::init_params(&self.spec, seed).into_vec()
    }

    /// Mean cross-entropy loss and its gradient.
    fn loss_and_grad(&self, params: Vec<f64>, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<f64>)> {
        let batch = batch_from(inputs, labels)?;
        let (loss, g) = autodiff::loss_and_grad::<f64>(&self.spec, &params, &batch).py()?;
        Ok((loss, g.into_vec()))
    }

    /// Hessian-vector product of the mean loss.
    fn hvp(&self, params: Vec<f64>, inputs: Vec<Vec<f64>>, labels: Vec<usize>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let batch = batch_from(inputs, labels)?;
        Ok(autodiff::hvp::<f64>(&self.spec, &params, &batch, &v).py()?.into_vec())
    }

    /// Backprop FLOPs of one epoch over `n_samples`, optionally masked.
    #[pyo3(signature = (n_samples, mask=None))]
    fn epoch_flops(&self, n_samples: usize, mask: Option<&PyMask>) -> PyResult<u64> {
        complexity::epoch_flops(&self.spec, &CostModel::default(), n_samples, mask.map(|m| &m.inner)).py()
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, params={})", self.spec.name(), self.spec.param_count())
    }
}

/// Binary keep-mask over the flat parameter vector.
#[pyclass(name = "Mask", module = "llab_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: mask::Mask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(bits: Vec<bool>) -> Self {
        PyMask { inner: mask::Mask::from_bits(bits) }
    }

    #[staticmethod]
    fn ones(n: usize) -> Self {
        PyMask { inner: mask::Mask::ones(n) }
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyMask { inner: mask::Mask::from_bytes(data).py()? })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.inner.active_count()
    }

    fn is_submask_of(&self, other: &PyMask) -> bool {
        self.inner.is_submask_of(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &PyMask) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Mask(len={}, active={})", self.inner.len(), self.inner.active_count())
    }
}

#[pyfunction]
fn keep_count(retain: f64, n: usize) -> usize {
    mask::keep_count(retain, n)
}

/// Global magnitude pruning of the `prunable` entries active in `prior`.
#[pyfunction]
#[pyo3(signature = (params, retain, prunable, prior=None))]
fn magnitude_prune(params: Vec<f64>, retain: f64, prunable: Vec<bool>, prior: Option<&PyMask>) -> PyResult<PyMask> {
    let ones;
    let prior = match prior {
        Some(m) => &m.inner,
        None => {
            ones = mask::Mask::ones(params.len());
            &ones
        }
    };
    Ok(PyMask { inner: mask::magnitude_prune(&params, retain, prior, &prunable).py()? })
}

#[pyfunction]
fn apply_mask(params: Vec<f64>, mask: &PyMask) -> PyResult<Vec<f64>> {
    Ok(mask::apply_mask(&params, &mask.inner).py()?.into_vec())
}

/// `w - u` on active entries, zero elsewhere.
#[pyfunction]
fn lot_update(params: Vec<f64>, update: Vec<f64>, mask: &PyMask) -> PyResult<Vec<f64>> {
    Ok(mask::lot_update(&params, &update, &mask.inner).py()?.into_vec())
}

/// `w - u` on active entries, `frozen` elsewhere.
#[pyfunction]
fn rise_update(params: Vec<f64>, update: Vec<f64>, mask: &PyMask, frozen: Vec<f64>) -> PyResult<Vec<f64>> {
    let frozen = FrozenReference::new(frozen.into());
    Ok(mask::rise_update(&params, &update, &mask.inner, &frozen).py()?.into_vec())
}

/// `(index, flops, accuracy, dominated)` sorted by FLOPs.
#[pyfunction]
fn pareto_points(points: Vec<(u64, f64)>) -> Vec<(usize, u64, f64, bool)> {
    complexity::pareto_points(&points).into_iter().map(|p| (p.index, p.flops, p.accuracy, p.dominated)).collect()
}

fn dense_oracle(matrix: &[Vec<f64>]) -> PyResult<impl Fn(&[f64]) -> llab::Result<Vec<f64>> + '_> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(ShapeError::new_err("matrix must be square"));
    }
    Ok(move |v: &[f64]| Ok(matrix.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()))
}

/// Lanczos on a dense symmetric matrix: `(alpha, beta, breakdown step or None)`.
#[pyfunction]
#[pyo3(signature = (matrix, steps, seed=0))]
fn lanczos(matrix: Vec<Vec<f64>>, steps: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>, Option<usize>)> {
    let t = hessian::lanczos(dense_oracle(&matrix)?, matrix.len(), steps, seed).py()?;
    Ok((t.alpha, t.beta, t.breakdown))
}

/// Ritz `(value, weight)` pairs of a tridiagonal matrix.
#[pyfunction]
fn ritz(alpha: Vec<f64>, beta: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    if beta.len() + 1 != alpha.len() && !(alpha.is_empty() && beta.is_empty()) {
        return Err(ShapeError::new_err("beta must be one shorter than alpha"));
    }
    let t = hessian::Tridiagonal { alpha, beta, breakdown: None };
    Ok(hessian::ritz(&t).into_iter().map(|p| (p.value, p.weight)).collect())
}

#[pyfunction]
fn symmetric_eigenvalues(matrix: Vec<Vec<f64>>) -> Vec<f64> {
    hessian::symmetric_eigenvalues(&matrix)
}

/// A broadened spectral density estimate.
#[pyclass(name = "Spectrum", module = "llab_py", frozen)]
struct PySpectrum {
    est: SpectrumEstimate,
}

#[pymethods]
impl PySpectrum {
    #[getter]
    fn edges(&self) -> Vec<f64> {
        self.est.histogram.edges.clone()
    }

    #[getter]
    fn mass(&self) -> Vec<f64> {
        self.est.histogram.mass.clone()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.est.sigma
    }

    /// Pooled Ritz `(value, weight)` pairs.
    fn ritz(&self) -> Vec<(f64, f64)> {
        self.est.pooled().into_iter().map(|p| (p.value, p.weight)).collect()
    }

    #[pyo3(signature = (eps_rel=0.01))]
    fn near_zero_mass(&self, eps_rel: f64) -> f64 {
        hessian::flatness(&self.est, eps_rel).near_zero_mass
    }
}

/// Stochastic Lanczos quadrature on a dense symmetric matrix.
#[pyfunction]
#[pyo3(signature = (matrix, n_probes=8, lanczos_steps=80, bins=201, seed=0))]
fn slq(matrix: Vec<Vec<f64>>, n_probes: usize, lanczos_steps: usize, bins: usize, seed: u64) -> PyResult<PySpectrum> {
    let settings = SlqSettings { n_probes, lanczos_steps, bins, probe_seed: seed, ..SlqSettings::default() };
    let est = hessian::slq(dense_oracle(&matrix)?, matrix.len(), &settings).py()?;
    Ok(PySpectrum { est })
}

/// A validated experiment configuration.
#[pyclass(name = "Config", module = "llab_py", frozen)]
struct PyConfig {
    cfg: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    #[pyo3(signature = (text, base="."))]
    fn from_toml(text: &str, base: &str) -> PyResult<Self> {
        Ok(PyConfig { cfg: ExperimentConfig::from_toml(text, Path::new(base)).py()? })
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.cfg.output_dir.clone()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.cfg.to_toml().py()
    }

    /// Names of the grid cells, in execution order.
    fn cells(&self) -> Vec<String> {
        grid::grid_cells(&self.cfg).iter().map(|c| c.name()).collect()
    }

    /// Runs the grid; returns the rows of `results.csv` as dicts.
    #[pyo3(signature = (out=None, workers=1))]
    fn run_grid<'py>(&self, py: Python<'py>, out: Option<PathBuf>, workers: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let out = out.unwrap_or_else(|| self.cfg.output_dir.clone());
        let summary = py.detach(|| grid::run_grid(&self.cfg, &out, workers)).py()?;
        summary.rows.iter().map(|r| row_dict(py, r)).collect()
    }

    /// Runs the spectrum sweep; returns one dict per spectrum.
    #[pyo3(signature = (out=None, k=None, retain=None))]
    fn run_spectrum<'py>(
        &self,
        py: Python<'py>,
        out: Option<PathBuf>,
        k: Option<Vec<usize>>,
        retain: Option<Vec<f64>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let out = out.unwrap_or_else(|| self.cfg.output_dir.clone());
        let records = py.detach(|| grid::run_spectrum(&self.cfg, &out, k.as_deref(), retain.as_deref())).py()?;
        records
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("k", r.k)?;
                d.set_item("R", r.retain)?;
                d.set_item("reference", r.reference)?;
                d.set_item("dim", r.dim)?;
                d.set_item("near_zero_mass", r.flatness.near_zero_mass)?;
                d.set_item("lambda_min", r.flatness.lambda_min)?;
                d.set_item("lambda_max", r.flatness.lambda_max)?;
                d.set_item("edges", r.histogram.edges.clone())?;
                d.set_item("mass", r.histogram.mass.clone())?;
                Ok(d)
            })
            .collect()
    }
}

fn row_dict<'py>(py: Python<'py>, r: &GridRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("algorithm", &r.algorithm)?;
    d.set_item("R", r.retain)?;
    d.set_item("k", r.k)?;
    d.set_item("I", r.iterations)?;
    d.set_item("seed", r.seed)?;
    d.set_item("backprop_flops", r.backprop_flops)?;
    d.set_item("final_test_accuracy", r.final_test_accuracy)?;
    d.set_item("ledger_mode", r.ledger_mode.as_str())?;
    d.set_item("status", &r.status)?;
    d.set_item("wall_clock_s", r.wall_clock_s)?;
    Ok(d)
}

#[pyfunction]
fn parse_config(path: PathBuf) -> PyResult<PyConfig> {
    Ok(PyConfig { cfg: config::parse_config(&path).py()? })
}

/// Rewrites `pareto.csv` from a result directory's `results.csv`.
#[pyfunction]
fn pareto_from_dir(dir: PathBuf) -> PyResult<PathBuf> {
    grid::pareto_from_dir(&dir).py()
}

/// Writes plot-ready CSVs and returns their paths.
#[pyfunction]
fn emit_plot_data(dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    grid::emit_plot_data(&dir).py()
}

#[pymodule]
fn llab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("LlabError", py.get_type::<LlabError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("ShapeError", py.get_type::<ShapeError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PySpectrum>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(keep_count, m)?)?;
    m.add_function(wrap_pyfunction!(magnitude_prune, m)?)?;
    m.add_function(wrap_pyfunction!(apply_mask, m)?)?;
    m.add_function(wrap_pyfunction!(lot_update, m)?)?;
    m.add_function(wrap_pyfunction!(rise_update, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_points, m)?)?;
    m.add_function(wrap_pyfunction!(lanczos, m)?)?;
    m.add_function(wrap_pyfunction!(ritz, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(slq, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_from_dir, m)?)?;
    m.add_function(wrap_pyfunction!(emit_plot_data, m)?)?;
    Ok(())
}
