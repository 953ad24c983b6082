use std::sync::Arc;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector};

/// Row-major inputs `[len, input_size]` with one class label per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>) -> Self {
        Batch { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Recorded forward pass, good for exactly one [`ComputeGraph::backward`].
#[derive(Debug)]
pub struct ComputeGraph<T = f64> {
    graph: Graph<T>,
    params: Var,
    loss: Var,
    logits: Var,
    consumed: bool,
}

impl<T: Real> ComputeGraph<T> {
    pub fn loss(&self) -> f64 {
        self.graph.value(self.loss).item().as_f64()
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits)
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Gradient of the mean loss, indexed like the parameter vector.
    pub fn backward(&mut self) -> Result<ParamVector> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let g = self.graph.grad(self.loss, &[self.params])?[0];
        to_params(self.graph.value(g).data(), "gradient")
    }
}

fn to_params<T: Real>(data: &[T], what: &str) -> Result<ParamVector> {
    let out: Vec<f64> = data.iter().map(|x| x.as_f64()).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(out.into())
}

fn check_batch(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if params.len() != model.param_count() {
        return Err(Error::Length { expected: model.param_count(), got: params.len() });
    }
    let want = batch.len() * model.input().size();
    if batch.inputs.len() != want {
        return Err(Error::Shape(format!(
            "batch of {} samples needs {want} input values, got {}",
            batch.len(),
            batch.inputs.len()
        )));
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= model.n_classes()) {
        return Err(Error::LabelOutOfRange { label, n_classes: model.n_classes() });
    }
    Ok(())
}

fn record<T: Real>(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<ComputeGraph<T>> {
    check_batch(model, params, batch)?;
    let n = batch.len();
    let c = model.n_classes();
    let mut g = Graph::new();
    let p = g.param(Tensor::new(vec![params.len()], params.iter().map(|&x| T::of(x)).collect())?);
    let x = g.constant(Tensor::new(
        vec![n, model.input().size()],
        batch.inputs.iter().map(|&x| T::of(x)).collect(),
    )?);
    let logits = model.logits(&mut g, p, x, n)?;
    // mean over rows of logsumexp(z) - z[label]
    let lse = g.logsumexp_rows(logits)?;
    let picked_map: Arc<[u32]> = batch.labels.iter().enumerate().map(|(i, &y)| (i * c + y) as u32).collect();
    let picked = g.gather(logits, picked_map, vec![n])?;
    let nll = g.sub(lse, picked)?;
    let total = g.sum(nll)?;
    let loss = g.scale(total, T::of(1.0 / n as f64))?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(ComputeGraph { graph: g, params: p, loss, logits, consumed: false })
}

/// Mean cross-entropy loss of `batch` and the graph to differentiate it.
pub fn forward<T: Real>(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, ComputeGraph<T>)> {
    let graph = record::<T>(model, params, batch)?;
    Ok((graph.loss(), graph))
}

pub fn loss_and_grad<T: Real>(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, ParamVector)> {
    let (loss, mut graph) = forward::<T>(model, params, batch)?;
    Ok((loss, graph.backward()?))
}

/// Exact Hessian-vector product `H v` of the batch loss, by differentiating `<grad, v>`.
pub fn hvp<T: Real>(model: &ModelSpec, params: &[f64], batch: &Batch, v: &[f64]) -> Result<ParamVector> {
    if v.len() != params.len() {
        return Err(Error::Length { expected: params.len(), got: v.len() });
    }
    let mut cg = record::<T>(model, params, batch)?;
    let g = &mut cg.graph;
    let grad = g.grad(cg.loss, &[cg.params])?[0];
    let v: Arc<[T]> = v.iter().map(|&x| T::of(x)).collect();
    let gv = g.mul_const(grad, v)?;
    let dot = g.sum(gv)?;
    let hv = g.grad(dot, &[cg.params])?[0];
    to_params(g.value(hv).data(), "Hessian-vector product")
}
