//! Desk-scale models with a single flat parameter vector.
//!
//! Parameters are laid out layer by layer in definition order, weights
//! before biases, row-major within each tensor. Dense weights are stored
//! `[inputs, outputs]`; convolution weights `[out_channels, in_channels, k, k]`.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var, NO_INDEX};
use crate::error::{Error, Result};

/// Flat vector of all model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputShape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn size(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize, bias: bool },
    /// Stride-1 square convolution; `height`/`width` are the input spatial dims.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, padding: usize, height: usize, width: usize },
    Relu,
    /// 2x2 max-pool with stride 2 over a `[channels, height, width]` input.
    MaxPool2d { channels: usize, height: usize, width: usize },
    Flatten,
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Layer::Dense { inputs, outputs, bias: true }
    }

    fn conv_out(kernel: usize, padding: usize, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * padding + 1).saturating_sub(kernel), (w + 2 * padding + 1).saturating_sub(kernel))
    }

    /// Number of output positions per sample for weight-sharing layers.
    pub fn positions(&self) -> usize {
        match *self {
            Layer::Conv2d { kernel, padding, height, width, .. } => {
                let (ho, wo) = Self::conv_out(kernel, padding, height, width);
                ho * wo
            }
            _ => 1,
        }
    }

    pub fn weight_count(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs, .. } => inputs * outputs,
            Layer::Conv2d { in_channels, out_channels, kernel, .. } => out_channels * in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            Layer::Dense { outputs, bias: true, .. } => outputs,
            Layer::Conv2d { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Flat(usize),
    Image(usize, usize, usize),
}

impl Activation {
    fn size(self) -> usize {
        match self {
            Activation::Flat(d) => d,
            Activation::Image(c, h, w) => c * h * w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTensor {
    pub layer: usize,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Location of one flat index inside the layered model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCoord {
    pub layer: usize,
    pub kind: TensorKind,
    pub offset: usize,
}

/// Bijection between `[0, N)` and layer-local coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<ParamTensor>,
    total: usize,
}

impl ParamLayout {
    fn from_layers(layers: &[Layer]) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            let w_shape = match *layer {
                Layer::Dense { inputs, outputs, .. } => vec![inputs, outputs],
                Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                    vec![out_channels, in_channels, kernel, kernel]
                }
                _ => continue,
            };
            let t = ParamTensor { layer: i, kind: TensorKind::Weight, shape: w_shape, offset };
            offset += t.len();
            tensors.push(t);
            if layer.bias_count() > 0 {
                let t = ParamTensor {
                    layer: i,
                    kind: TensorKind::Bias,
                    shape: vec![layer.bias_count()],
                    offset,
                };
                offset += t.len();
                tensors.push(t);
            }
        }
        ParamLayout { tensors, total: offset }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, layer: usize, kind: TensorKind) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.layer == layer && t.kind == kind)
    }

    pub fn locate(&self, flat: usize) -> Option<ParamCoord> {
        let t = self.tensors.iter().find(|t| t.range().contains(&flat))?;
        Some(ParamCoord { layer: t.layer, kind: t.kind, offset: flat - t.offset })
    }

    pub fn flat_index(&self, coord: ParamCoord) -> Option<usize> {
        let t = self.tensor(coord.layer, coord.kind)?;
        (coord.offset < t.len()).then_some(t.offset + coord.offset)
    }

    /// `true` for weight entries (prunable), `false` for biases.
    pub fn weight_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.total];
        for t in self.tensors.iter().filter(|t| t.kind == TensorKind::Weight) {
            flags[t.range()].iter_mut().for_each(|f| *f = true);
        }
        flags
    }

    pub fn unflatten(&self, params: &[f64]) -> Result<Vec<Tensor<f64>>> {
        if params.len() != self.total {
            return Err(Error::Length { expected: self.total, got: params.len() });
        }
        self.tensors
            .iter()
            .map(|t| Tensor::new(t.shape.clone(), params[t.range()].to_vec()))
            .collect()
    }

    pub fn flatten(&self, tensors: &[Tensor<f64>]) -> Result<ParamVector> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Length { expected: self.tensors.len(), got: tensors.len() });
        }
        let mut out = Vec::with_capacity(self.total);
        for (t, spec) in tensors.iter().zip(&self.tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor for layer {} {:?} has shape {:?}, expected {:?}",
                    spec.layer,
                    spec.kind,
                    t.shape(),
                    spec.shape
                )));
            }
            out.extend_from_slice(t.data());
        }
        Ok(ParamVector(out))
    }
}

/// Immutable, fully shaped model description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    name: String,
    input: InputShape,
    n_classes: usize,
    layers: Vec<Layer>,
    layout: ParamLayout,
}

impl ModelSpec {
    /// Checks that consecutive layer shapes chain and that the model ends in `n_classes` logits.
    pub fn new(name: impl Into<String>, input: InputShape, layers: Vec<Layer>, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InputShape(format!("need at least 2 classes, got {n_classes}")));
        }
        if input.size() == 0 {
            return Err(Error::InputShape("input has zero size".into()));
        }
        let mut act = match input {
            InputShape::Flat(d) => Activation::Flat(d),
            InputShape::Image { channels, height, width } => Activation::Image(channels, height, width),
        };
        for (i, layer) in layers.iter().enumerate() {
            act = match (*layer, act) {
                (Layer::Dense { inputs, outputs, .. }, Activation::Flat(d)) if inputs == d && outputs > 0 => {
                    Activation::Flat(outputs)
                }
                (
                    Layer::Conv2d { in_channels, out_channels, kernel, padding, height, width },
                    Activation::Image(c, h, w),
                ) if in_channels == c && height == h && width == w && kernel > 0 && out_channels > 0 => {
                    let (ho, wo) = Layer::conv_out(kernel, padding, h, w);
                    if ho == 0 || wo == 0 {
                        return Err(Error::InputShape(format!("layer {i}: kernel {kernel} larger than padded input {h}x{w}")));
                    }
                    Activation::Image(out_channels, ho, wo)
                }
                (Layer::Relu, a) => a,
                (Layer::MaxPool2d { channels, height, width }, Activation::Image(c, h, w))
                    if channels == c && height == h && width == w && h >= 2 && w >= 2 =>
                {
                    Activation::Image(c, h / 2, w / 2)
                }
                (Layer::Flatten, a) => Activation::Flat(a.size()),
                (layer, act) => {
                    return Err(Error::InputShape(format!("layer {i} ({layer:?}) cannot consume {act:?}")));
                }
            };
        }
        if act != Activation::Flat(n_classes) {
            return Err(Error::InputShape(format!("model output {act:?} does not match {n_classes} classes")));
        }
        let layout = ParamLayout::from_layers(&layers);
        Ok(ModelSpec { name: name.into(), input, n_classes, layers, layout })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Records the forward pass for a `[batch, input]` tensor and returns the `[batch, classes]` logits.
    pub(crate) fn logits<T: Real>(&self, g: &mut Graph<T>, params: Var, x: Var, batch: usize) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                Layer::Dense { inputs, outputs, bias } => {
                    let wt = self.layout.tensor(i, TensorKind::Weight).expect("dense weight");
                    let w = g.slice(params, wt.offset, vec![inputs, outputs])?;
                    let y = g.matmul(h, w, false, false)?;
                    if bias {
                        let bt = self.layout.tensor(i, TensorKind::Bias).expect("dense bias");
                        let b = g.slice(params, bt.offset, vec![outputs])?;
                        let bb = g.gather(b, broadcast_map(batch, outputs), vec![batch, outputs])?;
                        g.add(y, bb)?
                    } else {
                        y
                    }
                }
                Layer::Conv2d { in_channels, out_channels, kernel, padding, height, width } => {
                    let (ho, wo) = Layer::conv_out(kernel, padding, height, width);
                    let patch = in_channels * kernel * kernel;
                    let rows = batch * ho * wo;
                    let cols = g.gather(
                        h,
                        im2col_map(batch, in_channels, height, width, kernel, padding),
                        vec![rows, patch],
                    )?;
                    let wt = self.layout.tensor(i, TensorKind::Weight).expect("conv weight");
                    let w = g.slice(params, wt.offset, vec![out_channels, patch])?;
                    let y = g.matmul(cols, w, false, true)?;
                    let bt = self.layout.tensor(i, TensorKind::Bias).expect("conv bias");
                    let b = g.slice(params, bt.offset, vec![out_channels])?;
                    let bb = g.gather(b, broadcast_map(rows, out_channels), vec![rows, out_channels])?;
                    let y = g.add(y, bb)?;
                    g.gather(
                        y,
                        channels_first_map(batch, out_channels, ho * wo),
                        vec![batch, out_channels * ho * wo],
                    )?
                }
                Layer::Relu => g.relu(h)?,
                Layer::MaxPool2d { channels, height, width } => {
                    let map = maxpool_map(g.value(h).data(), batch, channels, height, width);
                    g.gather(h, map, vec![batch, channels * (height / 2) * (width / 2)])?
                }
                Layer::Flatten => h,
            };
        }
        Ok(h)
    }
}

/// `out[r, c] = b[c]`
fn broadcast_map(rows: usize, cols: usize) -> Arc<[u32]> {
    (0..rows * cols).map(|i| (i % cols) as u32).collect()
}

fn im2col_map(batch: usize, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Arc<[u32]> {
    let (ho, wo) = Layer::conv_out(k, pad, h, w);
    let mut map = Vec::with_capacity(batch * ho * wo * c * k * k);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy + ky) as isize - pad as isize;
                            let ix = (ox + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                map.push(NO_INDEX);
                            } else {
                                map.push((((b * c + ch) * h + iy as usize) * w + ix as usize) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    map.into()
}

/// `[batch * positions, channels]` to `[batch, channels * positions]`.
fn channels_first_map(batch: usize, channels: usize, positions: usize) -> Arc<[u32]> {
    let mut map = Vec::with_capacity(batch * channels * positions);
    for b in 0..batch {
        for ch in 0..channels {
            for p in 0..positions {
                map.push(((b * positions + p) * channels + ch) as u32);
            }
        }
    }
    map.into()
}

fn maxpool_map<T: Real>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> Arc<[u32]> {
    let (ho, wo) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(batch * c * ho * wo);
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                map.push(best as u32);
            }
        }
    }
    map.into()
}

pub const MODEL_NAMES: [&str; 3] = ["mlp-small", "mlp-wide", "conv-small"];

/// Builds one of the named desk-scale models with its default widths.
pub fn build_model(name: &str, input: InputShape, n_classes: usize) -> Result<ModelSpec> {
    build_model_with(name, input, n_classes, None)
}

/// Like [`build_model`], overriding the hidden widths (`[h1, h2]` for the MLPs,
/// `[conv1 channels, conv2 channels, dense width]` for `conv-small`).
pub fn build_model_with(name: &str, input: InputShape, n_classes: usize, hidden: Option<&[usize]>) -> Result<ModelSpec> {
    let widths = |default: &[usize]| -> Result<Vec<usize>> {
        let w = hidden.unwrap_or(default).to_vec();
        if w.len() != default.len() || w.contains(&0) {
            return Err(Error::InputShape(format!(
                "{name} takes {} positive hidden widths, got {w:?}",
                default.len()
            )));
        }
        Ok(w)
    };
    let mut layers = Vec::new();
    match name {
        "mlp-small" | "mlp-wide" => {
            let h = widths(if name == "mlp-small" { &[300, 100] } else { &[1024, 512] })?;
            if let InputShape::Image { .. } = input {
                layers.push(Layer::Flatten);
            }
            layers.extend([
                Layer::dense(input.size(), h[0]),
                Layer::Relu,
                Layer::dense(h[0], h[1]),
                Layer::Relu,
                Layer::dense(h[1], n_classes),
            ]);
        }
        "conv-small" => {
            let InputShape::Image { channels, height, width } = input else {
                return Err(Error::InputShape("conv-small needs an image input".into()));
            };
            if height < 4 || width < 4 {
                return Err(Error::InputShape(format!("conv-small needs at least 4x4 images, got {height}x{width}")));
            }
            let h = widths(&[8, 16, 64])?;
            let (h2, w2) = (height / 2, width / 2);
            layers.extend([
                Layer::Conv2d { in_channels: channels, out_channels: h[0], kernel: 3, padding: 1, height, width },
                Layer::Relu,
                Layer::MaxPool2d { channels: h[0], height, width },
                Layer::Conv2d { in_channels: h[0], out_channels: h[1], kernel: 3, padding: 1, height: h2, width: w2 },
                Layer::Relu,
                Layer::MaxPool2d { channels: h[1], height: h2, width: w2 },
                Layer::Flatten,
                Layer::dense(h[1] * (h2 / 2) * (w2 / 2), h[2]),
                Layer::Relu,
                Layer::dense(h[2], n_classes),
            ]);
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    }
    ModelSpec::new(name, input, layers, n_classes)
}

/// Kaiming-uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`) and zero biases.
pub fn init_params(model: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(crate::INIT_STREAM);
    let mut params = vec![0.0; model.param_count()];
    for t in model.layout.tensors().iter().filter(|t| t.kind == TensorKind::Weight) {
        let bound = (6.0 / model.layers[t.layer].fan_in() as f64).sqrt();
        for p in &mut params[t.range()] {
            *p = rng.gen_range(-bound..bound);
        }
    }
    ParamVector(params)
}
