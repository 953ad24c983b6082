//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Every backward rule is itself expressed with differentiable tape
//! operations, so the gradient returned by [`Graph::grad`] is an ordinary
//! node and can be differentiated again. Hessian-vector products use this:
//! differentiate `<grad, v>` with respect to the parameters.

use std::sync::Arc;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in gather/scatter maps: gather reads zero, scatter drops the entry.
pub const NO_INDEX: u32 = u32::MAX;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<[T]>),
    /// `out[j] = x[map[j]]`
    Gather(Var, Arc<[u32]>),
    /// `out[map[j]] += x[j]`
    ScatterAdd(Var, Arc<[u32]>),
    Slice(Var, usize),
    Embed(Var, usize),
    Sum(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Append-only operation tape. Nodes are stored in creation order, which is
/// always a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("{what} expects a 2-d tensor, got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("node {} is not on this graph", v.0)))
        }
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// `op(a) * op(b)` with optional transposition of either 2-d operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (ar, ac) = dims2(self.shape(a), "matmul")?;
        let (br, bc) = dims2(self.shape(b), "matmul")?;
        let (m, k, a_strides) = if ta { (ac, ar, (1, ac as isize)) } else { (ar, ac, (ac as isize, 1)) };
        let (k2, n, b_strides) = if tb { (bc, br, (1, bc as isize)) } else { (br, bc, (bc as isize, 1)) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            a_strides,
            self.value(b).data(),
            b_strides,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, Tensor::from_parts(vec![m, n], out), rg))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, t, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check_var(a)?;
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, c), t, rg))
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(&mut self, a: Var, c: Arc<[T]>) -> Result<Var> {
        self.check_var(a)?;
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::Length { expected: ta.len(), got: c.len() });
        }
        let data = ta.data().iter().zip(c.iter()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(Op::MulConst(a, c), t, rg))
    }

    /// `relu(x)`, recorded as a product with the constant step mask of `x`.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let step: Arc<[T]> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { T::one() } else { T::zero() })
            .collect();
        self.mul_const(a, step)
    }

    pub fn gather(&mut self, x: Var, map: Arc<[u32]>, shape: Vec<usize>) -> Result<Var> {
        self.check_var(x)?;
        let n: usize = shape.iter().product();
        if n != map.len() {
            return Err(Error::Length { expected: n, got: map.len() });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n);
        for &i in map.iter() {
            if i == NO_INDEX {
                data.push(T::zero());
            } else {
                let v = *src.get(i as usize).ok_or_else(|| {
                    Error::Shape(format!("gather index {i} out of range {}", src.len()))
                })?;
                data.push(v);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Gather(x, map), Tensor::from_parts(shape, data), rg))
    }

    pub fn scatter_add(&mut self, x: Var, map: Arc<[u32]>, shape: Vec<usize>) -> Result<Var> {
        self.check_var(x)?;
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if src.len() != map.len() {
            return Err(Error::Length { expected: src.len(), got: map.len() });
        }
        let mut data = vec![T::zero(); n];
        for (&i, &v) in map.iter().zip(src) {
            if i != NO_INDEX {
                let slot = data.get_mut(i as usize).ok_or_else(|| {
                    Error::Shape(format!("scatter index {i} out of range {n}"))
                })?;
                *slot = *slot + v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::ScatterAdd(x, map), Tensor::from_parts(shape, data), rg))
    }

    /// Contiguous flat range `[start, start + len)` of `x`, viewed with `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: Vec<usize>) -> Result<Var> {
        self.check_var(x)?;
        let len: usize = shape.iter().product();
        let src = self.value(x).data();
        if start + len > src.len() {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) exceeds length {}",
                start + len,
                src.len()
            )));
        }
        let t = Tensor::from_parts(shape, src[start..start + len].to_vec());
        let rg = self.rg(x);
        Ok(self.push(Op::Slice(x, start), t, rg))
    }

    /// Places `x` at offset `start` inside a zero tensor of `shape`.
    pub fn embed(&mut self, x: Var, start: usize, shape: Vec<usize>) -> Result<Var> {
        self.check_var(x)?;
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if start + src.len() > n {
            return Err(Error::Shape(format!(
                "embed of {} values at {start} exceeds length {n}",
                src.len()
            )));
        }
        let mut data = vec![T::zero(); n];
        data[start..start + src.len()].copy_from_slice(src);
        let rg = self.rg(x);
        Ok(self.push(Op::Embed(x, start), Tensor::from_parts(shape, data), rg))
    }

    /// Sum of all entries, accumulated left to right.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(x);
        Ok(self.push(Op::Sum(x), Tensor::scalar(s), rg))
    }

    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        self.check_var(z)?;
        let (r, c) = dims2(self.shape(z), "softmax")?;
        let src = self.value(z).data();
        let mut out = vec![T::zero(); r * c];
        for (row, dst) in src.chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut total = T::zero();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - m).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let rg = self.rg(z);
        Ok(self.push(Op::SoftmaxRows(z), Tensor::from_parts(vec![r, c], out), rg))
    }

    /// Row-wise `log(sum(exp(z)))` of a 2-d tensor, giving a `[rows]` tensor.
    pub fn logsumexp_rows(&mut self, z: Var) -> Result<Var> {
        self.check_var(z)?;
        let (r, c) = dims2(self.shape(z), "logsumexp")?;
        let src = self.value(z).data();
        let out: Vec<T> = src
            .chunks(c.max(1))
            .take(r)
            .map(|row| {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let s = row.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
                m + s.ln()
            })
            .collect();
        let rg = self.rg(z);
        Ok(self.push(Op::LogSumExpRows(z), Tensor::from_parts(vec![r], out), rg))
    }

    /// Gradients of scalar `out` with respect to each of `wrt`, as new nodes.
    ///
    /// The returned nodes are differentiable, so `grad` may be applied again
    /// to any scalar built from them. Inputs with no path to `out` get a
    /// constant zero gradient.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_var(out)?;
        for &w in wrt {
            self.check_var(w)?;
        }
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "grad needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut adj: Vec<Option<Var>> = vec![None; out.0 + 1];
        let seed = Tensor::from_parts(self.shape(out).to_vec(), vec![T::one()]);
        adj[out.0] = Some(self.constant(seed));

        for i in (0..=out.0).rev() {
            let Some(gy) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.backward_rule(Var(i), &op, gy)?;
            for (input, g) in contributions {
                if !self.rg(input) {
                    continue;
                }
                adj[input.0] = Some(match adj[input.0] {
                    None => g,
                    Some(prev) => self.add(prev, g)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(w).to_vec());
                    Ok(self.constant(zeros))
                }
            })
            .collect()
    }

    fn row_map(rows: usize, cols: usize) -> Arc<[u32]> {
        (0..rows * cols).map(|i| (i / cols.max(1)) as u32).collect()
    }

    fn backward_rule(&mut self, node: Var, op: &Op<T>, gy: Var) -> Result<Vec<(Var, Var)>> {
        Ok(match *op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, ta, tb } => {
                let mut out = Vec::with_capacity(2);
                if self.rg(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul(gy, b, false, true)?,
                        (false, true) => self.matmul(gy, b, false, false)?,
                        (true, false) => self.matmul(b, gy, false, true)?,
                        (true, true) => self.matmul(b, gy, true, true)?,
                    };
                    out.push((a, ga));
                }
                if self.rg(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul(a, gy, true, false)?,
                        (false, true) => self.matmul(gy, a, true, false)?,
                        (true, false) => self.matmul(a, gy, false, false)?,
                        (true, true) => self.matmul(gy, a, true, true)?,
                    };
                    out.push((b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(a, gy), (b, gy)],
            Op::Sub(a, b) => {
                let neg = self.scale(gy, -T::one())?;
                vec![(a, gy), (b, neg)]
            }
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.rg(a) {
                    out.push((a, self.mul(gy, b)?));
                }
                if self.rg(b) {
                    out.push((b, self.mul(gy, a)?));
                }
                out
            }
            Op::Scale(a, c) => vec![(a, self.scale(gy, c)?)],
            Op::MulConst(a, ref c) => vec![(a, self.mul_const(gy, c.clone())?)],
            Op::Gather(x, ref map) => {
                let shape = self.shape(x).to_vec();
                vec![(x, self.scatter_add(gy, map.clone(), shape)?)]
            }
            Op::ScatterAdd(x, ref map) => {
                let shape = self.shape(x).to_vec();
                vec![(x, self.gather(gy, map.clone(), shape)?)]
            }
            Op::Slice(x, start) => {
                let shape = self.shape(x).to_vec();
                vec![(x, self.embed(gy, start, shape)?)]
            }
            Op::Embed(x, start) => {
                let shape = self.shape(x).to_vec();
                vec![(x, self.slice(gy, start, shape)?)]
            }
            Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                let map: Arc<[u32]> = vec![0u32; self.value(x).len()].into();
                vec![(x, self.gather(gy, map, shape)?)]
            }
            Op::SoftmaxRows(z) => {
                // dz = s * (gy - rowsum(gy * s))
                let (r, c) = dims2(self.shape(z), "softmax")?;
                let map = Self::row_map(r, c);
                let gs = self.mul(gy, node)?;
                let rs = self.scatter_add(gs, map.clone(), vec![r])?;
                let rb = self.gather(rs, map, vec![r, c])?;
                let d = self.sub(gy, rb)?;
                vec![(z, self.mul(node, d)?)]
            }
            Op::LogSumExpRows(z) => {
                let (r, c) = dims2(self.shape(z), "logsumexp")?;
                let map = Self::row_map(r, c);
                let gb = self.gather(gy, map, vec![r, c])?;
                let s = self.softmax_rows(z)?;
                vec![(z, self.mul(gb, s)?)]
            }
        })
    }
}
