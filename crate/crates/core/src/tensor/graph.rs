use std::collections::BTreeMap;

use super::{log_sigmoid_scalar, matmul_raw, sigmoid_scalar, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    LogSigmoid(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    BroadcastRows(Var),
    RowNormalize(Var),
    SliceRows { x: Var, start: usize },
    GwEnergy { cs: Var, cv: Var, plan: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear tape of recorded operations.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep. A graph is built for one
/// forward pass and dropped afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

/// Splits a shape around `axis` into (outer, len, inner) strides.
fn axis_dims(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn keepdim(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape().len() {
        1 => Ok((1, t.shape()[0])),
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element var.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite output from {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Repeated requests return the same var,
    /// so each parameter appears on the tape exactly once.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))?
            .value
            .clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (r, k, c) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::new(vec![r, c], matmul_raw(av.data(), bv.data(), r, k, c))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        as_matrix(av, "transpose")?;
        let out = av.transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(out, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), "add_scalar", |x| x + c)
    }

    /// `1 - x`, the complement used by convex gate updates.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.scale(a, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid_scalar)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Degenerate("ln of a non-positive value".into()));
        }
        self.unary(a, Op::Ln(a), "ln", f64::ln)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSigmoid(a), "log_sigmoid", log_sigmoid_scalar)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), "abs", f64::abs)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_dims(xv.shape(), axis, "softmax")?;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Log-sum-exp along `axis`; the reduced axis is kept with length 1.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_dims(xv.shape(), axis, "log_sum_exp")?;
        let src = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = src[o * len * inner + k * inner + i];
                }
                out[o * inner + i] = super::log_sum_exp(&buf);
            }
        }
        let out = Tensor::new(keepdim(xv.shape(), axis), out)?;
        let rg = self.rg(x);
        self.push(out, Op::LogSumExp { x, axis }, rg, "log_sum_exp")
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let name = if mean { "mean" } else { "sum" };
        let out = match axis {
            None => {
                let s = xv.sum();
                Tensor::scalar(if mean { s / xv.numel() as f64 } else { s })
            }
            Some(axis) => {
                let (outer, len, inner) = axis_dims(xv.shape(), axis, name)?;
                let src = xv.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += src[o * len * inner + k * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                Tensor::new(keepdim(xv.shape(), axis), out)?
            }
        };
        let rg = self.rg(x);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        self.push(out, op, rg, name)
    }

    /// Sum along `axis` (kept with length 1), or over everything to a scalar.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let (outer, _, inner) = axis_dims(&first, axis, "concat")?;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter().enumerate().all(|(i, &n)| i == axis || n == first[i]);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Stacks a row vector `n` times into an `n x c` matrix.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![1, xv.cols()],
            });
        }
        let c = xv.numel();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        self.push(out, Op::BroadcastRows(x), rg, "broadcast_rows")
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix(xv, "row_normalize")?;
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {norm:e}; cosine distance needs nonzero vectors"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize(x), rg, "row_normalize")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix(xv, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = Tensor::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    /// Pairwise cosine distances `1 - <a_i, b_j> / (|a_i| |b_j|)` between the
    /// rows of `a` (`n x d`) and `b` (`m x d`), as an `n x m` matrix.
    pub fn cosine_distance_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.row_normalize(a)?;
        let bn = self.row_normalize(b)?;
        let bt = self.transpose(bn)?;
        let sim = self.matmul(an, bt)?;
        self.one_minus(sim)
    }

    /// Cosine distance between two row vectors, as a scalar.
    pub fn cosine_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let m = self.cosine_distance_matrix(u, v)?;
        self.reshape(m, &[])
    }

    /// Gromov-Wasserstein structure energy for a fixed plan:
    /// `sum_{i,j,i',j'} T_ij T_i'j' |cs_ii' - cv_jj'|`.
    pub fn gw_energy(&mut self, cs: Var, cv: Var, plan: &Tensor) -> Result<Var> {
        let (csv, cvv) = (self.value(cs), self.value(cv));
        let (n, m) = (csv.rows(), cvv.rows());
        if csv.cols() != n || cvv.cols() != m || plan.rows() != n || plan.cols() != m {
            return Err(Error::Shape {
                op: "gw_energy",
                lhs: csv.shape().to_vec(),
                rhs: cvv.shape().to_vec(),
            });
        }
        let lin = gw_linear_term(csv, cvv, plan);
        let e: f64 = lin.data().iter().zip(plan.data()).map(|(l, t)| l * t).sum();
        let rg = self.rg(cs) || self.rg(cv);
        self.push(
            Tensor::scalar(e),
            Op::GwEnergy {
                cs,
                cv,
                plan: plan.clone(),
            },
            rg,
            "gw_energy",
        )
    }

    /// Binary cross-entropy of a logit against a 0/1 label, computed through
    /// log-sigmoid for stability.
    pub fn bce_with_logit(&mut self, logit: Var, label: f64) -> Result<Var> {
        let lp = self.log_sigmoid(logit)?;
        let neg = self.scale(logit, -1.0)?;
        let lq = self.log_sigmoid(neg)?;
        let a = self.scale(lp, -label)?;
        let b = self.scale(lq, -(1.0 - label))?;
        self.add(a, b)
    }

    /// Affine map on rows: `x W + b` with `b` broadcast across rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let n = self.value(xw).rows();
        let bb = self.broadcast_rows(b, n)?;
        self.add(xw, bb)
    }

    /// Reverse sweep returning gradients for all trainable parameters in
    /// `params`. Parameters that never entered this graph get zeros.
    pub fn backward(&self, loss: Var, params: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward_vars(loss)?;
        let mut out = BTreeMap::new();
        for (name, p) in params.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|&v| grads.get(v))
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    pub fn backward_vars(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, k, c) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let bt = bv.transpose();
                    acc(*a, matmul_raw(g, bt.data(), r, c, k));
                }
                if self.rg(*b) {
                    let at = av.transpose();
                    acc(*b, matmul_raw(at.data(), g, k, r, c));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let gt = Tensor::new(vec![r, c], g.to_vec()).expect("shape").transpose();
                acc(*a, gt.into_data());
            }
            Op::Reshape(a) | Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Sigmoid(a) => acc(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(a) => acc(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Exp(a) => acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Ln(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| g * sigmoid_scalar(-x)).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, x)| g * sign(*x)).collect());
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_dims(node.value.shape(), *axis, "softmax").expect("axis");
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSumExp { x, axis } => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_dims(xv.shape(), *axis, "log_sum_exp").expect("axis");
                let src = xv.data();
                let mut dx = vec![0.0; src.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = y[o * inner + i];
                        let go = g[o * inner + i];
                        for k in 0..len {
                            let j = o * len * inner + k * inner + i;
                            dx[j] = go * (src[j] - lse).exp();
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let xv = self.value(*x);
                let dx = match axis {
                    None => {
                        let s = if mean { g[0] / xv.numel() as f64 } else { g[0] };
                        vec![s; xv.numel()]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_dims(xv.shape(), *axis, "sum").expect("axis");
                        let div = if mean { len as f64 } else { 1.0 };
                        let mut dx = vec![0.0; xv.numel()];
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    dx[o * len * inner + k * inner + i] = g[o * inner + i] / div;
                                }
                            }
                        }
                        dx
                    }
                };
                acc(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_dims(node.value.shape(), *axis, "concat").expect("axis");
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.value(p).shape()[*axis] * inner;
                    let mut dp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * total + offset;
                        dp.extend_from_slice(&g[start..start + chunk]);
                    }
                    offset += chunk;
                    acc(p, dp);
                }
            }
            Op::BroadcastRows(x) => {
                let c = self.value(*x).numel();
                let mut dx = vec![0.0; c];
                for row in g.chunks(c) {
                    dx.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*x, dx);
            }
            Op::RowNormalize(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; y.len()];
                for i in 0..xv.rows() {
                    let xr = &xv.data()[i * c..(i + 1) * c];
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::GwEnergy { cs, cv, plan } => {
                let (csv, cvv) = (self.value(*cs), self.value(*cv));
                let (n, m) = (csv.rows(), cvv.rows());
                let mut dcs = vec![0.0; n * n];
                let mut dcv = vec![0.0; m * m];
                for i in 0..n {
                    for ip in 0..n {
                        let a = csv.at(i, ip);
                        for j in 0..m {
                            let tij = plan.at(i, j);
                            if tij == 0.0 {
                                continue;
                            }
                            for jp in 0..m {
                                let w = tij * plan.at(ip, jp) * sign(a - cvv.at(j, jp)) * g[0];
                                dcs[i * n + ip] += w;
                                dcv[j * m + jp] -= w;
                            }
                        }
                    }
                }
                acc(*cs, dcs);
                acc(*cv, dcv);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(L ⊗ T)_ij = sum_{i',j'} |cs_ii' - cv_jj'| T_i'j'` on plain values.
pub(crate) fn gw_linear_term(cs: &Tensor, cv: &Tensor, plan: &Tensor) -> Tensor {
    let (n, m) = (cs.rows(), cv.rows());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for ip in 0..n {
                let a = cs.at(i, ip);
                for jp in 0..m {
                    s += (a - cv.at(j, jp)).abs() * plan.at(ip, jp);
                }
            }
            out.data_mut()[i * m + j] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_unit_vectors() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let b = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let u = g.constant(mat(&[&[1.0, 0.0]]));
        let v = g.constant(mat(&[&[1.0], &[0.0]]));
        let w = g.matmul(u, v).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::row(&[1000.0, 1000.0]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::row(&[0.0, 3f64.ln()]));
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_rows_and_columns() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 4.0]]));
        let by_row = g.softmax(x, 1).unwrap();
        let by_col = g.softmax(x, 0).unwrap();
        let r = g.value(by_row);
        for i in 0..2 {
            assert!((r.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = g.value(by_col).transpose();
        for j in 0..3 {
            assert!((c.row_slice(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reductions_and_cosine() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let m = g.mean(x, Some(0)).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let s = g.sum(x, Some(1)).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 12.0]);

        let u = g.constant(Tensor::row(&[1.0, 0.0]));
        let v = g.constant(Tensor::row(&[0.0, 1.0]));
        let d_uu = g.cosine_distance(u, u).unwrap();
        let d_uv = g.cosine_distance(u, v).unwrap();
        assert!(g.item(d_uu).abs() < 1e-15);
        assert!((g.item(d_uv) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::row(&[0.0, 0.0]));
        let v = g.constant(Tensor::row(&[0.0, 1.0]));
        assert!(matches!(g.cosine_distance(u, v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn concat_both_axes() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(mat(&[&[5.0], &[6.0]]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert!(g.concat(&[a, b], 0).is_err());
        let r = g.constant(Tensor::row(&[9.0, 9.0]));
        let d = g.concat(&[a, r], 0).unwrap();
        assert_eq!(g.value(d).shape(), &[3, 2]);
    }

    #[test]
    fn backward_needs_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(a, &store), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_of_sum_and_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap());
        store.insert("unused", Tensor::full(&[2], 5.0));

        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let s = g.sum(p, None).unwrap();
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(grads["p"].data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);

        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let pt = g.transpose(p).unwrap();
        let q = g.matmul(p, pt).unwrap();
        let half = g.scale(q, 0.5).unwrap();
        let loss = g.reshape(half, &[]).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads["p"].data(), &[0.3, -1.2, 2.0]);
    }

    #[test]
    fn param_registered_once() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let loss = g.reshape(s, &[]).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads["w"].data(), &[2.0]);
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::Numerical(_))));
    }
}
