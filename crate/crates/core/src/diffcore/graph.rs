//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so the tape is already topologically sorted and backward is a single
//! reverse sweep. Parameters are bound from a [`ParameterStore`] by name; after
//! [`Graph::backward`] their gradients are added into the store's accumulators.

use std::collections::HashMap;

use rand::Rng;

use super::store::ParameterStore;
use super::tensor::{axis_split, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, xhat: Vec<S>, rstd: Vec<S> },
    Mean { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Dropout { a: usize, scale: Vec<S> },
    MaskedFill { a: usize, mask: Vec<bool> },
    Gather { a: usize, index: Vec<usize> },
    L2Normalize { a: usize, norms: Vec<S> },
    BceWithLogits { a: usize, targets: Vec<S>, pos_weight: S },
    Attention { q: usize, k: usize, v: usize, probs: usize, heads: usize },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<String, usize>,
    record: bool,
    frozen: Vec<String>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    /// A graph that records gradients for bound parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
            frozen: Vec::new(),
        }
    }

    /// A graph in which every bound parameter is a constant.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn finite(&self, op: &'static str, data: &[S]) -> Result<()> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteValue(op))
        }
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn data(&self, v: usize) -> &[S] {
        self.nodes[v].value.data()
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.finite("constant", value.data())?;
        let value = value.detached();
        Ok(self.push(value, Op::Leaf, false))
    }

    /// A differentiable leaf that is not owned by a parameter store
    /// (gradient checks use these).
    pub fn variable(&mut self, value: Tensor<S>) -> Result<Var> {
        self.finite("variable", value.data())?;
        let value = value.detached();
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Bind the named parameter of `store`; repeated binds return the same node.
    /// Make later `param(name)` lookups return `var` instead of reading a store.
    pub fn bind_param(&mut self, name: impl Into<String>, var: Var) {
        self.params.insert(name.into(), var.0);
    }

    pub fn param(&mut self, store: &ParameterStore<S>, name: &str) -> Result<Var> {
        if let Some(&id) = self.params.get(name) {
            return Ok(Var(id));
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{name}`")))?;
        let value = Tensor::new(t.shape(), t.data().to_vec())?;
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes. `b` is either a matrix shared by
    /// every leading index of `a`, or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); out_shape.iter().product()];
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            S::gemm(false, trans_b, rows, k, n, self.data(a.0), self.data(b.0), S::zero(), &mut out);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape("matmul", format!("batch {sa:?} x {sb:?}")));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let (da, db) = (self.data(a.0), self.data(b.0));
            for (i, c) in out.chunks_mut(m * n).enumerate().take(batch) {
                S::gemm(
                    false,
                    trans_b,
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    S::zero(),
                    c,
                );
            }
        }
        self.finite("matmul", &out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn suffix_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sb.iter().product())
    }

    /// `a + b`, where `b` may match a suffix of `a`'s shape (e.g. a bias row).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.suffix_broadcast("add", a, b)?;
        let out = broadcast(self.data(a.0), self.data(b.0), nb, |x, y| x + y);
        self.finite("add", &out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<S> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x - y)
            .collect();
        self.finite("sub", &out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise product; `b` may match a suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.suffix_broadcast("mul", a, b)?;
        let out = broadcast(self.data(a.0), self.data(b.0), nb, |x, y| x * y);
        self.finite("mul", &out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out: Vec<S> = self.data(a.0).iter().map(|&x| x * c).collect();
        self.finite("scale", &out)?;
        let rg = self.rg(a.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale { a: a.0, c }, rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let out: Vec<S> = self.data(a.0).iter().map(|&x| x + c).collect();
        self.finite("add_scalar", &out)?;
        let rg = self.rg(a.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddScalar { a: a.0 }, rg))
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        f: impl Fn(S) -> S,
        op: impl FnOnce(usize) -> Op<S>,
    ) -> Result<Var> {
        let out: Vec<S> = self.data(a.0).iter().map(|&x| f(x)).collect();
        self.finite(name, &out)?;
        let rg = self.rg(a.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, op(a.0), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(S::zero()), |a| Op::Relu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", |x| x.tanh(), |a| Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, |a| Op::Sigmoid { a })
    }

    // ---- reductions and normalisation ------------------------------------

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::shape(op, format!("axis {axis} of {:?}", self.shape(a))));
        }
        Ok(())
    }

    /// Softmax along `axis`. Entries equal to `-inf` receive exactly zero weight.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a.0);
        let mut out = vec![S::zero(); x.len()];
        if inner == 1 && len > 0 {
            out.copy_from_slice(x);
            out.chunks_mut(len).for_each(|row| softmax_row(row, S::one()));
        }
        for o in 0..outer {
            for i in 0..inner {
                if inner == 1 {
                    break;
                }
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / sum;
                }
            }
        }
        self.finite("softmax", &out)?;
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a: a.0, axis }, rg))
    }

    /// Log-softmax along `axis`. `-inf` inputs map to `-inf` outputs; every
    /// slice must contain at least one finite entry.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a.0);
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(S::neg_infinity(), S::max);
                if !max.is_finite() {
                    return Err(Error::NonFiniteValue("log_softmax"));
                }
                let sum: S = (0..len).map(|l| (x[at(l)] - max).exp()).sum();
                let lse = max + sum.ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - lse;
                }
            }
        }
        let ok = x
            .iter()
            .zip(&out)
            .all(|(xi, yi)| yi.is_finite() || (*xi == S::neg_infinity() && *yi == S::neg_infinity()));
        if !ok {
            return Err(Error::NonFiniteValue("log_softmax"));
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { a: a.0, axis }, rg))
    }

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} with gain {:?}", self.shape(gamma)),
            ));
        }
        let x = self.data(a.0);
        let (g, b) = (self.data(gamma.0), self.data(beta.0));
        let rows = x.len() / d.max(1);
        let mut xhat = vec![S::zero(); x.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); x.len()];
        let nd = S::of(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nd;
            let rs = S::one() / (var + S::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.finite("layer_norm", &out)?;
        let rg = self.rg(a.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a.0);
        let mut out = vec![S::zero(); outer * inner];
        let n = S::of(len as f64);
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[o * len * inner + l * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / n);
        self.finite("mean", &out)?;
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Mean { a: a.0, axis }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: S = self.data(a.0).iter().copied().sum();
        self.finite("sum", &[s])?;
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a.0);
        if x.is_empty() {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let s = x.iter().copied().sum::<S>() / S::of(x.len() as f64);
        self.finite("mean_all", &[s])?;
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { a: a.0 }, rg))
    }

    /// Divide each slice along the last axis by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize", "rank 0"))?;
        let x = self.data(a.0);
        let rows = x.len() / d.max(1);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if n == S::zero() {
                return Err(Error::ZeroNorm);
            }
            norms.push(n);
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        self.finite("l2_normalize", &out)?;
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Normalize { a: a.0, norms }, rg))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                out.extend_from_slice(&self.data(p.0)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Indices `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of axis {axis} in {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let x = self.data(a.0);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Slice { a: a.0, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.data(a.0).to_vec();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { a: a.0 }, rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = permute_offsets(&shape, perm);
        let x = self.data(a.0);
        let out: Vec<S> = src.iter().map(|&i| x[i]).collect();
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    /// Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} not in [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let scale: Vec<S> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let out: Vec<S> = self.data(a.0).iter().zip(&scale).map(|(&x, &s)| x * s).collect();
        let rg = self.rg(a.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { a: a.0, scale }, rg))
    }

    /// Replace entries where `mask` is true with `value` (which may be `-inf`).
    /// No gradient flows through replaced entries.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: S) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} for {:?}", mask.len(), self.shape(a)),
            ));
        }
        let out: Vec<S> = self
            .data(a.0)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        if value.is_nan() || value == S::infinity() {
            return Err(Error::NonFiniteValue("masked_fill"));
        }
        let rg = self.rg(a.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MaskedFill {
                a: a.0,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention. `q`, `k` and `v` are
    /// `[B, T, d]`; head `h` reads columns `h*d/heads..(h+1)*d/heads`.
    /// `blocked`, if given, is a `[B, T, T]` table whose true entries get
    /// exactly zero weight; every query must keep at least one key.
    ///
    /// Returns the `[B, T, d]` output and the `[B, heads, T, T]` weights (the
    /// latter as a constant, for inspection).
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocked: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::shape(
                "attention",
                format!("{shape:?}, {:?}, {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads for width {d}")));
        }
        if blocked.is_some_and(|m| m.len() != b * t * t) {
            return Err(Error::shape("attention", format!("mask table for {b}x{t}x{t}")));
        }
        let dh = d / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (dq, dk, dv) = (self.data(q.0), self.data(k.0), self.data(v.0));
        let mut probs = vec![S::zero(); b * heads * t * t];
        let mut out = vec![S::zero(); b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * t * d + h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..][..t * t];
                // p = q_h k_hᵀ
                S::gemm_strided(t, dh, t, &dq[off..], (d, 1), &dk[off..], (1, d), S::zero(), p, (t, 1));
                let mask = blocked.map(|m| &m[bi * t * t..(bi + 1) * t * t]);
                for (i, row) in p.chunks_mut(t).enumerate() {
                    if let Some(m) = mask {
                        for (x, &blk) in row.iter_mut().zip(&m[i * t..(i + 1) * t]) {
                            if blk {
                                *x = S::neg_infinity();
                            }
                        }
                    }
                    softmax_row(row, scale);
                }
                S::gemm_strided(t, t, dh, p, (t, 1), &dv[off..], (d, 1), S::zero(), &mut out[off..], (d, 1));
            }
        }
        self.finite("attention", &out)?;
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        let pv = self.push(Tensor::new(&[b, heads, t, t], probs)?, Op::Leaf, false);
        let o = self.push(
            Tensor::new(&shape, out)?,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                probs: pv.0,
                heads,
            },
            rg,
        );
        Ok((o, pv))
    }

    /// For a `[rows, cols]` input, pick `a[r, index[r]]` for every row.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || index.len() != shape[0] || index.iter().any(|&i| i >= shape[1]) {
            return Err(Error::shape("gather", format!("{index:?} of {shape:?}")));
        }
        let x = self.data(a.0);
        let out: Vec<S> = index.iter().enumerate().map(|(r, &c)| x[r * shape[1] + c]).collect();
        self.finite("gather", &out)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(&[shape[0]], out)?,
            Op::Gather {
                a: a.0,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// with an optional weight on the positive term.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
        let x = self.data(logits.0);
        if targets.len() != x.len() || x.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} targets for {} logits", targets.len(), x.len()),
            ));
        }
        let pw = S::of(pos_weight);
        let t: Vec<S> = targets.iter().map(|&v| S::of(v)).collect();
        let loss = x
            .iter()
            .zip(&t)
            .map(|(&z, &y)| pw * y * softplus(-z) + (S::one() - y) * softplus(z))
            .sum::<S>()
            / S::of(x.len() as f64);
        self.finite("bce_with_logits", &[loss])?;
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                a: logits.0,
                targets: t,
                pos_weight: pw,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every differentiable
    /// node, indexed by [`Var`].
    pub fn gradients(&self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if !self.rg(loss.0) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.backprop(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagate `loss` and add parameter gradients into `store`.
    /// Returns the full per-node gradients.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<S>) -> Result<Gradients<S>> {
        let grads = self.gradients(loss)?;
        for (name, &id) in &self.params {
            let (Some(g), true) = (grads.grads[id].as_ref(), self.nodes[id].requires_grad) else {
                continue;
            };
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let acc = t
                .grad_mut()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            for (a, &b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        Ok(grads)
    }

    fn backprop(&self, id: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let rg = |i: usize| self.nodes[i].requires_grad;
        let len = |i: usize| self.nodes[i].value.len();
        // accumulate f(j) into grads[i][j]
        fn acc<S: Real>(grads: &mut [Option<Vec<S>>], i: usize, n: usize) -> &mut Vec<S> {
            grads[i].get_or_insert_with(|| vec![S::zero(); n])
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *node.value.shape().last().unwrap();
                let (da, db) = (self.data(a), self.data(b));
                if sb.len() == 2 {
                    let rows: usize = sa[..sa.len() - 1].iter().product();
                    if rg(a) {
                        let ga = acc(grads, a, da.len());
                        // dA = dY · op(B)ᵀ
                        S::gemm(false, !trans_b, rows, n, k, gy, db, S::one(), ga);
                    }
                    if rg(b) {
                        let gb = acc(grads, b, db.len());
                        if trans_b {
                            S::gemm(true, false, n, rows, k, gy, da, S::one(), gb);
                        } else {
                            S::gemm(true, false, k, rows, n, da, gy, S::one(), gb);
                        }
                    }
                } else {
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    if rg(a) {
                        let ga = acc(grads, a, da.len());
                        for i in 0..batch {
                            S::gemm(
                                false,
                                !trans_b,
                                m,
                                n,
                                k,
                                &gy[i * m * n..(i + 1) * m * n],
                                &db[i * k * n..(i + 1) * k * n],
                                S::one(),
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    if rg(b) {
                        let gb = acc(grads, b, db.len());
                        for i in 0..batch {
                            let gyi = &gy[i * m * n..(i + 1) * m * n];
                            let dai = &da[i * m * k..(i + 1) * m * k];
                            let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                S::gemm(true, false, n, m, k, gyi, dai, S::one(), gbi);
                            } else {
                                S::gemm(true, false, k, m, n, dai, gyi, S::one(), gbi);
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if rg(a) {
                    add_into(acc(grads, a, gy.len()), gy);
                }
                if rg(b) {
                    let nb = len(b);
                    let gb = acc(grads, b, nb);
                    for chunk in gy.chunks(nb.max(1)) {
                        add_into(gb, chunk);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if rg(a) {
                    add_into(acc(grads, a, gy.len()), gy);
                }
                if rg(b) {
                    let gb = acc(grads, b, gy.len());
                    for (x, &g) in gb.iter_mut().zip(gy) {
                        *x = *x - g;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let nb = len(b);
                let (da, db) = (self.data(a), self.data(b));
                let nb = nb.max(1);
                if rg(a) {
                    let ga = acc(grads, a, gy.len());
                    for (gac, gc) in ga.chunks_mut(nb).zip(gy.chunks(nb)) {
                        for ((x, &g), &w) in gac.iter_mut().zip(gc).zip(db) {
                            *x = *x + g * w;
                        }
                    }
                }
                if rg(b) {
                    let gb = acc(grads, b, nb);
                    for (gc, ac) in gy.chunks(nb).zip(da.chunks(nb)) {
                        for ((x, &g), &u) in gb.iter_mut().zip(gc).zip(ac) {
                            *x = *x + g * u;
                        }
                    }
                }
            }
            &Op::Scale { a, c } => {
                let ga = acc(grads, a, gy.len());
                for (x, &g) in ga.iter_mut().zip(gy) {
                    *x = *x + g * c;
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => add_into(acc(grads, a, gy.len()), gy),
            &Op::Relu { a } => {
                let x = self.data(a);
                let ga = acc(grads, a, gy.len());
                for i in 0..gy.len() {
                    if x[i] > S::zero() {
                        ga[i] = ga[i] + gy[i];
                    }
                }
            }
            &Op::Tanh { a } => {
                let ga = acc(grads, a, gy.len());
                for i in 0..gy.len() {
                    ga[i] = ga[i] + gy[i] * (S::one() - y[i] * y[i]);
                }
            }
            &Op::Sigmoid { a } => {
                let ga = acc(grads, a, gy.len());
                for i in 0..gy.len() {
                    ga[i] = ga[i] + gy[i] * y[i] * (S::one() - y[i]);
                }
            }
            &Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                let ga = acc(grads, a, gy.len());
                if inner == 1 && n > 0 {
                    for ((gr, yr), ar) in gy.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: S = gr.iter().zip(yr).map(|(&u, &w)| u * w).sum();
                        for ((x, &u), &w) in ar.iter_mut().zip(gr).zip(yr) {
                            *x = *x + w * (u - dot);
                        }
                    }
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * n * inner + l * inner + i;
                        let dot: S = (0..n).map(|l| gy[at(l)] * y[at(l)]).sum();
                        for l in 0..n {
                            ga[at(l)] = ga[at(l)] + y[at(l)] * (gy[at(l)] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                let ga = acc(grads, a, gy.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * n * inner + l * inner + i;
                        let total: S = (0..n).map(|l| gy[at(l)]).sum();
                        for l in 0..n {
                            let p = y[at(l)].exp();
                            ga[at(l)] = ga[at(l)] + gy[at(l)] - p * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (a, gamma, beta) = (*a, *gamma, *beta);
                let d = len(gamma);
                let rows = gy.len() / d;
                let g = self.data(gamma);
                if rg(gamma) {
                    let gg = acc(grads, gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if rg(beta) {
                    let gb = acc(grads, beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + gy[r * d + j];
                        }
                    }
                }
                if rg(a) {
                    let ga = acc(grads, a, gy.len());
                    let nd = S::of(d as f64);
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let dh = gy[r * d + j] * g[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[r * d + j];
                        }
                        m1 = m1 / nd;
                        m2 = m2 / nd;
                        for j in 0..d {
                            let dh = gy[r * d + j] * g[j];
                            ga[r * d + j] = ga[r * d + j] + rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            &Op::Mean { a, axis } => {
                let (outer, n, inner) = axis_split(self.nodes[a].value.shape(), axis);
                let ga = acc(grads, a, outer * n * inner);
                let inv = S::one() / S::of(n as f64);
                for o in 0..outer {
                    for l in 0..n {
                        for i in 0..inner {
                            let k = o * n * inner + l * inner + i;
                            ga[k] = ga[k] + gy[o * inner + i] * inv;
                        }
                    }
                }
            }
            &Op::SumAll { a } => {
                let ga = acc(grads, a, len(a));
                ga.iter_mut().for_each(|x| *x = *x + gy[0]);
            }
            &Op::MeanAll { a } => {
                let n = len(a);
                let g = gy[0] / S::of(n as f64);
                let ga = acc(grads, a, n);
                ga.iter_mut().for_each(|x| *x = *x + g);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &p in parts {
                        let n = self.nodes[p].value.shape()[*axis] * inner;
                        if rg(p) {
                            let gp = acc(grads, p, len(p));
                            let dst = &mut gp[o * n..(o + 1) * n];
                            add_into(dst, &gy[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
            }
            &Op::Slice { a, axis, start } => {
                let full_shape = self.nodes[a].value.shape();
                let (outer, full, inner) = axis_split(full_shape, axis);
                let n = node.value.shape()[axis];
                let ga = acc(grads, a, outer * full * inner);
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    add_into(&mut ga[base..base + n * inner], &gy[o * n * inner..(o + 1) * n * inner]);
                }
            }
            Op::Permute { a, perm } => {
                let src = permute_offsets(self.nodes[*a].value.shape(), perm);
                let ga = acc(grads, *a, gy.len());
                for (i, &s) in src.iter().enumerate() {
                    ga[s] = ga[s] + gy[i];
                }
            }
            Op::Dropout { a, scale } => {
                let ga = acc(grads, *a, gy.len());
                for i in 0..gy.len() {
                    ga[i] = ga[i] + gy[i] * scale[i];
                }
            }
            Op::MaskedFill { a, mask } => {
                let ga = acc(grads, *a, gy.len());
                for i in 0..gy.len() {
                    if !mask[i] {
                        ga[i] = ga[i] + gy[i];
                    }
                }
            }
            Op::Gather { a, index } => {
                let cols = self.nodes[*a].value.shape()[1];
                let ga = acc(grads, *a, len(*a));
                for (r, &c) in index.iter().enumerate() {
                    ga[r * cols + c] = ga[r * cols + c] + gy[r];
                }
            }
            Op::L2Normalize { a, norms } => {
                let d = *node.value.shape().last().unwrap();
                let ga = acc(grads, *a, gy.len());
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let dot: S = yr.iter().zip(gr).map(|(&u, &v)| u * v).sum();
                    for j in 0..d {
                        ga[r * d + j] = ga[r * d + j] + (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::BceWithLogits { a, targets, pos_weight } => {
                let x = self.data(*a);
                let inv = gy[0] / S::of(x.len() as f64);
                let ga = acc(grads, *a, x.len());
                for i in 0..x.len() {
                    let p = sigmoid(x[i]);
                    let t = targets[i];
                    let d = *pos_weight * t * (p - S::one()) + (S::one() - t) * p;
                    ga[i] = ga[i] + d * inv;
                }
            }
            &Op::Attention { q, k, v, probs, heads } => {
                let shape = node.value.shape();
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = S::of(1.0 / (dh as f64).sqrt());
                let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
                let p_all = self.data(probs);
                let mut gq = vec![S::zero(); dq.len()];
                let mut gk = vec![S::zero(); dk.len()];
                let mut gv = vec![S::zero(); dv.len()];
                let mut gp = vec![S::zero(); t * t];
                for bi in 0..b {
                    for h in 0..heads {
                        let off = bi * t * d + h * dh;
                        let p = &p_all[(bi * heads + h) * t * t..][..t * t];
                        let go = &gy[off..];
                        // dV = pᵀ dO
                        S::gemm_strided(t, t, dh, p, (1, t), go, (d, 1), S::one(), &mut gv[off..], (d, 1));
                        // dP = dO vᵀ
                        S::gemm_strided(t, dh, t, go, (d, 1), &dv[off..], (1, d), S::zero(), &mut gp, (t, 1));
                        // dS = scale * p * (dP - <dP, p>) row by row
                        for (gr, pr) in gp.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: S = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                            for (x, &y) in gr.iter_mut().zip(pr) {
                                *x = scale * y * (*x - dot);
                            }
                        }
                        S::gemm_strided(t, t, dh, &gp, (t, 1), &dk[off..], (d, 1), S::one(), &mut gq[off..], (d, 1));
                        S::gemm_strided(t, t, dh, &gp, (1, t), &dq[off..], (d, 1), S::one(), &mut gk[off..], (d, 1));
                    }
                }
                for (i, g) in [(q, gq), (k, gk), (v, gv)] {
                    if rg(i) {
                        add_into(acc(grads, i, g.len()), &g);
                    }
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::gradients`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// `f(a[i], b[i % b.len()])` without the per-element division.
fn broadcast<S: Real>(a: &[S], b: &[S], nb: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
    let mut out = Vec::with_capacity(a.len());
    for chunk in a.chunks(nb.max(1)) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// In-place softmax of `scale * row`; `-inf` entries become exactly zero.
fn softmax_row<S: Real>(row: &mut [S], scale: S) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = ((*x - max) * scale).exp();
        sum = sum + *x;
    }
    let inv = S::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// For each output linear index of `permute(shape, perm)`, the input offset.
fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

