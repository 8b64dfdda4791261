//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep. A variable used at several sites
//! accumulates the sum of the per-site gradients, which is what makes tied
//! parameters work: a tied group enters the graph once and every slot bound to
//! it reads the same leaf.
//!
//! A graph is confined to one thread; operations parallelize internally over
//! independent batch rows where it pays off.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, View};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// tanh approximation
    Gelu,
}

/// Shape and masking of one multi-head attention application.
///
/// Keys are laid out per batch element as `prefix_len` always-visible rows
/// followed by `k_len - prefix_len` sequence rows. With `causal`, query `i`
/// (absolute position `q_offset + i`) sees sequence key `j` only if
/// `j <= q_offset + i`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub causal: bool,
    pub q_offset: usize,
    pub prefix_len: usize,
    /// `[batch × (k_len - prefix_len)]`, true where the key is a real token.
    pub key_mask: Option<Arc<[bool]>>,
}

impl AttentionSpec {
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        if j < self.prefix_len {
            return true;
        }
        let kj = j - self.prefix_len;
        if let Some(mask) = &self.key_mask {
            if !mask[b * (self.k_len - self.prefix_len) + kj] {
                return false;
            }
        }
        !(self.causal && kj > self.q_offset + i)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Activate { x: Var, kind: Activation },
    Dropout { x: Var, mask: Vec<T> },
    Gather { table: Var, ids: Vec<u32> },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { logits: Var, dlogits: Vec<T> },
    Sum(Var),
    ConcatPrefix { prefix: Var, x: Var, batch: usize },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that shares its buffer with the caller (no copy).
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a · b` (or `a · bᵀ` with `trans_b`). `a` may have any rank; it is
    /// viewed as a matrix over its trailing dimension. `b` must be 2-D.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 {
            return Err(Error::shape("matmul", format!("rhs must be 2-D, got {:?}", bv.shape())));
        }
        let (k, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if av.cols() != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}{}", av.shape(), bv.shape(), if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let m = av.rows();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        let bview = if trans_b {
            View::row_major(0, n, k, k).t()
        } else {
            View::row_major(0, k, n, n)
        };
        gemm(
            av.data(),
            View::row_major(0, m, k, k),
            bv.data(),
            bview,
            T::zero(),
            out.data_mut(),
            View::row_major(0, m, n, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Broadcast-add a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.cols();
        if bv.numel() != d {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = (*self.value_arc(x)).clone();
        let b = bv.data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| activation_value(kind, v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Activate { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    /// Inverted dropout. `p == 0` or `rng == None` (evaluation) is the identity
    /// and adds no node.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Row lookup: `table [V × e]`, result `[ids.len() × e]`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("gather", format!("table must be 2-D, got {:?}", tv.shape())));
        }
        let (vocab, e) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::InvalidInput("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::InvalidInput(format!("token id {id} >= vocabulary size {vocab}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), e], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Normalize each row of `x` over its trailing dimension, then apply the
    /// affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let rows = xv.rows();
        let mut normed = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let nh = (row[c] - mean) * rs;
                normed[r * d + c] = nh;
                out[r * d + c] = nh * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            rg,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Mean label-smoothed cross-entropy over rows whose `counted` flag is set.
    ///
    /// The target receives probability `1 - smoothing`; the smoothing mass is
    /// spread uniformly over the other `V - 1` entries.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        counted: Option<&[bool]>,
        smoothing: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidInput(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows || counted.is_some_and(|c| c.len() != rows) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows vs {} targets", targets.len()),
            ));
        }
        let count = counted.map_or(rows, |c| c.iter().filter(|&&b| b).count());
        let other = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
        let on = 1.0 - if vocab > 1 { smoothing } else { 0.0 };
        let mut loss = 0.0f64;
        let mut dlogits = vec![T::zero(); lv.numel()];
        for r in 0..rows {
            if counted.is_some_and(|c| !c[r]) {
                continue;
            }
            let t = targets[r] as usize;
            if t >= vocab {
                return Err(Error::InvalidInput(format!("target {t} >= vocabulary size {vocab}")));
            }
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for (c, v) in row.iter().enumerate() {
                let logp = v.as_f64() - lse;
                let q = if c == t { on } else { other };
                row_loss -= q * logp;
                dlogits[r * vocab + c] = T::from_f64_lossy((logp.exp() - q) / count as f64);
            }
            loss += row_loss;
        }
        let loss = if count == 0 { 0.0 } else { loss / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::CrossEntropy { logits, dlogits },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Prepend the `[L × d]` prefix to each of the `batch` row blocks of `x`.
    pub fn concat_prefix(&mut self, prefix: Var, x: Var, batch: usize) -> Result<Var> {
        let (pv, xv) = (self.value(prefix), self.value(x));
        let d = xv.cols();
        if pv.rank() != 2 || pv.cols() != d || batch == 0 || xv.rows() % batch != 0 {
            return Err(Error::shape(
                "concat_prefix",
                format!("prefix {:?}, x {:?}, batch {batch}", pv.shape(), xv.shape()),
            ));
        }
        let n = xv.rows() / batch;
        let l = pv.rows();
        let mut data = Vec::with_capacity(batch * (l + n) * d);
        for b in 0..batch {
            data.extend_from_slice(pv.data());
            data.extend_from_slice(&xv.data()[b * n * d..(b + 1) * n * d]);
        }
        let out = Tensor::new(vec![batch * (l + n), d], data)?;
        let rg = self.rg(&[prefix, x]);
        Ok(self.push(out, Op::ConcatPrefix { prefix, x, batch }, rg))
    }

    /// Multi-head scaled dot-product attention over `[batch·len × d]` row
    /// blocks; scores are scaled by `1/√(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let ok = spec.heads > 0
            && d % spec.heads == 0
            && kv.cols() == d
            && vv.cols() == d
            && qv.rows() == spec.batch * spec.q_len
            && kv.rows() == spec.batch * spec.k_len
            && vv.rows() == spec.batch * spec.k_len
            && spec.prefix_len <= spec.k_len
            && spec
                .key_mask
                .as_ref()
                .is_none_or(|m| m.len() == spec.batch * (spec.k_len - spec.prefix_len));
        if !ok {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, batch {}, heads {}, q_len {}, k_len {}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape(),
                    spec.batch,
                    spec.heads,
                    spec.q_len,
                    spec.k_len
                ),
            ));
        }
        let (nq, nk, heads) = (spec.q_len, spec.k_len, spec.heads);
        let mut out = vec![T::zero(); qv.numel()];
        let mut probs = vec![T::zero(); spec.batch * heads * nq * nk];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        out.par_chunks_mut(nq * d)
            .zip(probs.par_chunks_mut(heads * nq * nk))
            .enumerate()
            .for_each(|(b, (out_b, probs_b))| {
                let q_b = &qd[b * nq * d..(b + 1) * nq * d];
                let k_b = &kd[b * nk * d..(b + 1) * nk * d];
                let v_b = &vd[b * nk * d..(b + 1) * nk * d];
                attention_forward_batch(&spec, b, d, q_b, k_b, v_b, out_b, probs_b);
            });
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.backward_with_seed(loss, vec![T::one()])
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape("backward", "seed does not match root shape".to_string()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = av.rows();
                let k = av.cols();
                let n = node.value.cols();
                let gview = View::row_major(0, m, n, n);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    let bview = if *trans_b {
                        View::row_major(0, n, k, k)
                    } else {
                        View::row_major(0, k, n, n).t()
                    };
                    gemm(g, gview, bv.data(), bview, T::one(), ga, View::row_major(0, m, k, k));
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    let aview = View::row_major(0, m, k, k);
                    if *trans_b {
                        // B is [n × k]: dB = dCᵀ · A
                        gemm(g, gview.t(), av.data(), aview, T::one(), gb, View::row_major(0, n, k, k));
                    } else {
                        // dB = Aᵀ · dC
                        gemm(av.data(), aview.t(), g, gview, T::one(), gb, View::row_major(0, k, n, n));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(buf) = self.grad_buf(grads, *v) {
                        buf.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                let d = node.value.cols();
                if let Some(buf) = self.grad_buf(grads, *bias) {
                    for row in g.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((o, &gg), &y) in buf.iter_mut().zip(g).zip(bv.data()) {
                        *o += gg * y;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for ((o, &gg), &x) in buf.iter_mut().zip(g).zip(av.data()) {
                        *o += gg * x;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, &gg)| *o += gg * *f);
                }
            }
            Op::Activate { x, kind } => {
                let xv = self.value(*x);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((o, &gg), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                        *o += gg * activation_derivative(*kind, v);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((o, &gg), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *o += gg * m;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let e = node.value.cols();
                if let Some(buf) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id as usize * e..(id as usize + 1) * e];
                        dst.iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data().to_vec();
                let dn = T::from_usize(d).unwrap();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let nr = &normed[r * d..(r + 1) * d];
                        let mut mean_dx = T::zero();
                        let mut mean_dxn = T::zero();
                        for c in 0..d {
                            let dxhat = gr[c] * gv[c];
                            mean_dx += dxhat;
                            mean_dxn += dxhat * nr[c];
                        }
                        mean_dx = mean_dx / dn;
                        mean_dxn = mean_dxn / dn;
                        for c in 0..d {
                            let dxhat = gr[c] * gv[c];
                            buf[r * d + c] += rs * (dxhat - mean_dx - nr[c] * mean_dxn);
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *gain) {
                    for (row_g, row_n) in g.chunks(d).zip(normed.chunks(d)) {
                        for c in 0..d {
                            buf[c] += row_g[c] * row_n[c];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *bias) {
                    for row_g in g.chunks(d) {
                        buf.iter_mut().zip(row_g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..*len {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, dlogits } => {
                let up = g[0];
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    buf.iter_mut().zip(dlogits).for_each(|(o, &x)| *o += x * up);
                }
            }
            Op::Sum(x) => {
                let up = g[0];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().for_each(|o| *o += up);
                }
            }
            Op::ConcatPrefix { prefix, x, batch } => {
                let d = node.value.cols();
                let l = self.value(*prefix).rows();
                let n = self.value(*x).rows() / batch;
                let block = (l + n) * d;
                if let Some(buf) = self.grad_buf(grads, *prefix) {
                    for b in 0..*batch {
                        let src = &g[b * block..b * block + l * d];
                        buf.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for b in 0..*batch {
                        let src = &g[b * block + l * d..(b + 1) * block];
                        buf[b * n * d..(b + 1) * n * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (nq, nk, heads) = (spec.q_len, spec.k_len, spec.heads);
        // Separate buffers so the three inputs may alias the same variable.
        let mut dq = vec![T::zero(); qv.numel()];
        let mut dk = vec![T::zero(); kv.numel()];
        let mut dv = vec![T::zero(); vv.numel()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        dq.par_chunks_mut(nq * d)
            .zip(dk.par_chunks_mut(nk * d))
            .zip(dv.par_chunks_mut(nk * d))
            .enumerate()
            .for_each(|(b, ((dq_b, dk_b), dv_b))| {
                attention_backward_batch(
                    spec,
                    d,
                    &qd[b * nq * d..(b + 1) * nq * d],
                    &kd[b * nk * d..(b + 1) * nk * d],
                    &vd[b * nk * d..(b + 1) * nk * d],
                    &probs[b * heads * nq * nk..(b + 1) * heads * nq * nk],
                    &g[b * nq * d..(b + 1) * nq * d],
                    dq_b,
                    dk_b,
                    dv_b,
                );
            });
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.grad_buf(grads, var) {
                buf.iter_mut().zip(&delta).for_each(|(o, &x)| *o += x);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_forward_batch<T: Scalar>(
    spec: &AttentionSpec,
    b: usize,
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    out: &mut [T],
    probs: &mut [T],
) {
    let (nq, nk, heads) = (spec.q_len, spec.k_len, spec.heads);
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        let qh = View::row_major(h * dh, nq, dh, d);
        let kh = View::row_major(h * dh, nk, dh, d);
        gemm(q, qh, k, kh.t(), T::zero(), p, View::row_major(0, nq, nk, nk));
        for i in 0..nq {
            let row = &mut p[i * nk..(i + 1) * nk];
            let mut max = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                if spec.visible(b, i, j) {
                    *s = *s * scale;
                    max = max.max(*s);
                }
            }
            if max == T::neg_infinity() {
                row.iter_mut().for_each(|s| *s = T::zero());
                continue;
            }
            let mut sum = T::zero();
            for (j, s) in row.iter_mut().enumerate() {
                if spec.visible(b, i, j) {
                    *s = (*s - max).exp();
                    sum += *s;
                } else {
                    *s = T::zero();
                }
            }
            row.iter_mut().for_each(|s| *s = *s / sum);
        }
        gemm(
            p,
            View::row_major(0, nq, nk, nk),
            v,
            View::row_major(h * dh, nk, dh, d),
            T::zero(),
            out,
            View::row_major(h * dh, nq, dh, d),
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward_batch<T: Scalar>(
    spec: &AttentionSpec,
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (nq, nk, heads) = (spec.q_len, spec.k_len, spec.heads);
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ds = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let pview = View::row_major(0, nq, nk, nk);
        let gh = View::row_major(h * dh, nq, dh, d);
        let kvh = View::row_major(h * dh, nk, dh, d);
        // dP = dO · Vᵀ
        gemm(g, gh, v, kvh.t(), T::zero(), &mut ds, pview);
        // dV += Pᵀ · dO
        gemm(p, pview.t(), g, gh, T::one(), dv, kvh);
        for i in 0..nq {
            let prow = &p[i * nk..(i + 1) * nk];
            let drow = &mut ds[i * nk..(i + 1) * nk];
            let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (dsv, &pv) in drow.iter_mut().zip(prow) {
                *dsv = pv * (*dsv - dot) * scale;
            }
        }
        // dQ += dS · K ; dK += dSᵀ · Q
        gemm(&ds, pview, k, kvh, T::one(), dq, View::row_major(h * dh, nq, dh, d));
        gemm(&ds, pview.t(), q, View::row_major(h * dh, nq, dh, d), T::one(), dk, kvh);
    }
}

fn activation_value<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => {
            let (c, a) = gelu_consts::<T>();
            let half = T::from_f64_lossy(0.5);
            half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
        }
    }
}

fn activation_derivative<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let (c, a) = gelu_consts::<T>();
            let half = T::from_f64_lossy(0.5);
            let three = T::from_f64_lossy(3.0);
            let u = c * (x + a * x * x * x);
            let t = u.tanh();
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}
