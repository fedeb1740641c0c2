//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar with respect to
//! every node that depends on a variable leaf.

use super::tensor::{
    self, cross_entropy_forward, ensure_finite, gelu_grad_scalar, gemm_nt,
    gemm_tn, layer_norm_forward, mask_group, matmul_plan, softmax_row, Tensor,
};
use super::{NumericsError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which (query, key) pairs may interact inside [`Tape::attention`].
///
/// `keys` holds one row of `Sk` flags per batch entry (or a single row shared
/// by all entries); `pairs` is a `Sq x Sk` table shared across the batch.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    pub keys: Option<Vec<bool>>,
    pub pairs: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn keys(mask: Vec<bool>) -> Self {
        Self {
            keys: Some(mask),
            pairs: None,
        }
    }

    fn allowed(&self, b: usize, i: usize, j: usize, sk: usize) -> bool {
        let key_ok = match &self.keys {
            Some(m) if m.len() == sk => m[j],
            Some(m) => m[b * sk + j],
            None => true,
        };
        key_ok && self.pairs.as_ref().is_none_or(|p| p[i * sk + j])
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
        group: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Repeat(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        ensure_finite(op_name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::Matmul(a, b), rg)
    }

    /// Elementwise sum. Either operand may broadcast when its shape is a
    /// suffix of the other's (e.g. a `[d]` bias onto `[.., d]`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small) = if sa.ends_with(sb) {
            (a, b)
        } else if sb.ends_with(sa) {
            (b, a)
        } else {
            return Err(NumericsError::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let mut value = self.value(big).clone();
        let s = self.value(small).data();
        for chunk in value.data_mut().chunks_exact_mut(s.len()) {
            for (o, v) in chunk.iter_mut().zip(s) {
                *o += v;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(big, small), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())?;
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = tensor::gelu(self.value(a));
        let rg = self.rg(a);
        self.push("gelu", value, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, means, rstds) = layer_norm_forward(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
            rg,
        )
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let value = tensor::masked_softmax(self.value(x), mask)?;
        let n = *self.shape(x).last().unwrap_or(&1);
        let group = mask_group(value.len(), n, mask.len())?;
        let rg = self.rg(x);
        self.push(
            "masked_softmax",
            value,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
                group,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `q` is `[B, Sq, D]`, `k` and `v` are `[B, Sk, D]`; head `h` uses the
    /// feature slice `h*D/heads..(h+1)*D/heads`. Scores are scaled by
    /// `1/sqrt(D/heads)`. Disallowed keys get exactly zero weight and never
    /// enter the weighted sum.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        let shape_err = || NumericsError::Shape {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        };
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err());
        }
        let (b, sq, d) = (qs[0], qs[1], qs[2]);
        let sk = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Config(format!(
                "embedding dim {d} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = &mask.keys {
            if m.len() != sk && m.len() != b * sk {
                return Err(shape_err());
            }
        }
        if let Some(p) = &mask.pairs {
            if p.len() != sq * sk {
                return Err(shape_err());
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; b * sq * d];
        let mut probs = if rg { vec![0.0; b * heads * sq * sk] } else { Vec::new() };
        let mut scores = vec![0.0; sk];
        let mut allowed = vec![false; sk];
        let mut p = vec![0.0; sk];
        for bi in 0..b {
            for i in 0..sq {
                for (j, a) in allowed.iter_mut().enumerate() {
                    *a = mask.allowed(bi, i, j, sk);
                }
                for h in 0..heads {
                    let qrow = &qd[(bi * sq + i) * d + h * dh..][..dh];
                    for j in 0..sk {
                        scores[j] = if allowed[j] {
                            let krow = &kd[(bi * sk + j) * d + h * dh..][..dh];
                            scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>()
                        } else {
                            0.0
                        };
                    }
                    softmax_row(&scores, &allowed, &mut p).ok_or(NumericsError::FullyMasked {
                        row: (bi * heads + h) * sq + i,
                    })?;
                    let orow = &mut out[(bi * sq + i) * d + h * dh..][..dh];
                    for j in 0..sk {
                        if !allowed[j] {
                            continue;
                        }
                        let vrow = &vd[(bi * sk + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * x;
                        }
                    }
                    if rg {
                        probs[((bi * heads + h) * sq + i) * sk..][..sk].copy_from_slice(&p);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, sq, d], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            rg,
        )
    }

    /// Mean cross-entropy of `[n, K]` logits against class indices, skipping
    /// rows whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (loss, probs, count) = cross_entropy_forward(self.value(logits), targets, ignore)?;
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = tensor::permute(self.value(x), axes)?;
        let rg = self.rg(x);
        self.push("permute", value, Op::Permute(x, axes.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(NumericsError::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(NumericsError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let run = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push("concat", value, Op::Concat(inputs.to_vec(), axis), rg)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(NumericsError::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(x);
        self.push("slice", value, Op::Slice { x, axis, start }, rg)
    }

    /// Repeats `x` along new leading axes: output shape is `prefix ++ shape(x)`.
    pub fn broadcast_leading(&mut self, x: Var, prefix: &[usize]) -> Result<Var> {
        let reps: usize = prefix.iter().product();
        let src = self.value(x);
        let mut out = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            out.extend_from_slice(src.data());
        }
        let mut shape = prefix.to_vec();
        shape.extend_from_slice(src.shape());
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push("broadcast_leading", value, Op::Repeat(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Gradients of `seed * loss`; `loss` must hold a single value.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), seed));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let plan = matmul_plan(av.shape(), bv.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.rg(*a) {
                    let mut da = vec![0.0; av.len()];
                    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                        gemm_nt(
                            &g.data()[bi * m * n..][..m * n],
                            &bv.data()[ob * k * n..][..k * n],
                            &mut da[oa * m * k..][..m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                        gemm_tn(
                            &av.data()[oa * m * k..][..m * k],
                            &g.data()[bi * m * n..][..m * n],
                            &mut db[ob * k * n..][..k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accum(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(big, small) => {
                self.accum(grads, *big, g.clone());
                if self.rg(*small) {
                    let n = self.value(*small).len();
                    let mut ds = vec![0.0; n];
                    for chunk in g.data().chunks_exact(n) {
                        for (d, v) in ds.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accum(grads, *small, Tensor::new(self.shape(*small).to_vec(), ds)?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                self.accum(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                self.accum(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|v| v * s).collect();
                self.accum(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * gelu_grad_scalar(*xv))
                    .collect();
                self.accum(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..xv.len() / d {
                    let src = &xv.data()[r * d..][..d];
                    let gr = &g.data()[r * d..][..d];
                    for j in 0..d {
                        xhat[j] = (src[j] - means[r]) * rstds[r];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstds[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accum(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                self.accum(grads, *gain, Tensor::new(vec![d], dgain)?);
                self.accum(grads, *bias, Tensor::new(vec![d], dbias)?);
            }
            Op::MaskedSoftmax { x, mask, group } => {
                let p = &node.value;
                let n = *p.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; p.len()];
                for (row, ((pr, gr), dr)) in p
                    .data()
                    .chunks_exact(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                    .enumerate()
                {
                    let mrow = &mask[(row / group) * n..][..n];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if mrow[j] {
                            dr[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(p.shape().to_vec(), dx)?);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, mask, probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let kc = lv.shape()[1];
                let scale = g.item() / *count as f64;
                let mut d = vec![0.0; lv.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    for c in 0..kc {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[i * kc + c] = scale * (probs[i * kc + c] - onehot);
                    }
                }
                self.accum(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accum(grads, *x, tensor::permute(g, &inverse)?);
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Concat(inputs, axis) => {
                let (outer, inner) = outer_inner(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(self.value(v).len());
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * total + offset) * inner..][..ext * inner]);
                        }
                        self.accum(grads, v, Tensor::new(self.shape(v).to_vec(), d)?);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, inner) = outer_inner(shape, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                self.accum(grads, *x, Tensor::new(shape.to_vec(), d)?);
            }
            Op::Repeat(x) => {
                let n = self.value(*x).len();
                let mut d = vec![0.0; n];
                for chunk in g.data().chunks_exact(n) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), d)?);
            }
            Op::Sum(x) => {
                self.accum(grads, *x, Tensor::full(self.shape(*x), g.item()));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, sq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let sk = kv.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; sk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..sq {
                    let p = &probs[((bi * heads + h) * sq + i) * sk..][..sk];
                    let grow = &gd[(bi * sq + i) * d + h * dh..][..dh];
                    let mut dot = 0.0;
                    for j in 0..sk {
                        if !mask.allowed(bi, i, j, sk) {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vd[(bi * sk + j) * d + h * dh..][..dh];
                        dp[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        dot += p[j] * dp[j];
                        let dvrow = &mut dv[(bi * sk + j) * d + h * dh..][..dh];
                        for (o, x) in dvrow.iter_mut().zip(grow) {
                            *o += p[j] * x;
                        }
                    }
                    let qrow = &qd[(bi * sq + i) * d + h * dh..][..dh];
                    for j in 0..sk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let krow = &kd[(bi * sk + j) * d + h * dh..][..dh];
                        let dqrow = &mut dq[(bi * sq + i) * d + h * dh..][..dh];
                        for (o, x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk[(bi * sk + j) * d + h * dh..][..dh];
                        for (o, x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accum(grads, q, Tensor::new(qv.shape().to_vec(), dq)?);
        self.accum(grads, k, Tensor::new(kv.shape().to_vec(), dk)?);
        self.accum(grads, v, Tensor::new(vv.shape().to_vec(), dv)?);
        Ok(())
    }
}
