//! Reverse-mode autodiff over coarse transformer primitives.
//!
//! The tape records one node per primitive application, saving whatever the
//! backward pass needs (attention weights, normalization statistics,
//! softmax probabilities). Backward walks the nodes in exact reverse order
//! of recording and accumulates gradients additively, dropping interior
//! gradients as soon as they have been consumed.

use super::scalar::{axpy, dot, Real};
use super::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("head dimension {0} is odd; rotary pairs need an even head dim")]
    OddHeadDim(usize),
    #[error("target {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: u32, vocab: usize },
    #[error("token {token} out of range for table of {vocab} rows")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("backward root must be a scalar, got shape {0}")]
    NonScalarRoot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Embed { table: NodeId, tokens: Vec<u32> },
    Linear { x: NodeId, w: NodeId, bias: Option<NodeId> },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId, mean: Vec<T>, rstd: Vec<T> },
    Rope { x: NodeId, base: T },
    SplitHeads { x: NodeId },
    MergeHeads { x: NodeId },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, probs: Tensor<T> },
    Add { a: NodeId, b: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, probs: Tensor<T> },
    WeightedSum { x: NodeId, weights: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`]. Only nodes that needed
/// a gradient (parameters and anything between them and the root) are
/// populated; interior entries are freed during the walk, so after backward
/// only leaves remain.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.by_node[id.0].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node[id.0].as_ref()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable input; backward materializes its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Row lookup: `out[r, :] = table[tokens[r], :]`, reshaped to
    /// `batch_shape x d`.
    pub fn embed(
        &mut self,
        table: NodeId,
        tokens: &[u32],
        batch_shape: (usize, usize),
    ) -> Result<NodeId, NnError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(NnError::ShapeMismatch(format!(
                "embedding table must be 2-d, got {:?}",
                t.shape()
            )));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let (b, s) = batch_shape;
        if tokens.len() != b * s {
            return Err(NnError::ShapeMismatch(format!(
                "{} tokens do not fill batch {b}x{s}",
                tokens.len()
            )));
        }
        let mut out = vec![T::zero(); tokens.len() * dim];
        for (r, &tok) in tokens.iter().enumerate() {
            if tok as usize >= vocab {
                return Err(NnError::TokenOutOfRange { token: tok, vocab });
            }
            let row = &t.data()[tok as usize * dim..(tok as usize + 1) * dim];
            out[r * dim..(r + 1) * dim].copy_from_slice(row);
        }
        let needs = self.needs(table);
        let value = Tensor::from_vec(&[b, s, dim], out);
        Ok(self.push(Op::Embed { table, tokens: tokens.to_vec() }, value, needs))
    }

    /// Affine map on the last axis: `[.., n] x [n, m] (+ [m]) -> [.., m]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, NnError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 {
            return Err(NnError::ShapeMismatch(format!(
                "weight must be 2-d, got {:?}",
                wv.shape()
            )));
        }
        let (n, m) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != n {
            return Err(NnError::ShapeMismatch(format!(
                "input last dim {} vs weight rows {n}",
                xv.last_dim()
            )));
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(NnError::ShapeMismatch(format!(
                    "bias shape {:?} vs output dim {m}",
                    bv.shape()
                )));
            }
        }
        let rows = xv.leading();
        let mut out = vec![T::zero(); rows * m];
        {
            let xd = xv.data();
            let wd = wv.data();
            for r in 0..rows {
                let x_row = &xd[r * n..(r + 1) * n];
                let out_row = &mut out[r * m..(r + 1) * m];
                for (kk, &xk) in x_row.iter().enumerate() {
                    axpy(out_row, xk, &wd[kk * m..(kk + 1) * m]);
                }
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for row in out.chunks_exact_mut(m) {
                for (o, &bv) in row.iter_mut().zip(&bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(Op::Linear { x, w, bias }, Tensor::from_vec(&shape, out), needs))
    }

    /// Exact GELU `x * Phi(x)` with the Gaussian CDF (no tanh approximation).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::from_f64(0.5);
        let data = xv
            .data()
            .iter()
            .map(|&v| v * half * (T::one() + Real::erf(v * inv_sqrt2)))
            .collect();
        let value = Tensor::from_vec(xv.shape(), data);
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, value, needs)
    }

    /// Standardize the last axis, then scale and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: T,
    ) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if n == 0 {
            return Err(NnError::ShapeMismatch("layer_norm input must not be scalar".into()));
        }
        for (name, id) in [("gain", gain), ("shift", shift)] {
            let v = self.value(id);
            if v.shape() != [n] {
                return Err(NnError::ShapeMismatch(format!(
                    "{name} shape {:?} vs last dim {n}",
                    v.shape()
                )));
            }
        }
        let rows = xv.leading();
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        {
            let xd = xv.data();
            let gd = self.value(gain).data();
            let sd = self.value(shift).data();
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mut mu = T::zero();
                for &v in row {
                    mu += v;
                }
                mu = mu * inv_n;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mu;
                    var += d * d;
                }
                var = var * inv_n;
                let r_inv = (var + eps).sqrt().recip();
                mean[r] = mu;
                rstd[r] = r_inv;
                let out_row = &mut out[r * n..(r + 1) * n];
                for j in 0..n {
                    out_row[j] = (row[j] - mu) * r_inv * gd[j] + sd[j];
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), out);
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(Op::LayerNorm { x, gain, shift, mean, rstd }, value, needs))
    }

    /// Rotary position map on `[B, H, T, h]`: at position `t`, the pair
    /// `(2i, 2i+1)` rotates by `t * base^(-2i/h)`. Position 0 is untouched.
    pub fn rope(&mut self, x: NodeId, base: T) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "rope expects [B, H, T, h], got {:?}",
                xv.shape()
            )));
        }
        let head_dim = xv.shape()[3];
        if head_dim % 2 != 0 {
            return Err(NnError::OddHeadDim(head_dim));
        }
        let mut out = xv.data().to_vec();
        rotate_in_place(&mut out, xv.shape(), base, false);
        let value = Tensor::from_vec(xv.shape(), out);
        let needs = self.needs(x);
        Ok(self.push(Op::Rope { x, base }, value, needs))
    }

    /// `[B, T, d] -> [B, H, T, d/H]`.
    pub fn split_heads(&mut self, x: NodeId, n_heads: usize) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(NnError::ShapeMismatch(format!(
                "split_heads expects [B, T, d], got {:?}",
                xv.shape()
            )));
        }
        let d = xv.shape()[2];
        if n_heads == 0 || d % n_heads != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "model dim {d} not divisible into {n_heads} heads"
            )));
        }
        let value = split_heads_raw(xv, n_heads);
        let needs = self.needs(x);
        Ok(self.push(Op::SplitHeads { x }, value, needs))
    }

    /// `[B, H, T, h] -> [B, T, H*h]`, inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "merge_heads expects [B, H, T, h], got {:?}",
                xv.shape()
            )));
        }
        let value = merge_heads_raw(xv);
        let needs = self.needs(x);
        Ok(self.push(Op::MergeHeads { x }, value, needs))
    }

    /// `softmax(q k^T / sqrt(h) + causal mask) v` on `[B, H, T, h]`.
    /// Position `i` attends to positions `j <= i` only.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> Result<NodeId, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape().len() != 4 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "attention expects matching [B, H, T, h], got q {:?} k {:?} v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (b, h, t, hd) =
            (qv.shape()[0], qv.shape()[1], qv.shape()[2], qv.shape()[3]);
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut probs = vec![T::zero(); b * h * t * t];
        let mut out = vec![T::zero(); qv.numel()];
        {
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            for bh in 0..b * h {
                let plane = bh * t * hd;
                let q_plane = &qd[plane..plane + t * hd];
                let k_plane = &kd[plane..plane + t * hd];
                let v_plane = &vd[plane..plane + t * hd];
                let p_plane = &mut probs[bh * t * t..(bh + 1) * t * t];
                let out_plane = &mut out[plane..plane + t * hd];
                for i in 0..t {
                    let q_row = &q_plane[i * hd..(i + 1) * hd];
                    let scores = &mut p_plane[i * t..i * t + i + 1];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = dot(q_row, &k_plane[j * hd..(j + 1) * hd]) * scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                    let mut denom = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let inv = denom.recip();
                    let out_row = &mut out_plane[i * hd..(i + 1) * hd];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = *s * inv;
                        axpy(out_row, *s, &v_plane[j * hd..(j + 1) * hd]);
                    }
                }
            }
        }
        let probs = Tensor::from_vec(&[b, h, t, t], probs);
        let value = Tensor::from_vec(qv.shape(), out);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Op::CausalAttention { q, k, v, probs }, value, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "add shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(av.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, needs))
    }

    /// Mean next-token negative log-likelihood over all rows of
    /// `[.., V]` logits, stabilized with log-sum-exp.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
    ) -> Result<NodeId, NnError> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.leading();
        if targets.len() != rows {
            return Err(NnError::ShapeMismatch(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let inv_rows = T::from_f64(1.0 / rows as f64);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut loss = T::zero();
        {
            let ld = lv.data();
            for (r, &target) in targets.iter().enumerate() {
                if target as usize >= vocab {
                    return Err(NnError::TargetOutOfRange { target, vocab });
                }
                let row = &ld[r * vocab..(r + 1) * vocab];
                let mut max = T::neg_infinity();
                for &z in row {
                    if z > max {
                        max = z;
                    }
                }
                let p_row = &mut probs[r * vocab..(r + 1) * vocab];
                let mut denom = T::zero();
                for (p, &z) in p_row.iter_mut().zip(row) {
                    *p = (z - max).exp();
                    denom += *p;
                }
                let inv = denom.recip();
                for p in p_row.iter_mut() {
                    *p = *p * inv;
                }
                loss += denom.ln() + max - row[target as usize];
            }
        }
        loss = loss * inv_rows;
        let probs = Tensor::from_vec(&[rows, vocab], probs);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Scalar projection `sum(x * weights)`; the standard way to reduce a
    /// non-scalar output to a checkable scalar in gradient tests.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "weighted_sum shapes {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s = dot(xv.data(), weights.data());
        let needs = self.needs(x);
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s), needs))
    }

    /// Reverse pass from a scalar root. Returns the gradients of every leaf
    /// that was marked trainable (and nothing else; interior gradients are
    /// dropped once consumed).
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, NnError> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(NnError::NonScalarRoot(format!("{:?}", root_value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.dispatch_backward(id, &g, &mut grads);
        }
        Ok(Gradients { by_node: grads })
    }

    fn dispatch_backward(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are never dispatched"),
            Op::Embed { table, tokens } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let dim = tv.shape()[1];
                    let dt = grad_slot(grads, *table, tv.shape());
                    for (r, &tok) in tokens.iter().enumerate() {
                        let src = &g.data()[r * dim..(r + 1) * dim];
                        let dst =
                            &mut dt.data_mut()[tok as usize * dim..(tok as usize + 1) * dim];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Linear { x, w, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, m) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.leading();
                let gd = g.data();
                if self.needs(*x) {
                    let wd = wv.data();
                    let dx = grad_slot(grads, *x, xv.shape());
                    for r in 0..rows {
                        let g_row = &gd[r * m..(r + 1) * m];
                        let dx_row = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for (kk, slot) in dx_row.iter_mut().enumerate() {
                            *slot += dot(g_row, &wd[kk * m..(kk + 1) * m]);
                        }
                    }
                }
                if self.needs(*w) {
                    let xd = xv.data();
                    let dw = grad_slot(grads, *w, wv.shape());
                    for r in 0..rows {
                        let g_row = &gd[r * m..(r + 1) * m];
                        let x_row = &xd[r * n..(r + 1) * n];
                        for (kk, &xk) in x_row.iter().enumerate() {
                            axpy(&mut dw.data_mut()[kk * m..(kk + 1) * m], xk, g_row);
                        }
                    }
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let db = grad_slot(grads, *b, &[m]);
                        for g_row in gd.chunks_exact(m) {
                            for (slot, &gv) in db.data_mut().iter_mut().zip(g_row) {
                                *slot += gv;
                            }
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_tau = T::from_f64(1.0 / (std::f64::consts::TAU).sqrt());
                    let half = T::from_f64(0.5);
                    let dx = grad_slot(grads, *x, xv.shape());
                    for ((slot, &v), &gv) in
                        dx.data_mut().iter_mut().zip(xv.data()).zip(g.data())
                    {
                        let cdf = half * (T::one() + Real::erf(v * inv_sqrt2));
                        let pdf = inv_sqrt_tau * (-half * v * v).exp();
                        *slot += gv * (cdf + v * pdf);
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, mean, rstd } => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let rows = xv.leading();
                let inv_n = T::one() / T::from_f64(n as f64);
                let gd = g.data();
                let gainv = self.value(*gain).data();
                if self.needs(*shift) {
                    let ds = grad_slot(grads, *shift, &[n]);
                    for g_row in gd.chunks_exact(n) {
                        for (slot, &gv) in ds.data_mut().iter_mut().zip(g_row) {
                            *slot += gv;
                        }
                    }
                }
                if self.needs(*gain) {
                    let dg = grad_slot(grads, *gain, &[n]);
                    let xd = xv.data();
                    for r in 0..rows {
                        let row = &xd[r * n..(r + 1) * n];
                        let g_row = &gd[r * n..(r + 1) * n];
                        for j in 0..n {
                            dg.data_mut()[j] += g_row[j] * (row[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if self.needs(*x) {
                    let dx = grad_slot(grads, *x, xv.shape());
                    let xd = xv.data();
                    for r in 0..rows {
                        let row = &xd[r * n..(r + 1) * n];
                        let g_row = &gd[r * n..(r + 1) * n];
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..n {
                            let xhat = (row[j] - mean[r]) * rstd[r];
                            let dxhat = g_row[j] * gainv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dx_row = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            let xhat = (row[j] - mean[r]) * rstd[r];
                            let dxhat = g_row[j] * gainv[j];
                            dx_row[j] += rstd[r]
                                * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Rope { x, base } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut dg = g.data().to_vec();
                    rotate_in_place(&mut dg, xv.shape(), *base, true);
                    accumulate(grads, *x, xv.shape(), &dg);
                }
            }
            Op::SplitHeads { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let dx = merge_heads_raw(g);
                    accumulate(grads, *x, xv.shape(), dx.data());
                }
            }
            Op::MergeHeads { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let n_heads = xv.shape()[1];
                    let dx = split_heads_raw(g, n_heads);
                    accumulate(grads, *x, xv.shape(), dx.data());
                }
            }
            Op::CausalAttention { q, k, v, probs } => {
                self.attention_backward(*q, *k, *v, probs, g, grads);
            }
            Op::Add { a, b } => {
                for input in [*a, *b] {
                    if self.needs(input) {
                        let shape = self.value(input).shape().to_vec();
                        accumulate(grads, input, &shape, g.data());
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let vocab = lv.last_dim();
                    let rows = lv.leading();
                    let scale = g.item() * T::from_f64(1.0 / rows as f64);
                    let dl = grad_slot(grads, *logits, lv.shape());
                    let pd = probs.data();
                    for (r, &target) in targets.iter().enumerate() {
                        let p_row = &pd[r * vocab..(r + 1) * vocab];
                        let d_row = &mut dl.data_mut()[r * vocab..(r + 1) * vocab];
                        for (slot, &p) in d_row.iter_mut().zip(p_row) {
                            *slot += scale * p;
                        }
                        d_row[target as usize] -= scale;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gs = g.item();
                    let dx = grad_slot(grads, *x, &shape);
                    for (slot, &wv) in dx.data_mut().iter_mut().zip(weights.data()) {
                        *slot += gs * wv;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let qv = self.value(q);
        let (b, h, t, hd) =
            (qv.shape()[0], qv.shape()[1], qv.shape()[2], qv.shape()[3]);
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let shape = qv.shape().to_vec();
        let mut dq = vec![T::zero(); qv.numel()];
        let mut dk = vec![T::zero(); qv.numel()];
        let mut dv = vec![T::zero(); qv.numel()];
        let (qd, kd, vd) = (qv.data(), self.value(k).data(), self.value(v).data());
        let (pd, gd) = (probs.data(), g.data());
        let mut dscores = vec![T::zero(); t];
        for bh in 0..b * h {
            let plane = bh * t * hd;
            let q_plane = &qd[plane..plane + t * hd];
            let k_plane = &kd[plane..plane + t * hd];
            let v_plane = &vd[plane..plane + t * hd];
            let g_plane = &gd[plane..plane + t * hd];
            let p_plane = &pd[bh * t * t..(bh + 1) * t * t];
            let dq_plane = &mut dq[plane..plane + t * hd];
            let dk_plane = &mut dk[plane..plane + t * hd];
            let dv_plane = &mut dv[plane..plane + t * hd];
            for i in 0..t {
                let g_row = &g_plane[i * hd..(i + 1) * hd];
                let q_row = &q_plane[i * hd..(i + 1) * hd];
                let p_row = &p_plane[i * t..i * t + i + 1];
                // dp and the softmax Jacobian, fused over the causal row.
                let mut p_dot_dp = T::zero();
                for (j, &p) in p_row.iter().enumerate() {
                    let dp = dot(g_row, &v_plane[j * hd..(j + 1) * hd]);
                    dscores[j] = dp;
                    p_dot_dp += p * dp;
                }
                let dq_row = &mut dq_plane[i * hd..(i + 1) * hd];
                for (j, &p) in p_row.iter().enumerate() {
                    axpy(&mut dv_plane[j * hd..(j + 1) * hd], p, g_row);
                    let ds = p * (dscores[j] - p_dot_dp) * scale;
                    axpy(dq_row, ds, &k_plane[j * hd..(j + 1) * hd]);
                    axpy(&mut dk_plane[j * hd..(j + 1) * hd], ds, q_row);
                }
            }
        }
        accumulate(grads, q, &shape, &dq);
        accumulate(grads, k, &shape, &dk);
        accumulate(grads, v, &shape, &dv);
    }
}

/// Gets (allocating zeros on first touch) the gradient tensor for a node.
fn grad_slot<'g, T: Real>(
    grads: &'g mut [Option<Tensor<T>>],
    id: NodeId,
    shape: &[usize],
) -> &'g mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, shape: &[usize], add: &[T]) {
    let slot = grad_slot(grads, id, shape);
    for (o, &a) in slot.data_mut().iter_mut().zip(add) {
        *o += a;
    }
}

/// Applies the per-position pair rotations in place; `inverse` negates the
/// angles (the backward map).
fn rotate_in_place<T: Real>(data: &mut [T], shape: &[usize], base: T, inverse: bool) {
    let (b, h, t, hd) = (shape[0], shape[1], shape[2], shape[3]);
    let half = hd / 2;
    // Angle table: theta[t][i] = t * base^(-2i/hd)
    let mut freqs = Vec::with_capacity(half);
    for i in 0..half {
        let exponent = T::from_f64(-2.0 * i as f64 / hd as f64);
        freqs.push(base.powf(exponent));
    }
    for bh in 0..b * h {
        for pos in 0..t {
            let row = &mut data[(bh * t + pos) * hd..(bh * t + pos + 1) * hd];
            let pos_t = T::from_f64(pos as f64);
            for (i, &freq) in freqs.iter().enumerate() {
                let mut angle = pos_t * freq;
                if inverse {
                    angle = -angle;
                }
                let (sin, cos) = (angle.sin(), angle.cos());
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = x0 * cos - x1 * sin;
                row[2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn split_heads_raw<T: Real>(x: &Tensor<T>, n_heads: usize) -> Tensor<T> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hd = d / n_heads;
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for bi in 0..b {
        for ti in 0..t {
            let src = &xd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            for hi in 0..n_heads {
                let dst_base = ((bi * n_heads + hi) * t + ti) * hd;
                out[dst_base..dst_base + hd].copy_from_slice(&src[hi * hd..(hi + 1) * hd]);
            }
        }
    }
    Tensor::from_vec(&[b, n_heads, t, hd], out)
}

fn merge_heads_raw<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, h, t, hd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = h * hd;
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for bi in 0..b {
        for hi in 0..h {
            for ti in 0..t {
                let src_base = ((bi * h + hi) * t + ti) * hd;
                let dst_base = (bi * t + ti) * d + hi * hd;
                out[dst_base..dst_base + hd]
                    .copy_from_slice(&xd[src_base..src_base + hd]);
            }
        }
    }
    Tensor::from_vec(&[b, t, d], out)
}
