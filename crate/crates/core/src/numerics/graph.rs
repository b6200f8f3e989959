//! Reverse-mode differentiation tape.
//!
//! Every node is a 2-D block `rows × cols` (scalars are `1 × 1`). Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for backpropagation.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, AttnShape};
use super::{ParamSet, Scalar, Tensor};
use crate::error::{bail_arg, Result};

pub type NodeId = usize;

enum Op<F> {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, F),
    Mask(NodeId, Vec<F>),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: Vec<(F, F)>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttnShape,
        probs: Vec<F>,
    },
    PrependRows {
        seq: NodeId,
        rows: NodeId,
        batch: usize,
        len: usize,
    },
    MeanPool {
        x: NodeId,
        mask: Vec<bool>,
        batch: usize,
        len: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: F,
        weights: Vec<F>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op<F>,
}

/// Per-parameter gradients produced by [`Graph::backward`], aligned with the
/// [`ParamSet`] index order. `None` means the parameter did not take part in
/// the computation.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub per_param: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(params: &ParamSet<F>) -> Self {
        Self { per_param: vec![None; params.len()] }
    }

    pub fn get(&self, idx: usize) -> Option<&[F]> {
        self.per_param.get(idx).and_then(|g| g.as_deref())
    }

    pub fn all_finite(&self) -> bool {
        self.per_param.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Graph<'p, F: Scalar> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<usize, NodeId>,
}

fn dims_of(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        match self.nodes[id].op {
            Op::Param(i) => self.params.by_index(i).data(),
            _ => &self.nodes[id].value,
        }
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<F> {
        let (r, c) = self.dims(id);
        Tensor::new(vec![r, c], self.value(id).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.value(id)[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<F>) -> Result<NodeId> {
        if rows * cols != value.len() {
            bail_arg!("constant {rows}x{cols} given {} values", value.len());
        }
        Ok(self.push(rows, cols, value, Op::Constant))
    }

    /// Copy of a node's value with no path back to its inputs.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let (r, c) = self.dims(id);
        let v = self.value(id).to_vec();
        self.push(r, c, v, Op::Constant)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self.params.require(name)?;
        if let Some(&id) = self.param_nodes.get(&idx) {
            return Ok(id);
        }
        let (rows, cols) = dims_of(self.params.by_index(idx).shape());
        self.nodes.push(Node { rows, cols, value: Vec::new(), op: Op::Param(idx) });
        let id = self.nodes.len() - 1;
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            bail_arg!("matmul inner dims differ: {m}x{k} · {k2}x{n}");
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n, false, false, false);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            bail_arg!("add shape mismatch {:?} vs {:?}", self.dims(a), self.dims(b));
        }
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            bail_arg!("bias shape {:?} does not broadcast over {r}x{c}", self.dims(bias));
        }
        let mut out = self.value(x).to_vec();
        kernels::add_bias(&mut out, self.value(bias));
        Ok(self.push(r, c, out, Op::AddBias(x, bias)))
    }

    /// `x · w + b` with `w` of shape `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let (r, c) = self.dims(x);
        self.push(r, c, out, Op::Scale(x, s))
    }

    /// Inverted dropout. Identity when `p == 0` or no rng is given.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: Option<&mut R>) -> NodeId {
        let Some(rng) = rng else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let (r, c) = self.dims(x);
        self.push(r, c, out, Op::Mask(x, mask))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let (r, c) = self.dims(x);
        self.push(r, c, out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: &str, bias: &str) -> Result<NodeId> {
        let gain = self.param(gain)?;
        let bias = self.param(bias)?;
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            bail_arg!("layer norm parameters do not match width {c}");
        }
        let mut out = vec![F::zero(); r * c];
        let stats = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), &mut out);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, c) = self.dims(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            bail_arg!("row index {bad} out of range for table with {rows} rows");
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        Ok(self.push(ids.len(), c, out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        key_valid: Option<&[bool]>,
        shape: AttnShape,
    ) -> Result<NodeId> {
        let d = shape.d_model;
        if shape.heads == 0 || d % shape.heads != 0 {
            bail_arg!("d_model {d} not divisible by {} heads", shape.heads);
        }
        if self.dims(q) != (shape.batch * shape.q_len, d)
            || self.dims(k) != (shape.batch * shape.k_len, d)
            || self.dims(v) != (shape.batch * shape.k_len, d)
        {
            bail_arg!("attention operand shapes do not match {shape:?}");
        }
        if shape.causal && shape.q_len != shape.k_len {
            bail_arg!("causal attention needs equal query and key lengths");
        }
        if key_valid.is_some_and(|m| m.len() != shape.batch * shape.k_len) {
            bail_arg!("key mask length mismatch");
        }
        let mut out = vec![F::zero(); shape.batch * shape.q_len * d];
        let probs = kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            key_valid,
            shape,
            &mut out,
        );
        Ok(self.push(shape.batch * shape.q_len, d, out, Op::Attention { q, k, v, shape, probs }))
    }

    /// Per batch element, places `rows[b]` in front of the `len` rows of `seq`.
    pub fn prepend_rows(&mut self, seq: NodeId, rows: NodeId, batch: usize) -> Result<NodeId> {
        let (sr, c) = self.dims(seq);
        if self.dims(rows) != (batch, c) || sr % batch != 0 {
            bail_arg!("prepend_rows shape mismatch");
        }
        let len = sr / batch;
        let mut out = Vec::with_capacity((sr + batch) * c);
        let sv = self.value(seq);
        let rv = self.value(rows);
        for b in 0..batch {
            out.extend_from_slice(&rv[b * c..(b + 1) * c]);
            out.extend_from_slice(&sv[b * len * c..(b + 1) * len * c]);
        }
        Ok(self.push(batch * (len + 1), c, out, Op::PrependRows { seq, rows, batch, len }))
    }

    /// Mean over the rows flagged in `mask`, per batch element.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[bool], batch: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if mask.len() != r || r % batch != 0 {
            bail_arg!("masked_mean shape mismatch");
        }
        let len = r / batch;
        let xv = self.value(x);
        let mut out = vec![F::zero(); batch * c];
        for b in 0..batch {
            let count = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let inv = F::one() / F::of(count as f64);
            for i in 0..len {
                if mask[b * len + i] {
                    for j in 0..c {
                        out[b * c + j] += xv[(b * len + i) * c + j] * inv;
                    }
                }
            }
        }
        Ok(self.push(batch, c, out, Op::MeanPool { x, mask: mask.to_vec(), batch, len }))
    }

    /// Weighted mean label-smoothed cross-entropy over rows of `logits`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: F,
        weights: &[F],
    ) -> Result<NodeId> {
        let (n, v) = self.dims(logits);
        if targets.len() != n || weights.len() != n {
            bail_arg!("cross_entropy expects {n} targets and weights");
        }
        if let Some(t) = targets.iter().find(|&&t| t >= v) {
            bail_arg!("target id {t} out of range for {v} classes");
        }
        let total_w: F = weights.iter().copied().sum();
        if total_w <= F::zero() {
            bail_arg!("cross_entropy weight mask selects no positions");
        }
        let mut probs = self.value(logits).to_vec();
        let lv = self.value(logits);
        let off = smoothing / F::of(v as f64);
        let on = F::one() - smoothing;
        let mut loss = F::zero();
        for i in 0..n {
            let row = &lv[i * v..(i + 1) * v];
            kernels::softmax_in_place(&mut probs[i * v..(i + 1) * v]);
            if weights[i] == F::zero() {
                continue;
            }
            let lse = kernels::log_sum_exp(row);
            let mut row_loss = on * (lse - row[targets[i]]);
            if smoothing != F::zero() {
                let sum_logp: F = row.iter().map(|&z| z - lse).sum();
                row_loss -= off * sum_logp;
            }
            loss += weights[i] * row_loss;
        }
        loss /= total_w;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![F::one(); self.value(loss).len()]);
        let mut out = Gradients::zeros_like(self.params);

        fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut Vec<F> {
            grads[id].get_or_insert_with(|| vec![F::zero(); len])
        }

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out.per_param[*p] = Some(g),
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = node.cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    kernels::matmul(&g, bv, acc(&mut grads, *a, m * k), m, n, k, false, true, true);
                    kernels::matmul(av, &g, acc(&mut grads, *b, k * n), k, m, n, true, false, true);
                }
                Op::Add(a, b) => {
                    for t in [*a, *b] {
                        acc(&mut grads, t, g.len()).iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    }
                }
                Op::AddBias(x, b) => {
                    acc(&mut grads, *x, g.len()).iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    let gb = acc(&mut grads, *b, node.cols);
                    for row in g.chunks_exact(node.cols) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, *x, g.len()).iter_mut().zip(&g).for_each(|(d, &v)| *d += v * *s);
                }
                Op::Mask(x, mask) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((d, &v), &m) in gx.iter_mut().zip(&g).zip(mask) {
                        *d += v * m;
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, g.len());
                    for ((d, &v), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *d += v * kernels::gelu_grad(xi);
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let c = node.cols;
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let inv_c = F::one() / F::of(c as f64);
                    let mut dgain = vec![F::zero(); c];
                    let mut dbias = vec![F::zero(); c];
                    let mut dx = vec![F::zero(); xv.len()];
                    let mut xhat = vec![F::zero(); c];
                    let mut dxhat = vec![F::zero(); c];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &xv[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            xhat[j] = (xr[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gv[j];
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[j];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        for j in 0..c {
                            dx[r * c + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    for (t, d) in [(*x, dx), (*gain, dgain), (*bias, dbias)] {
                        let n = d.len();
                        acc(&mut grads, t, n).iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
                    }
                }
                Op::Gather { table, ids } => {
                    let c = node.cols;
                    let (tr, _) = self.dims(*table);
                    let gt = acc(&mut grads, *table, tr * c);
                    for (row, &i) in g.chunks_exact(c).zip(ids) {
                        gt[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (qn, kn) = (self.value(*q).len(), self.value(*k).len());
                    let mut dq = vec![F::zero(); qn];
                    let mut dk = vec![F::zero(); kn];
                    let mut dv = vec![F::zero(); kn];
                    kernels::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                        *shape,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    for (t, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        let n = d.len();
                        acc(&mut grads, t, n).iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
                    }
                }
                Op::PrependRows { seq, rows, batch, len } => {
                    let c = node.cols;
                    {
                        let gs = acc(&mut grads, *seq, batch * len * c);
                        for b in 0..*batch {
                            let src = &g[(b * (len + 1) + 1) * c..(b + 1) * (len + 1) * c];
                            gs[b * len * c..(b + 1) * len * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &s)| *a += s);
                        }
                    }
                    let gr = acc(&mut grads, *rows, batch * c);
                    for b in 0..*batch {
                        let src = &g[b * (len + 1) * c..(b * (len + 1) + 1) * c];
                        gr[b * c..(b + 1) * c].iter_mut().zip(src).for_each(|(a, &s)| *a += s);
                    }
                }
                Op::MeanPool { x, mask, batch, len } => {
                    let c = node.cols;
                    let gx = acc(&mut grads, *x, batch * len * c);
                    for b in 0..*batch {
                        let count = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
                        if count == 0 {
                            continue;
                        }
                        let inv = F::one() / F::of(count as f64);
                        for i in 0..*len {
                            if mask[b * len + i] {
                                for j in 0..c {
                                    gx[(b * len + i) * c + j] += g[b * c + j] * inv;
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, smoothing, weights, probs } => {
                    let v = self.nodes[*logits].cols;
                    let total_w: F = weights.iter().copied().sum();
                    let off = *smoothing / F::of(v as f64);
                    let on = F::one() - *smoothing;
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (i, &t) in targets.iter().enumerate() {
                        if weights[i] == F::zero() {
                            continue;
                        }
                        let s = g[0] * weights[i] / total_w;
                        for k in 0..v {
                            let target = if k == t { on + off } else { off };
                            gl[i * v + k] += s * (probs[i * v + k] - target);
                        }
                    }
                }
            }
        }
        out
    }
}
