//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes that do not
//! depend on any `requires_grad` leaf are skipped during the backward sweep,
//! so frozen sub-networks cost one forward pass only.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Layout of a grouped multi-head attention call.
///
/// Rows of the query matrix are split into `groups` consecutive blocks of
/// `q_len` rows; block `g` attends only to block `g` of the key/value rows
/// (blocks of `k_len`). `key_mask[g * k_len + j] == false` hides key `j` of
/// group `g`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddTiled(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normed: Matrix<T>,
        inv_std: Vec<T>,
    },
    LogSoftmaxRows(NodeId),
    Transpose(NodeId),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<T>,
    },
    SelectRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    MeanGroups(NodeId, usize),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
    DiagMean(NodeId),
    SumAll(NodeId),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; with `b` a weight stored as (out × in) this is a linear map.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds `b` (r × c) to every consecutive block of r rows of `a`.
    pub fn add_tiled(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "add_tiled cols");
        assert!(bv.rows() > 0 && av.rows() % bv.rows() == 0, "add_tiled rows");
        let mut v = av.clone();
        let r = bv.rows();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(bv.row(i % r)) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(v, Op::AddTiled(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Matrix::from_vec(av.rows(), av.cols(), data).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::ScaleBy(a, s), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with learned 1×c `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols), "layer_norm gamma");
        assert_eq!(b.shape(), (1, cols), "layer_norm beta");
        let n = T::lit(cols as f64);
        let eps = T::lit(eps);
        let mut normed = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                normed.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        )
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = av.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Divides every row by its L2 norm; a zero row is a numeric error.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mut v = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::numeric_at("cannot normalise zero or non-finite row", r));
            }
            norms.push(n);
            for e in v.row_mut(r) {
                *e /= n;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Gathers rows of `a` by index; repeated indices are allowed.
    pub fn select_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            data.extend_from_slice(av.row(i));
        }
        let v = Matrix::from_vec(indices.len(), cols, data).expect("shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::SelectRows(a, indices), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows cols");
            rows += pv.rows();
            data.extend_from_slice(pv.as_slice());
        }
        let v = Matrix::from_vec(rows, cols, data).expect("shape");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean over each consecutive block of `group` rows.
    pub fn mean_groups(&mut self, a: NodeId, group: usize) -> NodeId {
        let av = self.value(a);
        assert!(group > 0 && av.rows() % group == 0, "mean_groups rows");
        let n = av.rows() / group;
        let inv = T::one() / T::lit(group as f64);
        let mut v = Matrix::zeros(n, av.cols());
        for r in 0..av.rows() {
            let g = r / group;
            for (o, &x) in v.row_mut(g).iter_mut().zip(av.row(r)) {
                *o += x * inv;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanGroups(a, group), rg)
    }

    /// Scaled dot-product attention, grouped and multi-headed.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            groups,
            q_len,
            k_len,
            heads,
            ..
        } = layout;
        if qv.rows() != groups * q_len || kv.rows() != groups * k_len || vv.rows() != kv.rows() {
            return Err(Error::shape(
                format!("{groups} groups of {q_len} queries / {k_len} keys"),
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let width = qv.cols();
        if kv.cols() != width || vv.cols() != width || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible into {heads} heads"
            )));
        }
        if let Some(mask) = &layout.key_mask {
            if mask.len() != groups * k_len {
                return Err(Error::shape(groups * k_len, mask.len()));
            }
            for g in 0..groups {
                if !mask[g * k_len..(g + 1) * k_len].iter().any(|&m| m) {
                    return Err(Error::Input(format!("attention group {g} has no visible key")));
                }
            }
        }
        let dh = width / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), width);
        let mut probs = vec![T::zero(); groups * heads * q_len * k_len];
        let mut scores = vec![T::zero(); k_len];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..q_len {
                    let qr = &qv.row(g * q_len + i)[c0..c0 + dh];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let visible = layout
                            .key_mask
                            .as_ref()
                            .is_none_or(|m| m[g * k_len + j]);
                        *s = if visible {
                            let kr = &kv.row(g * k_len + j)[c0..c0 + dh];
                            dot(qr, kr) * scale
                        } else {
                            T::neg_infinity()
                        };
                        max = max.max(*s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let base = ((g * heads + h) * q_len + i) * k_len;
                    let orow = &mut out.row_mut(g * q_len + i)[c0..c0 + dh];
                    for (j, &s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[base + j] = p;
                        if p == T::zero() {
                            continue;
                        }
                        let vr = &vv.row(g * k_len + j)[c0..c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vr) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Mean of the diagonal of a square matrix, as a 1×1 node.
    pub fn diag_mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows(), av.cols(), "diag_mean needs a square matrix");
        let n = av.rows();
        let s = (0..n).map(|i| av.get(i, i)).sum::<T>() / T::lit(n as f64);
        let rg = self.rg(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::DiagMean(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).as_slice().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a), rg)
    }

    /// Back-propagates from the 1×1 node `output`.
    pub fn backward(&self, output: NodeId) -> Gradients<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, dy.matmul_nt(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, self.value(a).matmul_tn(dy));
                }
            }
            &Op::MatMulNt(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, dy.matmul(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, dy.matmul_tn(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            &Op::AddTiled(a, b) => {
                self.accumulate(grads, a, dy.clone());
                if self.wants(b) {
                    let bv = self.value(b);
                    let r = bv.rows();
                    let mut gb = Matrix::zeros(r, bv.cols());
                    for i in 0..dy.rows() {
                        for (o, &x) in gb.row_mut(i % r).iter_mut().zip(dy.row(i)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let g = elementwise(dy, self.value(b), |d, y| d * y);
                    self.accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let g = elementwise(dy, self.value(a), |d, x| d * x);
                    self.accumulate(grads, b, g);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, dy.scale(s)),
            &Op::ScaleBy(a, s) => {
                let sv = self.scalar(s);
                if self.wants(a) {
                    self.accumulate(grads, a, dy.scale(sv));
                }
                if self.wants(s) {
                    let g = dot(dy.as_slice(), self.value(a).as_slice());
                    self.accumulate(grads, s, Matrix::filled(1, 1, g));
                }
            }
            &Op::Exp(a) => {
                let g = elementwise(dy, &node.value, |d, y| d * y);
                self.accumulate(grads, a, g);
            }
            &Op::Gelu(a) => {
                let g = elementwise(dy, self.value(a), |d, x| d * gelu_grad(x));
                self.accumulate(grads, a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let (rows, cols) = dy.shape();
                let gv = self.value(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gb = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let d = dy.get(r, c);
                            gg.as_mut_slice()[c] += d * normed.get(r, c);
                            gb.as_mut_slice()[c] += d;
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let n = T::lit(cols as f64);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..cols {
                            let dh = dy.get(r, c) * gv.get(0, c);
                            mean_dh += dh;
                            mean_dh_h += dh * normed.get(r, c);
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for c in 0..cols {
                            let dh = dy.get(r, c) * gv.get(0, c);
                            let h = normed.get(r, c);
                            gx.set(r, c, inv_std[r] * (dh - mean_dh - h * mean_dh_h));
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            &Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut g = dy.clone();
                for r in 0..g.rows() {
                    let s: T = dy.row(r).iter().copied().sum();
                    for (o, &lp) in g.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= lp.exp() * s;
                    }
                }
                self.accumulate(grads, a, g);
            }
            &Op::Transpose(a) => self.accumulate(grads, a, dy.transpose()),
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut g = dy.clone();
                for r in 0..g.rows() {
                    let proj = dot(y.row(r), dy.row(r));
                    for (o, &yy) in g.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = (*o - yy * proj) / norms[r];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::SelectRows(a, indices) => {
                let av = self.value(*a);
                let mut g = Matrix::zeros(av.rows(), av.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &x) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.wants(p) {
                        let slice = dy.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec(rows, cols, slice).expect("shape"));
                    }
                    offset += rows;
                }
            }
            &Op::MeanGroups(a, group) => {
                let av = self.value(a);
                let inv = T::one() / T::lit(group as f64);
                let mut g = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (o, &x) in g.row_mut(r).iter_mut().zip(dy.row(r / group)) {
                        *o = x * inv;
                    }
                }
                self.accumulate(grads, a, g);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, dy, grads),
            &Op::DiagMean(a) => {
                let n = self.value(a).rows();
                let d = dy.get(0, 0) / T::lit(n as f64);
                let mut g = Matrix::zeros(n, n);
                for i in 0..n {
                    g.set(i, i, d);
                }
                self.accumulate(grads, a, g);
            }
            &Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, Matrix::filled(r, c, dy.get(0, 0)));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &AttentionLayout,
        probs: &[T],
        dy: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let AttentionLayout {
            groups,
            q_len,
            k_len,
            heads,
            ..
        } = *layout;
        let dh = width / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut gq = Matrix::zeros(qv.rows(), width);
        let mut gk = Matrix::zeros(kv.rows(), width);
        let mut gv = Matrix::zeros(vv.rows(), width);
        let mut dp = vec![T::zero(); k_len];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..q_len {
                    let qi = g * q_len + i;
                    let base = ((g * heads + h) * q_len + i) * k_len;
                    let p = &probs[base..base + k_len];
                    let dyr = &dy.row(qi)[c0..c0 + dh];
                    let mut weighted = T::zero();
                    for j in 0..k_len {
                        let kj = g * k_len + j;
                        dp[j] = dot(dyr, &vv.row(kj)[c0..c0 + dh]);
                        weighted += dp[j] * p[j];
                        if p[j] != T::zero() {
                            for (o, &d) in gv.row_mut(kj)[c0..c0 + dh].iter_mut().zip(dyr) {
                                *o += p[j] * d;
                            }
                        }
                    }
                    for j in 0..k_len {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let kj = g * k_len + j;
                        let krow = &kv.row(kj)[c0..c0 + dh];
                        for (o, &x) in gq.row_mut(qi)[c0..c0 + dh].iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let qrow = &qv.row(qi)[c0..c0 + dh];
                        for (o, &x) in gk.row_mut(kj)[c0..c0 + dh].iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

fn elementwise<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reduces the op output to a scalar with fixed random weights, then
    /// compares analytic gradients against central differences.
    fn check(inputs: Vec<Matrix<f64>>, build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |vals: &[Matrix<f64>], weights: Option<&Matrix<f64>>| {
            let mut g = Graph::new();
            let ids: Vec<_> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
            let out = build(&mut g, &ids);
            let w = weights
                .cloned()
                .unwrap_or_else(|| Matrix::filled(g.value(out).rows(), g.value(out).cols(), 1.0));
            let wid = g.constant(w);
            let prod = g.mul(out, wid);
            let loss = g.sum_all(prod);
            (g, ids, loss)
        };
        let (g0, _, out0) = {
            let mut g = Graph::new();
            let ids: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
            let out = build(&mut g, &ids);
            (g, ids, out)
        };
        let (r, c) = g0.value(out0).shape();
        let weights = Matrix::normal(r, c, 1.0, &mut rng);

        let (g, ids, loss) = eval(&inputs, Some(&weights));
        let grads = g.backward(loss);
        let h = 1e-6;
        for (n, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).cloned().unwrap_or_else(|| {
                Matrix::zeros(inputs[n].rows(), inputs[n].cols())
            });
            for e in 0..inputs[n].len() {
                let mut plus = inputs.clone();
                plus[n].as_mut_slice()[e] += h;
                let mut minus = inputs.clone();
                minus[n].as_mut_slice()[e] -= h;
                let (gp, _, lp) = eval(&plus, Some(&weights));
                let (gm, _, lm) = eval(&minus, Some(&weights));
                let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
                let a = analytic.as_slice()[e];
                let tol = 1e-6 * (1.0 + a.abs().max(numeric.abs()));
                assert!(
                    (a - numeric).abs() < tol,
                    "input {n} entry {e}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn rand_m(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        Matrix::normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_grads() {
        check(vec![rand_m(3, 4, 1), rand_m(4, 2, 2)], &|g, x| g.matmul(x[0], x[1]));
        check(vec![rand_m(3, 4, 1), rand_m(5, 4, 2)], &|g, x| g.matmul_nt(x[0], x[1]));
    }

    #[test]
    fn elementwise_grads() {
        check(vec![rand_m(3, 4, 3), rand_m(3, 4, 4)], &|g, x| g.mul(x[0], x[1]));
        check(vec![rand_m(6, 4, 3), rand_m(2, 4, 4)], &|g, x| g.add_tiled(x[0], x[1]));
        check(vec![rand_m(3, 4, 5)], &|g, x| g.gelu(x[0]));
        check(vec![rand_m(3, 4, 6)], &|g, x| g.exp(x[0]));
        check(vec![rand_m(3, 4, 7), rand_m(1, 1, 8)], &|g, x| g.scale_by(x[0], x[1]));
    }

    #[test]
    fn layer_norm_grads() {
        check(vec![rand_m(3, 5, 9), rand_m(1, 5, 10), rand_m(1, 5, 11)], &|g, x| {
            g.layer_norm(x[0], x[1], x[2], 1e-5)
        });
    }

    #[test]
    fn softmax_normalize_and_reductions() {
        check(vec![rand_m(3, 4, 12)], &|g, x| g.log_softmax_rows(x[0]));
        check(vec![rand_m(3, 4, 13)], &|g, x| g.l2_normalize_rows(x[0]).unwrap());
        check(vec![rand_m(4, 4, 14)], &|g, x| g.diag_mean(x[0]));
        check(vec![rand_m(6, 3, 15)], &|g, x| g.mean_groups(x[0], 3));
        check(vec![rand_m(3, 4, 16)], &|g, x| g.transpose(x[0]));
    }

    #[test]
    fn gather_and_concat_grads() {
        check(vec![rand_m(3, 2, 17)], &|g, x| g.select_rows(x[0], vec![2, 0, 2, 1]));
        check(vec![rand_m(2, 3, 18), rand_m(1, 3, 19)], &|g, x| g.concat_rows(&[x[0], x[1]]));
    }

    #[test]
    fn attention_grads_with_groups_heads_and_mask() {
        let layout = AttentionLayout {
            groups: 2,
            q_len: 2,
            k_len: 3,
            heads: 2,
            key_mask: Some(vec![true, true, false, true, false, true]),
        };
        check(vec![rand_m(4, 4, 20), rand_m(6, 4, 21), rand_m(6, 4, 22)], &|g, x| {
            g.attention(x[0], x[1], x[2], layout.clone()).unwrap()
        });
    }

    #[test]
    fn masked_keys_get_no_gradient_and_no_weight() {
        let layout = AttentionLayout {
            groups: 1,
            q_len: 1,
            k_len: 2,
            heads: 1,
            key_mask: Some(vec![true, false]),
        };
        let mut g = Graph::new();
        let q = g.leaf(rand_m(1, 2, 1), true);
        let k = g.leaf(rand_m(2, 2, 2), true);
        let v = g.leaf(rand_m(2, 2, 3), true);
        let out = g.attention(q, k, v, layout).unwrap();
        assert_eq!(g.value(out).row(0), g.value(v).row(0));
        let s = g.sum_all(out);
        let grads = g.backward(s);
        assert!(grads.get(v).unwrap().row(1).iter().all(|&x| x == 0.0));
        assert!(grads.get(k).unwrap().row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frozen_branches_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(rand_m(2, 2, 1), false);
        let b = g.leaf(rand_m(2, 2, 2), true);
        let c = g.matmul(a, a);
        assert!(!g.requires_grad(c));
        let d = g.add(c, b);
        let s = g.sum_all(d);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert!(grads.get(c).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn zero_row_normalisation_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(), false);
        let err = g.l2_normalize_rows(a).unwrap_err();
        assert!(matches!(err, Error::Numeric { index: Some(1), .. }));
    }
}
