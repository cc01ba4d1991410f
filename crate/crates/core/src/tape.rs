//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in a
//! [`ParamStore`] and are referenced by [`ParamId`]; calling [`Tape::backward`]
//! returns gradients for every recorded node and every parameter reached from
//! the seed node. Vectors are represented as `1 x n` matrices throughout.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Matrix = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

enum Op {
    Input,
    Param(ParamId),
    Rows { src: NodeId, rows: Vec<usize> },
    Cols { src: NodeId, cols: Vec<usize> },
    Concat(Vec<NodeId>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu { x: NodeId, tanh: Matrix },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, inv_std: Vec<f64> },
    Attention { qkv: NodeId, heads: usize, probs: Vec<Matrix> },
    MeanRows(NodeId),
    SoftmaxCe { logits: NodeId, targets: Vec<usize>, probs: Matrix },
    BceLogits { logit: NodeId, label: f64 },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256) }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.store.get(p),
            _ => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Option<Matrix>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, Some(value))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id), None)
    }

    /// Selects (and possibly repeats) rows of `src`.
    pub fn rows(&mut self, src: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(src);
        let mut out = Matrix::zeros((rows.len(), v.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&v.row(r));
        }
        self.push(Op::Rows { src, rows: rows.to_vec() }, Some(out))
    }

    pub fn row(&mut self, src: NodeId, row: usize) -> NodeId {
        self.rows(src, &[row])
    }

    pub fn cols(&mut self, src: NodeId, cols: &[usize]) -> NodeId {
        let v = self.value(src);
        let mut out = Matrix::zeros((v.nrows(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            out.column_mut(j).assign(&v.column(c));
        }
        self.push(Op::Cols { src, cols: cols.to_vec() }, Some(out))
    }

    /// Stacks the rows of every part, in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let width = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Matrix::zeros((total, width));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), width, "concat width mismatch");
            out.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(Op::Concat(parts.to_vec()), Some(out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), Some(out))
    }

    /// Adds the `1 x n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!(b.nrows(), 1);
        let out = self.value(x) + b;
        self.push(Op::AddRow(x, bias), Some(out))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x) * c;
        self.push(Op::Scale(x, c), Some(out))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let tanh = xv.mapv(|v| fast_tanh(GELU_C * (v + 0.044715 * v * v * v)));
        let mut out = tanh.clone();
        Zip::from(&mut out).and(xv).for_each(|o, &v| *o = 0.5 * v * (1.0 + *o));
        self.push(Op::Gelu { x, tanh }, Some(out))
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, width) = xv.dim();
        let mut xhat = Matrix::zeros((rows, width));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            Zip::from(xhat.row_mut(i)).and(&row).for_each(|h, &v| *h = (v - mean) * inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, Some(out))
    }

    /// Multi-head scaled dot-product attention over a packed `L x 3D` projection
    /// laid out as `[Q | K | V]`. With `causal`, position `i` attends to `0..=i`.
    pub fn attention(&mut self, qkv: NodeId, heads: usize, causal: bool) -> NodeId {
        let packed = self.value(qkv);
        let (len, width3) = packed.dim();
        let dim = width3 / 3;
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = Matrix::zeros((len, dim));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let lo = h * head_dim;
            let q = packed.slice(s![.., lo..lo + head_dim]);
            let k = packed.slice(s![.., dim + lo..dim + lo + head_dim]);
            let v = packed.slice(s![.., 2 * dim + lo..2 * dim + lo + head_dim]);
            let mut p = q.dot(&k.t()) * scale;
            for i in 0..len {
                let mut row = p.row_mut(i);
                let visible = if causal { i + 1 } else { len };
                let max = row.iter().take(visible).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut sum = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    if j < visible {
                        *x = (*x - max).exp();
                        sum += *x;
                    } else {
                        *x = 0.0;
                    }
                }
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(s![.., lo..lo + head_dim]).assign(&p.dot(&v));
            probs.push(p);
        }
        self.push(Op::Attention { qkv, heads, probs }, Some(out))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mean_axis(Axis(0)).expect("mean of empty matrix").insert_axis(Axis(0));
        self.push(Op::MeanRows(x), Some(out))
    }

    /// Mean over rows of the softmax cross-entropy of `logits[i]` against `targets[i]`.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(lv.view());
        let loss = ce_logsumexp(lv.view(), targets);
        self.push(
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
            Some(Matrix::from_elem((1, 1), loss)),
        )
    }

    /// Binary cross-entropy of a `1 x 1` logit against a 0/1 label.
    pub fn bce_logits(&mut self, logit: NodeId, label: f64) -> NodeId {
        let z = self.scalar(logit);
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        self.push(Op::BceLogits { logit, label }, Some(Matrix::from_elem((1, 1), loss)))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let mut out = Matrix::zeros(self.value(terms[0].0).dim());
        for &(t, w) in terms {
            out.scaled_add(w, self.value(t));
        }
        self.push(Op::WeightedSum(terms.to_vec()), Some(out))
    }

    /// Backward sweep seeded with d(out)/d(out) = 1 for a scalar node.
    pub fn backward(&self, out: NodeId) -> Grads {
        let seed = Matrix::ones(self.value(out).dim());
        self.backward_with(out, seed)
    }

    /// Backward sweep seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: NodeId, seed: Matrix) -> Grads {
        assert_eq!(seed.dim(), self.value(out).dim(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Grads { nodes: grads, params }
    }

    /// Routes a gradient to a node, or straight to its parameter.
    fn send(&self, grads: &mut [Option<Matrix>], params: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        match self.nodes[id.0].op {
            Op::Param(p) => accumulate_owned(&mut params[p.0], g),
            _ => accumulate_owned(&mut grads[id.0], g),
        }
    }

    fn send_ref(&self, grads: &mut [Option<Matrix>], params: &mut [Option<Matrix>], id: NodeId, g: &Matrix) {
        match self.nodes[id.0].op {
            Op::Param(p) => accumulate(&mut params[p.0], g),
            _ => accumulate(&mut grads[id.0], g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>], params: &mut [Option<Matrix>]) {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(p) => accumulate(&mut params[p.0], g),
            Op::Rows { src, rows } => {
                let slot = grad_slot(grads, *src, self.value(*src).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = slot.row_mut(r);
                    dst += &g.row(i);
                }
            }
            Op::Cols { src, cols } => {
                let slot = grad_slot(grads, *src, self.value(*src).dim());
                for (j, &c) in cols.iter().enumerate() {
                    let mut dst = slot.column_mut(c);
                    dst += &g.column(j);
                }
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    let piece = g.slice(s![at..at + n, ..]);
                    let slot = grad_slot(grads, p, self.value(p).dim());
                    *slot += &piece;
                    at += n;
                }
            }
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                self.send(grads, params, *a, da);
                self.send(grads, params, *b, db);
            }
            Op::Add(a, b) => {
                self.send_ref(grads, params, *a, g);
                self.send_ref(grads, params, *b, g);
            }
            Op::AddRow(x, bias) => {
                self.send_ref(grads, params, *x, g);
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.send(grads, params, *bias, db);
            }
            Op::Scale(x, c) => {
                self.send(grads, params, *x, g * *c);
            }
            Op::Gelu { x, tanh } => {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(self.value(*x)).and(tanh).for_each(|d, &v, &t| {
                    *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                });
                self.send(grads, params, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                let dgamma = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dxhat = g * gam;
                let width = xhat.ncols() as f64;
                let mut dx = Matrix::zeros(xhat.dim());
                for i in 0..xhat.nrows() {
                    let dh = dxhat.row(i);
                    let h = xhat.row(i);
                    let sum_dh = dh.sum();
                    let sum_dh_h = dh.dot(&h);
                    let inv = inv_std[i];
                    Zip::from(dx.row_mut(i)).and(&dh).and(&h).for_each(|d, &a, &b| {
                        *d = inv / width * (width * a - sum_dh - b * sum_dh_h);
                    });
                }
                self.send(grads, params, *x, dx);
                self.send(grads, params, *gamma, dgamma);
                self.send(grads, params, *beta, dbeta);
            }
            Op::Attention { qkv, heads, probs } => {
                let packed = self.value(*qkv);
                let (len, width3) = packed.dim();
                let dim = width3 / 3;
                let head_dim = dim / heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let mut dqkv = Matrix::zeros((len, width3));
                for (h, p) in probs.iter().enumerate() {
                    let lo = h * head_dim;
                    let q = packed.slice(s![.., lo..lo + head_dim]);
                    let k = packed.slice(s![.., dim + lo..dim + lo + head_dim]);
                    let v = packed.slice(s![.., 2 * dim + lo..2 * dim + lo + head_dim]);
                    let dout = g.slice(s![.., lo..lo + head_dim]);
                    let dv = p.t().dot(&dout);
                    let dp = dout.dot(&v.t());
                    let mut ds = dp;
                    for i in 0..len {
                        let dot: f64 = ds.row(i).dot(&p.row(i));
                        Zip::from(ds.row_mut(i)).and(p.row(i)).for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                    }
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    dqkv.slice_mut(s![.., lo..lo + head_dim]).assign(&dq);
                    dqkv.slice_mut(s![.., dim + lo..dim + lo + head_dim]).assign(&dk);
                    dqkv.slice_mut(s![.., 2 * dim + lo..2 * dim + lo + head_dim]).assign(&dv);
                }
                self.send(grads, params, *qkv, dqkv);
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).nrows();
                let dx = Matrix::from_shape_fn((n, g.ncols()), |(_, j)| g[[0, j]] / n as f64);
                self.send(grads, params, *x, dx);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[[i, t]] -= 1.0;
                }
                dl *= scale;
                self.send(grads, params, *logits, dl);
            }
            Op::BceLogits { logit, label } => {
                let z = self.scalar(*logit);
                let d = (sigmoid(z) - label) * g[[0, 0]];
                self.send(grads, params, *logit, Matrix::from_elem((1, 1), d));
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    self.send(grads, params, t, g * w);
                }
            }
        }
    }
}

/// `tanh` through a single `exp`; absolute error near machine epsilon.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn accumulate_owned(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

fn grad_slot(grads: &mut [Option<Matrix>], id: NodeId, dim: (usize, usize)) -> &mut Matrix {
    grads[id.0].get_or_insert_with(|| Matrix::zeros(dim))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Matrix {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn ce_logsumexp(logits: ArrayView2<f64>, targets: &[usize]) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row: Vec<f64> = logits.row(i).to_vec();
            log_sum_exp(&row) - row[t]
        })
        .sum::<f64>()
        / targets.len() as f64
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
