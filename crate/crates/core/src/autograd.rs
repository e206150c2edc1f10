//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records one forward pass. Backward is seeded with the gradient
//! of a scalar loss with respect to any recorded node (usually the logits) and
//! accumulates parameter gradients into a [`Gradients`] buffer aligned with the
//! [`ParamStore`].

use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// Removes every parameter whose name starts with `prefix`. Ids of the
    /// remaining parameters are renumbered.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let keep: Vec<bool> = self.names.iter().map(|n| !n.starts_with(prefix)).collect();
        let mut k = keep.iter();
        self.names.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.tensors.retain(|_| *k.next().unwrap());
    }
}

/// Per-parameter gradient buffers, same shapes as the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Mat>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(
            store
                .tensors
                .iter()
                .map(|t| Mat::zeros(t.rows, t.cols))
                .collect(),
        )
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.0[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.scale(s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Mat::is_finite)
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        scale: f64,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Tape of one forward computation.
#[derive(Debug)]
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Mat {
        &self.nodes[n.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.push(self.store.get(id).clone(), Op::Leaf(Some(id)));
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf(None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the single-row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_row_assign(&self.value(bias).data);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, a) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (a - mean) * is;
            }
            inv_std.push(is);
        }
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut y = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for a in &mut v.data {
            *a = gelu(*a);
        }
        self.push(v, Op::Gelu(x))
    }

    /// Row softmax of `scale · x`. With `causal`, entries above the diagonal
    /// are masked out (probability exactly zero).
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64, causal: bool) -> NodeId {
        let xv = self.value(x);
        let mut y = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let visible = if causal { (r + 1).min(xv.cols) } else { xv.cols };
            let row = &xv.row(r)[..visible];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut y.row_mut(r)[..visible];
            let mut sum = 0.0;
            for (o, a) in out.iter_mut().zip(row) {
                *o = ((a - max) * scale).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        self.push(y, Op::Softmax { x, scale })
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let v = self.value(x).cols_slice(start, width);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Propagates the seeded upstream gradients back to the parameters,
    /// adding into `grads`.
    pub fn backward(&self, seeds: &[(NodeId, &Mat)], grads: &mut Gradients) {
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (n, seed) in seeds {
            assert_eq!(self.value(*n).shape(), seed.shape(), "seed shape");
            accumulate(&mut g, *n, seed);
            last = last.max(n.0);
        }
        for i in (0..=last).rev() {
            let Some(dy) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf(Some(pid)) => grads.0[pid.0].add_assign(&dy),
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&dy);
                    accumulate_owned(&mut g, *a, da);
                    accumulate_owned(&mut g, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.matmul(self.value(*b));
                    let db = dy.t_matmul(self.value(*a));
                    accumulate_owned(&mut g, *a, da);
                    accumulate_owned(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *b, &dy);
                    accumulate_owned(&mut g, *a, dy);
                }
                Op::AddRow(a, bias) => {
                    let db = Mat::from_vec(1, dy.cols, dy.sum_rows());
                    accumulate_owned(&mut g, *bias, db);
                    accumulate_owned(&mut g, *a, dy);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.value(*gain).data;
                    let (rows, cols) = dy.shape();
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        for c in 0..cols {
                            dg[c] += dyr[c] * xh[c];
                            db[c] += dyr[c];
                            dxhat[c] = dyr[c] * gv[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dot(&dxhat, xh) / cols as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                    accumulate_owned(&mut g, *gain, Mat::from_vec(1, cols, dg));
                    accumulate_owned(&mut g, *bias, Mat::from_vec(1, cols, db));
                    accumulate_owned(&mut g, *x, dx);
                }
                Op::Gelu(x) => {
                    let mut dx = dy;
                    for (d, &a) in dx.data.iter_mut().zip(&self.value(*x).data) {
                        *d *= gelu_grad(a);
                    }
                    accumulate_owned(&mut g, *x, dx);
                }
                Op::Softmax { x, scale } => {
                    let y = &self.nodes[i].value;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let dyr = dy.row(r);
                        let s = dot(yr, dyr);
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = scale * yr[c] * (dyr[c] - s);
                        }
                    }
                    accumulate_owned(&mut g, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, d) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                    accumulate_owned(&mut g, *table, dt);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    accumulate_owned(&mut g, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        accumulate_owned(&mut g, p, dy.cols_slice(off, w));
                        off += w;
                    }
                }
            }
        }
    }
}

fn accumulate(g: &mut [Option<Mat>], n: NodeId, d: &Mat) {
    match &mut g[n.0] {
        Some(acc) => acc.add_assign(d),
        slot => *slot = Some(d.clone()),
    }
}

fn accumulate_owned(g: &mut [Option<Mat>], n: NodeId, d: Mat) {
    match &mut g[n.0] {
        Some(acc) => acc.add_assign(&d),
        slot => *slot = Some(d),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
