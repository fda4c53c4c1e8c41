use std::collections::BTreeMap;
use std::fmt;

use super::array::{matmul_into, matmul_nt, matmul_tn, Array};
use crate::error::{Error, Result};

/// Index of a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied by the implementation.
///
/// Used for the pieces that are cheaper with an analytic adjoint than when
/// composed from primitives: pinhole projection, bilinear feature sampling and
/// the splat rasterizer.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input (same order as given to [`Graph::custom`]).
    /// `None` means "no gradient flows into this input".
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Result<Vec<Option<Array>>>;
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Gather(NodeId, Vec<Option<usize>>),
    ScatterAdd(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    Reshape(NodeId),
    Sum(NodeId),
    L1(NodeId, NodeId),
    Custom(Vec<NodeId>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::L1(..) => "l1",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

/// Define-by-run computation graph over [`Array`]s.
///
/// Every operation evaluates eagerly and appends a node, so node order is a
/// topological order by construction. [`Graph::backward`] walks the nodes in
/// reverse and accumulates vector-Jacobian products sequentially, which makes
/// repeated runs bit-identical.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Broadcast class of the right-hand operand of an elementwise op.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast(a: &Array, b: &Array) -> Option<Bcast> {
    let (r, c) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    if b.shape() == a.shape() || (br == r && bc == c) {
        Some(Bcast::Same)
    } else if br == 1 && bc == 1 {
        Some(Bcast::Scalar)
    } else if br == 1 && bc == c {
        Some(Bcast::Row)
    } else if br == r && bc == 1 {
        Some(Bcast::Col)
    } else {
        None
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, j: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i * cols + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

fn reduce_to(kind: Bcast, g: &Array, b: &Array, scale: f64) -> Array {
    let cols = g.cols();
    let mut out = Array::zeros(b.shape());
    let od = out.data_mut();
    for (idx, &gv) in g.data().iter().enumerate() {
        let (i, j) = (idx / cols, idx % cols);
        od[bidx(kind, i, j, cols)] += scale * gv;
    }
    out
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Names of the trainable parameters bound to this graph.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn push(&mut self, op: Op, value: Array) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L1(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::Sum(a) => self.rg(*a),
            Op::ConcatCols(xs) | Op::ConcatRows(xs) | Op::Custom(xs, _) => xs.iter().any(|x| self.rg(*x)),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Constant input; gradients are still reported for it by [`Graph::backward`].
    pub fn input(&mut self, value: Array) -> Result<NodeId> {
        let id = self.push(Op::Leaf, value)?;
        self.nodes[id.0].requires_grad = true;
        Ok(id)
    }

    /// Constant that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    /// Binds a named trainable parameter. Binding the same name twice returns
    /// the first node.
    pub fn param(&mut self, name: &str, value: &Array) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let id = self.input(value.clone())?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Marks an existing leaf as a named parameter (used to re-bind inputs).
    pub fn param_from(&mut self, name: &str, id: NodeId) {
        self.params.insert(name.to_string(), id);
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(self.shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), m, k, n, &mut out);
        self.push(Op::MatMul(a, b), Array::matrix(m, n, out))
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast(av, bv)
            .ok_or_else(|| self.shape_err(name, format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape())))?;
        let cols = av.cols();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| f(x, bd[bidx(kind, idx / cols, idx % cols, cols)]))
            .collect();
        Array::new(av.shape().to_vec(), data)
    }

    /// `a + b`; `b` may broadcast as a row `[1, c]`, a column `[r, 1]` or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(Op::Softmax(a), out)
    }

    /// Zero-mean, unit-variance normalization of each row (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        let mut rstds = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.push(Op::LayerNorm(a, rstds), out)
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != rows {
                return Err(self.shape_err("concat_cols", format!("row counts {rows} vs {}", v.rows())));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), Array::matrix(rows, total, out))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(self.shape_err("concat_rows", "no inputs".into()));
        }
        let cols = self.value(xs[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != cols {
                return Err(self.shape_err("concat_rows", format!("col counts {cols} vs {}", v.cols())));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        self.push(Op::ConcatRows(xs.to_vec()), Array::matrix(rows, cols, out))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather(&mut self, a: NodeId, idx: Vec<Option<usize>>) -> Result<NodeId> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = vec![0.0; idx.len() * cols];
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(self.shape_err("gather", format!("row {i} out of {rows}")));
                }
                out[o * cols..(o + 1) * cols].copy_from_slice(av.row(i));
            }
        }
        let n = idx.len();
        self.push(Op::Gather(a, idx), Array::matrix(n, cols, out))
    }

    /// Row gather with every index present.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.gather(a, idx.iter().map(|&i| Some(i)).collect())
    }

    /// `out[idx[i]] += a[i]` into `n_out` rows; the adjoint of [`Graph::gather_rows`].
    pub fn scatter_add(&mut self, a: NodeId, idx: Vec<usize>, n_out: usize) -> Result<NodeId> {
        let av = self.value(a);
        let cols = av.cols();
        if idx.len() != av.rows() {
            return Err(self.shape_err("scatter_add", format!("{} indices for {} rows", idx.len(), av.rows())));
        }
        let mut out = vec![0.0; n_out * cols];
        for (i, &t) in idx.iter().enumerate() {
            if t >= n_out {
                return Err(self.shape_err("scatter_add", format!("target {t} out of {n_out}")));
            }
            for (o, v) in out[t * cols..(t + 1) * cols].iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        self.push(Op::ScatterAdd(a, idx), Array::matrix(n_out, cols, out))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(self.shape_err("slice_cols", format!("{start}..{end} of {}", av.cols())));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(av.rows() * w);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..end]);
        }
        let rows = av.rows();
        self.push(Op::SliceCols(a, start), Array::matrix(rows, w, out))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.len() != rows * cols {
            return Err(self.shape_err("reshape", format!("{:?} into {rows}x{cols}", av.shape())));
        }
        let v = Array::matrix(rows, cols, av.data().to_vec());
        self.push(Op::Reshape(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Array::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ |a − b|` as a scalar; the subgradient at zero is 0.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(self.shape_err("l1", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        self.push(Op::L1(a, b), Array::scalar(s))
    }

    /// Appends a node whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], value: Array, op: Box<dyn CustomOp>) -> Result<NodeId> {
        self.push(Op::Custom(inputs.to_vec(), op), value)
    }

    /// Reverse sweep from `root` seeded with `seed` (same shape as the root value).
    pub fn backward(&self, root: NodeId, seed: &Array) -> Result<Gradients> {
        let Some(rnode) = self.nodes.get(root.0) else {
            return Err(Error::NotEvaluated(root.0));
        };
        if seed.len() != rnode.value.len() {
            return Err(Error::Shape {
                node: root.0,
                op: "backward",
                detail: format!("seed {:?} vs root {:?}", seed.shape(), rnode.value.shape()),
            });
        }
        let mut grads: Vec<Option<Array>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array::new(rnode.value.shape().to_vec(), seed.data().to_vec())?);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &g, &mut grads)?;
        }

        let mut leaves = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                leaves.insert(i, g);
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let acc = |grads: &mut [Option<Array>], id: NodeId, delta: Array, nodes: &[Node]| {
            if !nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    let shape = nodes[id.0].value.shape().to_vec();
                    *slot = Some(Array::new(shape, delta.into_data()).expect("gradient shape"));
                }
            }
        };
        let nodes = &self.nodes;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if nodes[a.0].requires_grad {
                    let da = matmul_nt(g.data(), bv.data(), m, k, n);
                    acc(grads, *a, Array::matrix(m, k, da), nodes);
                }
                if nodes[b.0].requires_grad {
                    let db = matmul_tn(av.data(), g.data(), m, k, n);
                    acc(grads, *b, Array::matrix(k, n, db), nodes);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(grads, *a, g.clone(), nodes);
                if nodes[b.0].requires_grad {
                    let bv = &nodes[b.0].value;
                    let kind = bcast(&nodes[a.0].value, bv).expect("checked in forward");
                    acc(grads, *b, reduce_to(kind, g, bv, sign), nodes);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let kind = bcast(av, bv).expect("checked in forward");
                let cols = av.cols();
                if nodes[a.0].requires_grad {
                    let bd = bv.data();
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| gv * bd[bidx(kind, idx / cols, idx % cols, cols)])
                        .collect();
                    acc(grads, *a, Array::matrix(av.rows(), cols, da), nodes);
                }
                if nodes[b.0].requires_grad {
                    let prod: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let prod = Array::matrix(av.rows(), cols, prod);
                    acc(grads, *b, reduce_to(kind, &prod, bv, 1.0), nodes);
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|v| v * c), nodes),
            Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, g.clone(), nodes),
            Op::Sigmoid(a) => {
                let d = zip_map(g, y, |gv, s| gv * s * (1.0 - s));
                acc(grads, *a, d, nodes);
            }
            Op::Relu(a) => {
                let d = zip_map(g, y, |gv, r| if r > 0.0 { gv } else { 0.0 });
                acc(grads, *a, d, nodes);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, y, |gv, t| gv * (1.0 - t * t));
                acc(grads, *a, d, nodes);
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.data().chunks(cols)).zip(y.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(grads, *a, Array::matrix(y.rows(), cols, d), nodes);
            }
            Op::LayerNorm(a, rstds) => {
                let cols = y.cols();
                let n = cols as f64;
                let mut d = vec![0.0; y.len()];
                for (r, ((drow, grow), yrow)) in d
                    .chunks_mut(cols)
                    .zip(g.data().chunks(cols))
                    .zip(y.data().chunks(cols))
                    .enumerate()
                {
                    let gm = grow.iter().sum::<f64>() / n;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = rstds[r] * (gv - gm - yv * gy);
                    }
                }
                acc(grads, *a, Array::matrix(y.rows(), cols, d), nodes);
            }
            Op::ConcatCols(xs) => {
                let rows = y.rows();
                let mut off = 0;
                for x in xs {
                    let w = nodes[x.0].value.cols();
                    if nodes[x.0].requires_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(grads, *x, Array::matrix(rows, w, d), nodes);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let cols = y.cols();
                let mut off = 0;
                for x in xs {
                    let n = nodes[x.0].value.len();
                    if nodes[x.0].requires_grad {
                        let d = g.data()[off..off + n].to_vec();
                        acc(grads, *x, Array::matrix(n / cols, cols, d), nodes);
                    }
                    off += n;
                }
            }
            Op::Gather(a, idx) => {
                let av = &nodes[a.0].value;
                let cols = av.cols();
                let mut d = Array::zeros(&[av.rows(), cols]);
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                            *dv += gv;
                        }
                    }
                }
                acc(grads, *a, d, nodes);
            }
            Op::ScatterAdd(a, idx) => {
                let cols = y.cols();
                let mut d = Vec::with_capacity(idx.len() * cols);
                for &t in idx {
                    d.extend_from_slice(g.row(t));
                }
                acc(grads, *a, Array::matrix(idx.len(), cols, d), nodes);
            }
            Op::SliceCols(a, start) => {
                let av = &nodes[a.0].value;
                let w = y.cols();
                let mut d = Array::zeros(&[av.rows(), av.cols()]);
                for r in 0..av.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(grads, *a, d, nodes);
            }
            Op::Sum(a) => {
                let av = &nodes[a.0].value;
                acc(grads, *a, Array::full(av.shape(), g.item()), nodes);
            }
            Op::L1(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let gs = g.item();
                let sign: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            gs
                        } else if d < 0.0 {
                            -gs
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let sa = Array::new(av.shape().to_vec(), sign)?;
                if nodes[b.0].requires_grad {
                    acc(grads, *b, sa.map(|v| -v), nodes);
                }
                acc(grads, *a, sa, nodes);
            }
            Op::Custom(xs, op) => {
                let inputs: Vec<&Array> = xs.iter().map(|x| &nodes[x.0].value).collect();
                let ds = op.backward(&inputs, y, g)?;
                for (x, d) in xs.iter().zip(ds) {
                    if let Some(d) = d {
                        if d.len() != nodes[x.0].value.len() {
                            return Err(Error::Shape {
                                node: x.0,
                                op: op.name(),
                                detail: "custom op returned a gradient of the wrong size".into(),
                            });
                        }
                        acc(grads, *x, d, nodes);
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Array, y: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let d = g.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::new(y.shape().to_vec(), d).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Result of [`Graph::backward`]: gradients of every reached leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: BTreeMap<usize, Array>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.leaves.get(&id.0)
    }

    /// Gradient of a named parameter; `None` when it did not influence the root.
    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name).and_then(|id| self.leaves.get(&id.0))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Array {
        Array::matrix(1, v.len(), v.to_vec())
    }

    #[test]
    fn sigmoid_midpoint_and_slope() {
        let mut g = Graph::new();
        let x = g.input(Array::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
        let grads = g.backward(y, &Array::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Array::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let m = Array::from_rows(&[&[1.0, -2.0, 3.5], &[0.25, 7.0, -1.0]]);
        let x = g.input(m.clone()).unwrap();
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &m);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(row(&[1.0, 1.0, 1.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g
            .input(Array::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]))
            .unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s, &Array::scalar(1.0)).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn l1_at_minimum_has_zero_gradient() {
        let mut g = Graph::new();
        let v = row(&[0.5, -1.0, 3.0]);
        let x = g.input(v.clone()).unwrap();
        let y = g.input(v).unwrap();
        let l = g.l1(x, y).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l, &Array::scalar(1.0)).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input(Array::zeros(&[2, 3])).unwrap();
        let b = g.input(Array::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let a = g.input(Array::scalar(1e308)).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_on_unknown_node_is_rejected() {
        let g = Graph::new();
        assert!(matches!(
            g.backward(NodeId(3), &Array::scalar(1.0)),
            Err(Error::NotEvaluated(3))
        ));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.input(Array::zeros(&[3, 2])).unwrap();
        let b = g.input(row(&[1.0, 2.0])).unwrap();
        let c = g.add(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s, &Array::scalar(1.0)).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn params_bind_once() {
        let mut g = Graph::new();
        let w = Array::scalar(2.0);
        let a = g.param("w", &w).unwrap();
        let b = g.param("w", &w).unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y, &Array::scalar(1.0)).unwrap();
        assert_eq!(grads.param("w").unwrap().item(), 4.0);
    }
}
