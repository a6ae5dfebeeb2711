//! Reverse-mode differentiation over an explicit operation graph.
//!
//! Nodes are appended in forward order, so the node index order is already a
//! topological order; `backward` walks it once in reverse. Losses that have a
//! cheaper analytic gradient than the generic composition (CTC) register a
//! single node carrying their precomputed input gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Precision, Tensor2D};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive mask value for disallowed attention links. Large enough that the
/// masked weight underflows to zero, small enough to stay finite.
pub const ATTN_MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum OpKind {
    /// Constant or parameter input.
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Broadcast a 1 x n row over every row of an m x n operand.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Dropout {
        x: NodeId,
        /// Entries are 0 or 1/keep (inverted dropout).
        mask: Vec<f64>,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Rows i..=j averaged into one output row per segment.
    SegmentMean {
        x: NodeId,
        segments: Vec<(usize, usize)>,
    },
    /// 1-D sliding window over rows: output row t is the concatenation of
    /// input rows t*stride - pad + u for u in 0..kernel (zeros out of range).
    Unfold {
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Per-row choice between two same-shaped inputs; rows are copied
    /// bit-exactly, gradients route by the mask.
    SelectRows {
        on_false: NodeId,
        on_true: NodeId,
        mask: Vec<bool>,
    },
    SumAll(NodeId),
    SumCols(NodeId),
    /// Copies individual entries (row, col) into an n x 1 column. Structural
    /// (no arithmetic), so infinities in unselected entries are never
    /// touched.
    GatherEntries {
        x: NodeId,
        coords: Vec<(usize, usize)>,
    },
    /// Scalar node with a precomputed gradient w.r.t. its input.
    CachedGrad {
        x: NodeId,
        grad: Tensor2D,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    value: Tensor2D,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor2D> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, materializing zeros for nodes the loss does not
    /// depend on.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor2D {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor2D::zeros(rows, cols),
        }
    }
}

pub struct DiffGraph {
    nodes: Vec<Node>,
    precision: Precision,
    /// Parameter leaves bound from a ParamSet, for gradient accumulation.
    param_bindings: Vec<(String, NodeId)>,
}

impl DiffGraph {
    pub fn new(precision: Precision) -> Self {
        DiffGraph {
            nodes: Vec::new(),
            precision,
            param_bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    pub fn param_bindings(&self) -> &[(String, NodeId)] {
        &self.param_bindings
    }

    fn push(&mut self, op: OpKind, mut value: Tensor2D) -> NodeId {
        value.apply_precision(self.precision);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// A constant input; gradients may flow into it but are discarded.
    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: OpKind::Leaf,
            value,
        });
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor2D::scalar(v))
    }

    /// Binds a parameter from `params` as a leaf. Repeated binds of the same
    /// name reuse the first leaf so a parameter appears once per graph.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some((_, id)) = self.param_bindings.iter().find(|(n, _)| n == name) {
            return Ok(*id);
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::MissingTensor {
                name: name.to_string(),
                source_name: "param set".to_string(),
            })?;
        let id = self.constant(p.value.clone());
        self.param_bindings.push((name.to_string(), id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} @ {br}x{bc}")));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(OpKind::Matmul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(OpKind::Transpose(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{} vs {}", self.value(a).shape_str(), self.value(b).shape_str()),
            ));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(OpKind::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "sub",
                format!("{} vs {}", self.value(a).shape_str(), self.value(b).shape_str()),
            ));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor2D::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(OpKind::Sub(a, b), v))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r_rows, r_cols) = self.value(row).shape();
        if r_rows != 1 || r_cols != self.value(a).cols() {
            return Err(Error::shape(
                "add_row",
                format!("{} + {}", self.value(a).shape_str(), self.value(row).shape_str()),
            ));
        }
        let mut v = self.value(a).clone();
        let rvals = self.value(row).data().to_vec();
        for i in 0..v.rows() {
            for (x, r) in v.row_mut(i).iter_mut().zip(&rvals) {
                *x += r;
            }
        }
        Ok(self.push(OpKind::AddRow(a, row), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!("{} vs {}", self.value(a).shape_str(), self.value(b).shape_str()),
            ));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor2D::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(OpKind::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(OpKind::Scale(a, c), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(OpKind::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(OpKind::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(OpKind::Log(a), v)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = rowwise_softmax(self.value(a));
        self.push(OpKind::Softmax(a), v)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = rowwise_log_softmax(self.value(a));
        self.push(OpKind::LogSoftmax(a), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let n = self.value(x).cols();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s != (1, n) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} is {}x{}, expected 1x{n}", s.0, s.1),
                ));
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut v = Tensor2D::zeros(xv.rows(), n);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, out) in v.row_mut(i).iter_mut().enumerate() {
                *out = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        Ok(self.push(OpKind::LayerNorm { x, gamma, beta }, v))
    }

    /// Inverted dropout with an explicit RNG stream. `keep` is the keep
    /// probability; surviving entries are scaled by 1/keep.
    pub fn dropout(&mut self, x: NodeId, keep: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0 < keep && keep <= 1.0) {
            return Err(Error::InvalidArg(format!("dropout keep probability {keep} not in (0, 1]")));
        }
        let xv = self.value(x);
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor2D::from_vec(xv.rows(), xv.cols(), data)?;
        Ok(self.push(OpKind::Dropout { x, mask }, v))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab: t.rows(),
            });
        }
        let mut v = Tensor2D::zeros(ids.len(), t.cols());
        for (out_i, &id) in ids.iter().enumerate() {
            v.row_mut(out_i).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            OpKind::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    /// Averages row segments `[(start, end_inclusive)]` into one row each.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[(usize, usize)]) -> Result<NodeId> {
        let xv = self.value(x);
        for &(s, e) in segments {
            if s > e || e >= xv.rows() {
                return Err(Error::shape(
                    "segment_mean",
                    format!("segment {s}..={e} out of range for {} rows", xv.rows()),
                ));
            }
        }
        let mut v = Tensor2D::zeros(segments.len(), xv.cols());
        for (k, &(s, e)) in segments.iter().enumerate() {
            let inv = 1.0 / (e - s + 1) as f64;
            let out = v.row_mut(k);
            for t in s..=e {
                for (o, &x) in out.iter_mut().zip(xv.row(t)) {
                    *o += x;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        Ok(self.push(
            OpKind::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            v,
        ))
    }

    pub fn unfold(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArg("unfold kernel and stride must be positive".into()));
        }
        let xv = self.value(x);
        let t_in = xv.rows();
        let d = xv.cols();
        let padded = t_in + 2 * pad;
        if padded < kernel {
            return Err(Error::shape(
                "unfold",
                format!("{t_in} rows (+{pad} pad) shorter than kernel {kernel}"),
            ));
        }
        let t_out = (padded - kernel) / stride + 1;
        let mut v = Tensor2D::zeros(t_out, kernel * d);
        for t in 0..t_out {
            for u in 0..kernel {
                let src = (t * stride + u) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    let dst = &mut v.row_mut(t)[u * d..(u + 1) * d];
                    dst.copy_from_slice(xv.row(src as usize));
                }
            }
        }
        Ok(self.push(OpKind::Unfold { x, kernel, stride, pad }, v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of range for {}", start + len, xv.shape_str()),
            ));
        }
        let mut v = Tensor2D::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            v.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(OpKind::SliceCols { x, start, len }, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols with no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ".to_string()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor2D::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.cols();
            for i in 0..rows {
                v.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        let parts = parts.to_vec();
        Ok(self.push(OpKind::ConcatCols(parts), v))
    }

    /// Row-wise select: output row k is `on_true` row k where `mask[k]`,
    /// otherwise `on_false` row k. Rows are copied bit-exactly.
    pub fn select_rows(&mut self, on_false: NodeId, on_true: NodeId, mask: &[bool]) -> Result<NodeId> {
        let a = self.value(on_false);
        let b = self.value(on_true);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "select_rows",
                format!("{} vs {}", a.shape_str(), b.shape_str()),
            ));
        }
        if mask.len() != a.rows() {
            return Err(Error::shape(
                "select_rows",
                format!("mask length {} for {} rows", mask.len(), a.rows()),
            ));
        }
        let mut v = a.clone();
        for (k, &m) in mask.iter().enumerate() {
            if m {
                let src = b.row(k).to_vec();
                v.row_mut(k).copy_from_slice(&src);
            }
        }
        Ok(self.push(
            OpKind::SelectRows {
                on_false,
                on_true,
                mask: mask.to_vec(),
            },
            v,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(OpKind::SumAll(a), Tensor2D::scalar(s))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = Tensor2D::zeros(av.rows(), 1);
        for i in 0..av.rows() {
            v.set(i, 0, av.row(i).iter().sum());
        }
        self.push(OpKind::SumCols(a), v)
    }

    pub fn gather_entries(&mut self, x: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= xv.rows() || c >= xv.cols()) {
            return Err(Error::shape(
                "gather_entries",
                format!("entry ({r}, {c}) out of range for {}", xv.shape_str()),
            ));
        }
        let mut v = Tensor2D::zeros(coords.len(), 1);
        for (i, &(r, c)) in coords.iter().enumerate() {
            v.set(i, 0, xv.get(r, c));
        }
        Ok(self.push(
            OpKind::GatherEntries {
                x,
                coords: coords.to_vec(),
            },
            v,
        ))
    }

    /// Registers a scalar loss node whose gradient w.r.t. `x` was computed
    /// analytically by the caller (used by the CTC loss).
    pub fn cached_grad_loss(&mut self, x: NodeId, loss: f64, grad: Tensor2D) -> Result<NodeId> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "cached_grad_loss",
                format!(
                    "grad {} for input {}",
                    grad.shape_str(),
                    self.value(x).shape_str()
                ),
            ));
        }
        Ok(self.push(OpKind::CachedGrad { x, grad }, Tensor2D::scalar(loss)))
    }

    /// Reverse-mode sweep from a scalar loss node. Each node is visited once;
    /// nodes the loss does not depend on keep a `None` (zero) gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArg(format!(
                "backward on node {} but graph has {} nodes (forward not run?)",
                loss.0,
                self.nodes.len()
            )));
        }
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward and adds parameter-leaf gradients into `params`.
    pub fn backward_into(&self, loss: NodeId, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (name, id) in &self.param_bindings {
            if let Some(g) = grads.get(*id) {
                let p = params.get_mut(name).ok_or_else(|| Error::MissingTensor {
                    name: name.clone(),
                    source_name: "param set".to_string(),
                })?;
                if p.grad.shape() != g.shape() {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        expected: p.grad.shape_str(),
                        got: g.shape_str(),
                    });
                }
                p.grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        fn acc(grads: &mut [Option<Tensor2D>], id: NodeId, contrib: Tensor2D) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        }

        match &self.nodes[idx].op {
            OpKind::Leaf => {}
            OpKind::Matmul(a, b) => {
                let bt = self.value(*b).transpose();
                acc(grads, *a, g.matmul(&bt));
                let at = self.value(*a).transpose();
                acc(grads, *b, at.matmul(g));
            }
            OpKind::Transpose(a) => acc(grads, *a, g.transpose()),
            OpKind::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            OpKind::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            OpKind::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut rg = Tensor2D::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &x) in rg.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(grads, *row, rg);
            }
            OpKind::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let ga = Tensor2D::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("same shape");
                let gb = Tensor2D::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("same shape");
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            OpKind::Scale(a, c) => acc(grads, *a, g.map(|x| x * c)),
            OpKind::Relu(a) => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gx, &x)| if x > 0.0 { gx } else { 0.0 })
                    .collect();
                acc(grads, *a, Tensor2D::from_vec(g.rows(), g.cols(), data).expect("same shape"));
            }
            OpKind::Exp(a) => {
                let out = &self.nodes[idx].value;
                let data = g.data().iter().zip(out.data()).map(|(x, y)| x * y).collect();
                acc(grads, *a, Tensor2D::from_vec(g.rows(), g.cols(), data).expect("same shape"));
            }
            OpKind::Log(a) => {
                let va = self.value(*a);
                let data = g.data().iter().zip(va.data()).map(|(x, y)| x / y).collect();
                acc(grads, *a, Tensor2D::from_vec(g.rows(), g.cols(), data).expect("same shape"));
            }
            OpKind::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let mut out = Tensor2D::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in out.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(grads, *a, out);
            }
            OpKind::LogSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut out = Tensor2D::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let gr = g.row(i);
                    let gsum: f64 = gr.iter().sum();
                    for (o, (&lv, &gv)) in out.row_mut(i).iter_mut().zip(y.row(i).iter().zip(gr)) {
                        *o = gv - lv.exp() * gsum;
                    }
                }
                acc(grads, *a, out);
            }
            OpKind::LayerNorm { x, gamma, beta } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma);
                let n = xv.cols();
                let mut gx = Tensor2D::zeros(xv.rows(), n);
                let mut ggamma = Tensor2D::zeros(1, n);
                let mut gbeta = Tensor2D::zeros(1, n);
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * rstd).collect();
                    let gr = g.row(i);
                    for j in 0..n {
                        ggamma.row_mut(0)[j] += gr[j] * xhat[j];
                        gbeta.row_mut(0)[j] += gr[j];
                    }
                    let ghat: Vec<f64> = (0..n).map(|j| gr[j] * gm.row(0)[j]).collect();
                    let mean_ghat = ghat.iter().sum::<f64>() / n as f64;
                    let mean_ghat_xhat =
                        ghat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx.row_mut(i)[j] = rstd * (ghat[j] - mean_ghat - xhat[j] * mean_ghat_xhat);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma);
                acc(grads, *beta, gbeta);
            }
            OpKind::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                acc(grads, *x, Tensor2D::from_vec(g.rows(), g.cols(), data).expect("same shape"));
            }
            OpKind::GatherRows { table, ids } => {
                let t = self.value(*table);
                let mut gt = Tensor2D::zeros(t.rows(), t.cols());
                for (out_i, &id) in ids.iter().enumerate() {
                    let src = g.row(out_i);
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(src) {
                        *o += x;
                    }
                }
                acc(grads, *table, gt);
            }
            OpKind::SegmentMean { x, segments } => {
                let xv = self.value(*x);
                let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                for (k, &(s, e)) in segments.iter().enumerate() {
                    let inv = 1.0 / (e - s + 1) as f64;
                    let src = g.row(k);
                    for t in s..=e {
                        for (o, &x) in gx.row_mut(t).iter_mut().zip(src) {
                            *o += x * inv;
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            OpKind::Unfold { x, kernel, stride, pad } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = Tensor2D::zeros(xv.rows(), d);
                for t in 0..g.rows() {
                    for u in 0..*kernel {
                        let src = (t * stride + u) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < xv.rows() {
                            let gr = &g.row(t)[u * d..(u + 1) * d];
                            for (o, &x) in gx.row_mut(src as usize).iter_mut().zip(gr) {
                                *o += x;
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            OpKind::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                acc(grads, *x, gx);
            }
            OpKind::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Tensor2D::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    acc(grads, p, gp);
                    off += w;
                }
            }
            OpKind::SelectRows { on_false, on_true, mask } => {
                let mut gf = Tensor2D::zeros(g.rows(), g.cols());
                let mut gt = Tensor2D::zeros(g.rows(), g.cols());
                for (k, &m) in mask.iter().enumerate() {
                    if m {
                        gt.row_mut(k).copy_from_slice(g.row(k));
                    } else {
                        gf.row_mut(k).copy_from_slice(g.row(k));
                    }
                }
                acc(grads, *on_false, gf);
                acc(grads, *on_true, gt);
            }
            OpKind::SumAll(a) => {
                let va = self.value(*a);
                acc(grads, *a, Tensor2D::filled(va.rows(), va.cols(), g.item()));
            }
            OpKind::SumCols(a) => {
                let va = self.value(*a);
                let mut ga = Tensor2D::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let gv = g.get(i, 0);
                    for o in ga.row_mut(i) {
                        *o = gv;
                    }
                }
                acc(grads, *a, ga);
            }
            OpKind::GatherEntries { x, coords } => {
                let xv = self.value(*x);
                let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                for (i, &(r, c)) in coords.iter().enumerate() {
                    let cur = gx.get(r, c);
                    gx.set(r, c, cur + g.get(i, 0));
                }
                acc(grads, *x, gx);
            }
            OpKind::CachedGrad { x, grad } => {
                let mut contrib = grad.clone();
                contrib.scale_assign(g.item());
                acc(grads, *x, contrib);
            }
        }
    }
}

pub fn rowwise_softmax(x: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let orow = out.row_mut(i);
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub fn rowwise_log_softmax(x: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::logsumexp;

    fn graph() -> DiffGraph {
        DiffGraph::new(Precision::F64)
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = graph();
        let x = g.constant(Tensor2D::row_vec(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = graph();
        let x = g.constant(Tensor2D::row_vec(vec![1.0, 2.0, 3.0]));
        let y = g.softmax(x);
        let sum: f64 = g.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_logsumexp_zero() {
        let mut g = graph();
        let x = g.constant(Tensor2D::row_vec(vec![0.3, -2.0, 5.0]));
        let y = g.log_softmax(x);
        assert!(logsumexp(g.value(y).data()).abs() < 1e-6);
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut g = graph();
        let x = g.constant(Tensor2D::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor2D::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor2D::row_vec(vec![0.0, 0.0]));
        let h = g.matmul(x, w).unwrap();
        let y = g.add_row(h, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_of_linear_sum_is_outer_product() {
        // loss = sum(W @ x) with x a column vector: dL/dW = 1 . x^T
        let mut g = graph();
        let w = g.constant(Tensor2D::from_vec(2, 3, vec![0.1; 6]).unwrap());
        let x = g.constant(Tensor2D::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn unused_node_grad_is_zero() {
        let mut g = graph();
        let a = g.constant(Tensor2D::scalar(2.0));
        let unused = g.constant(Tensor2D::scalar(5.0));
        let loss = g.scale(a, 3.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, 1, 1).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = graph();
        let a = g.constant(Tensor2D::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_rejects_missing_forward() {
        let g = graph();
        assert!(g.backward(NodeId(0)).is_err());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = graph();
        let a = g.constant(Tensor2D::zeros(2, 3));
        let b = g.constant(Tensor2D::zeros(2, 3));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn select_rows_is_bit_exact() {
        let mut g = graph();
        let a = g.constant(Tensor2D::from_vec(2, 2, vec![-0.0, 1.5, 2.5, 3.5]).unwrap());
        let b = g.constant(Tensor2D::from_vec(2, 2, vec![9.0, 9.0, 9.0, 9.0]).unwrap());
        let y = g.select_rows(a, b, &[false, true]).unwrap();
        assert_eq!(g.value(y).data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(g.value(y).row(1), &[9.0, 9.0]);
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut g = graph();
        let x = g.constant(Tensor2D::row_vec(vec![1.0, -2.0, 3.0]));
        let mut rng = crate::rng::stream(1, &[crate::rng::tags::DROPOUT]);
        let y = g.dropout(x, 1.0, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn forward_same_seed_bitwise_identical() {
        let run = || {
            let mut g = graph();
            let x = g.constant(Tensor2D::row_vec(vec![0.5, 1.5, -0.5, 2.0]));
            let mut rng = crate::rng::stream(9, &[crate::rng::tags::DROPOUT, 0]);
            let d = g.dropout(x, 0.5, &mut rng).unwrap();
            let s = g.softmax(d);
            g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unfold_stride2_shapes() {
        // kernel 3, stride 2, pad 1: T -> ceil(T/2)
        for t_in in [4usize, 5, 8, 9] {
            let mut g = graph();
            let x = g.constant(Tensor2D::zeros(t_in, 3));
            let y = g.unfold(x, 3, 2, 1).unwrap();
            assert_eq!(g.value(y).rows(), t_in.div_ceil(2), "T={t_in}");
        }
    }
}
