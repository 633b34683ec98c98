//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Graph` is an append-only tape: nodes are recorded in topological order
//! as ops are applied, forward values are computed eagerly, and `backward`
//! walks the tape in reverse. Parameter leaves are tagged with stable string
//! paths so gradients can be returned as a path -> tensor map.
//!
//! Broadcasting is deliberately limited to adding a row vector to the rows of
//! a matrix (`add_row`); anything richer is a caller bug and errors out.

use std::collections::BTreeMap;

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Fill value for masked logit positions, applied before softmax.
pub const MASK_FILL: f64 = -1e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Neg(usize),
    Gelu(usize),
    LogSoftmax { x: usize, axis: usize },
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    GatherRows { table: usize, ids: Vec<usize> },
    GatherElems { x: usize, idx: Vec<usize> },
    MaskedFill { x: usize, mask: Vec<bool> },
    SliceCols { x: usize, start: usize, width: usize },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    LogSumExp(usize),
    StackScalars(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter path. Every registered parameter is present;
/// parameters not on the path to the loss map to zero tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
    frozen: std::collections::BTreeSet<String>,
}

// plain tensor helpers used by forward and backward
fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn transpose_t(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).unwrap()
}

/// Index lists for each 1-D lane of `shape` along `axis`.
fn lanes(shape: &[usize], axis: usize) -> Result<Vec<Vec<usize>>> {
    match (shape.len(), axis) {
        (1, 0) => Ok(vec![(0..shape[0]).collect()]),
        (2, 1) => {
            let (r, c) = (shape[0], shape[1]);
            Ok((0..r).map(|i| (i * c..i * c + c).collect()).collect())
        }
        (2, 0) => {
            let (r, c) = (shape[0], shape[1]);
            Ok((0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect())
        }
        _ => Err(TensorError::InvalidAxis {
            axis,
            shape: shape.to_vec(),
        }),
    }
}

fn logsumexp_slice(vals: &[f64]) -> f64 {
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Register a parameter leaf. Re-registering the same path returns the
    /// existing node (the tensor argument is ignored), so one graph can host
    /// several forward passes over shared parameters.
    pub fn param(&mut self, path: &str, value: Tensor) -> Result<NodeId> {
        if let Some(&id) = self.params.get(path) {
            if self.frozen.contains(path) {
                return Err(TensorError::Invalid(format!(
                    "parameter {path} already registered as frozen"
                )));
            }
            return Ok(NodeId(id));
        }
        let id = self.push(value, Op::Leaf)?;
        self.params.insert(path.to_string(), id.0);
        Ok(id)
    }

    /// Register a frozen leaf: shared by path like a parameter, but excluded
    /// from gradient output (no gradient flows to it).
    pub fn frozen_param(&mut self, path: &str, value: Tensor) -> Result<NodeId> {
        if let Some(&id) = self.params.get(path) {
            if !self.frozen.contains(path) {
                return Err(TensorError::Invalid(format!(
                    "parameter {path} already registered as trainable"
                )));
            }
            return Ok(NodeId(id));
        }
        let id = self.push(value, Op::Leaf)?;
        self.params.insert(path.to_string(), id.0);
        self.frozen.insert(path.to_string());
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.rows() {
            return Err(TensorError::MatmulDims(
                ta.shape().to_vec(),
                tb.shape().to_vec(),
            ));
        }
        let v = mm(ta, tb);
        self.push(v, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects 2-D, got {:?}",
                t.shape()
            )));
        }
        let v = transpose_t(t);
        self.push(v, Op::Transpose(x.0))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, f: fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch(
                ta.shape().to_vec(),
                tb.shape().to_vec(),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(v, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Matrix + row vector, broadcast over rows. The one supported broadcast.
    pub fn add_row(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let (tm, tv) = (self.value(mat), self.value(vec));
        if tm.ndim() != 2 || tv.ndim() != 1 || tm.cols() != tv.numel() {
            return Err(TensorError::ShapeMismatch(
                tm.shape().to_vec(),
                tv.shape().to_vec(),
            ));
        }
        let c = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tv.data()[i % c])
            .collect();
        let v = Tensor::new(tm.shape().to_vec(), data)?;
        self.push(v, Op::AddRow(mat.0, vec.0))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(x);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|a| a * c).collect())?;
        self.push(v, Op::Scale(x.0, c))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|a| -a).collect())?;
        self.push(v, Op::Neg(x.0))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Gelu(x.0))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        let ls = lanes(t.shape(), axis)?;
        if ls.iter().any(|l| l.is_empty()) {
            return Err(TensorError::EmptyAxis(format!(
                "log_softmax over empty axis {} of {:?}",
                axis,
                t.shape()
            )));
        }
        let mut out = vec![0.0; t.numel()];
        for lane in &ls {
            let vals: Vec<f64> = lane.iter().map(|&i| t.data()[i]).collect();
            let lse = logsumexp_slice(&vals);
            for (k, &i) in lane.iter().enumerate() {
                out[i] = vals[k] - lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::LogSoftmax { x: x.0, axis })
    }

    /// Row-wise softmax of a 2-D tensor (used for attention probabilities).
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.ndim() != 2 || t.cols() == 0 {
            return Err(TensorError::EmptyAxis(format!(
                "softmax_rows over {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let lse = logsumexp_slice(row);
            for j in 0..c {
                out[i * c + j] = (row[j] - lse).exp();
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        self.push(v, Op::SoftmaxRows(x.0))
    }

    /// Layer normalization over the last axis, 1/n variance convention.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(x);
        let last = match t.ndim() {
            1 => t.shape()[0],
            2 => t.cols(),
            _ => {
                return Err(TensorError::Invalid(format!(
                    "layer_norm expects 1-D or 2-D, got {:?}",
                    t.shape()
                )))
            }
        };
        if last == 0 {
            return Err(TensorError::EmptyAxis("layer_norm over empty last axis".into()));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != last || tb.numel() != last {
            return Err(TensorError::ShapeMismatch(
                tg.shape().to_vec(),
                vec![last],
            ));
        }
        let axis = t.ndim() - 1;
        let ls = lanes(t.shape(), axis)?;
        let mut out = vec![0.0; t.numel()];
        for lane in &ls {
            let n = lane.len() as f64;
            let mean = lane.iter().map(|&i| t.data()[i]).sum::<f64>() / n;
            let var = lane
                .iter()
                .map(|&i| (t.data()[i] - mean).powi(2))
                .sum::<f64>()
                / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (k, &i) in lane.iter().enumerate() {
                let xhat = (t.data()[i] - mean) * inv;
                out[i] = xhat * tg.data()[k] + tb.data()[k];
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    /// Embedding lookup: select rows of `table` by id.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(TensorError::Invalid("gather_rows expects a 2-D table".into()));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfBounds {
                    index: id,
                    len: r,
                    context: "gather_rows".into(),
                });
            }
            out.extend_from_slice(&t.data()[id * c..(id + 1) * c]);
        }
        let v = Tensor::new(vec![ids.len(), c], out)?;
        self.push(
            v,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Select scalars from a tensor by flat index, producing a vector.
    pub fn gather_elems(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= t.numel() {
                return Err(TensorError::IndexOutOfBounds {
                    index: i,
                    len: t.numel(),
                    context: "gather_elems".into(),
                });
            }
            out.push(t.data()[i]);
        }
        let v = Tensor::vector(out);
        self.push(
            v,
            Op::GatherElems {
                x: x.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Write `MASK_FILL` into positions where `mask` is true.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(TensorError::ShapeMismatch(
                t.shape().to_vec(),
                vec![mask.len()],
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { MASK_FILL } else { v })
            .collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(
            v,
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.ndim() != 2 || start + width > t.cols() {
            return Err(TensorError::Invalid(format!(
                "slice_cols {}..{} of {:?}",
                start,
                start + width,
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + width]);
        }
        let v = Tensor::new(vec![r, width], out)?;
        self.push(
            v,
            Op::SliceCols {
                x: x.0,
                start,
                width,
            },
        )
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::Invalid("concat_cols of nothing".into()));
        }
        let r = self.value(xs[0]).rows();
        if xs.iter().any(|&x| self.value(x).ndim() != 2 || self.value(x).rows() != r) {
            return Err(TensorError::Invalid("concat_cols row mismatch".into()));
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let t = self.value(x);
                let c = t.cols();
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(vec![r, total], out)?;
        self.push(v, Op::ConcatCols(xs.iter().map(|x| x.0).collect()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        self.push(v, Op::Reshape(x.0))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::EmptyAxis("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(v, Op::Mean(x.0))
    }

    /// Stabilized log-sum-exp of a 1-D tensor, producing a scalar.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.ndim() != 1 || t.numel() == 0 {
            return Err(TensorError::EmptyAxis("logsumexp expects a non-empty vector".into()));
        }
        let v = Tensor::scalar(logsumexp_slice(t.data()));
        self.push(v, Op::LogSumExp(x.0))
    }

    /// Stack scalar nodes into a vector.
    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::Invalid("stack_scalars of nothing".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if !t.is_scalar() {
                return Err(TensorError::Invalid("stack_scalars expects scalar nodes".into()));
            }
            out.push(t.item());
        }
        let v = Tensor::vector(out);
        self.push(v, Op::StackScalars(xs.iter().map(|x| x.0).collect()))
    }

    /// Reverse-mode gradients of a scalar loss w.r.t. every parameter leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::Invalid(format!(
                "backward expects a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut map = BTreeMap::new();
        for (path, &idx) in &self.params {
            if self.frozen.contains(path) {
                continue;
            }
            let g = grads[idx]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape()));
            map.insert(path.clone(), g);
        }
        Ok(Gradients { map })
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |idx: usize, delta: Tensor| {
            match &mut grads[idx] {
                Some(existing) => {
                    let d = delta.data();
                    for (e, x) in existing.data_mut().iter_mut().zip(d) {
                        *e += x;
                    }
                }
                slot => *slot = Some(delta),
            };
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                acc(*a, mm(g, &transpose_t(tb)));
                acc(*b, mm(&transpose_t(ta), g));
            }
            Op::Transpose(x) => acc(*x, transpose_t(g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect()).unwrap();
                acc(*b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddRow(mat, vec) => {
                acc(*mat, g.clone());
                let c = self.nodes[*vec].value.numel();
                let mut dv = vec![0.0; c];
                for (k, v) in g.data().iter().enumerate() {
                    dv[k % c] += v;
                }
                acc(*vec, Tensor::vector(dv));
            }
            Op::Scale(x, c) => {
                let d = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * c).collect()).unwrap();
                acc(*x, d);
            }
            Op::Neg(x) => {
                let d = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect()).unwrap();
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let tx = &self.nodes[*x].value;
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                )
                .unwrap();
                acc(*x, d);
            }
            Op::LogSoftmax { x, axis } => {
                // dx = g - exp(y) * sum_lane(g)
                let y = &node.value;
                let ls = lanes(y.shape(), *axis).unwrap();
                let mut dx = vec![0.0; y.numel()];
                for lane in &ls {
                    let gsum: f64 = lane.iter().map(|&i| g.data()[i]).sum();
                    for &i in lane {
                        dx[i] = g.data()[i] - y.data()[i].exp() * gsum;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::SoftmaxRows(x) => {
                // dx = y * (g - sum_row(g*y))
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c)
                        .map(|j| g.data()[i * c + j] * y.data()[i * c + j])
                        .sum();
                    for j in 0..c {
                        let idx = i * c + j;
                        dx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gain].value;
                let axis = tx.ndim() - 1;
                let ls = lanes(tx.shape(), axis).unwrap();
                let n = ls[0].len();
                let mut dx = vec![0.0; tx.numel()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for lane in &ls {
                    let nf = n as f64;
                    let mean = lane.iter().map(|&i| tx.data()[i]).sum::<f64>() / nf;
                    let var = lane
                        .iter()
                        .map(|&i| (tx.data()[i] - mean).powi(2))
                        .sum::<f64>()
                        / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = lane.iter().map(|&i| (tx.data()[i] - mean) * inv).collect();
                    let dxhat: Vec<f64> = lane
                        .iter()
                        .enumerate()
                        .map(|(k, &i)| g.data()[i] * tg.data()[k])
                        .collect();
                    let m1 = dxhat.iter().sum::<f64>() / nf;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for (k, &i) in lane.iter().enumerate() {
                        dx[i] = inv * (dxhat[k] - m1 - xhat[k] * m2);
                        dgain[k] += g.data()[i] * xhat[k];
                        dbias[k] += g.data()[i];
                    }
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
                acc(*gain, Tensor::vector(dgain));
                acc(*bias, Tensor::vector(dbias));
            }
            Op::GatherRows { table, ids } => {
                let tt = &self.nodes[*table].value;
                let c = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*table, Tensor::new(tt.shape().to_vec(), dt).unwrap());
            }
            Op::GatherElems { x, idx } => {
                let tx = &self.nodes[*x].value;
                let mut dx = vec![0.0; tx.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] += g.data()[k];
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::MaskedFill { x, mask } => {
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(mask)
                        .map(|(&v, &m)| if m { 0.0 } else { v })
                        .collect(),
                )
                .unwrap();
                acc(*x, d);
            }
            Op::SliceCols { x, start, width } => {
                let tx = &self.nodes[*x].value;
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*width {
                        dx[i * c + start + j] = g.data()[i * width + j];
                    }
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &x in xs {
                    let c = self.nodes[x].value.cols();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g.data()[i * total + offset + j];
                        }
                    }
                    acc(x, Tensor::new(vec![r, c], dx).unwrap());
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                acc(*x, Tensor::new(shape, g.data().to_vec()).unwrap());
            }
            Op::Sum(x) => {
                let tx = &self.nodes[*x].value;
                acc(*x, Tensor::full(tx.shape(), g.item()));
            }
            Op::Mean(x) => {
                let tx = &self.nodes[*x].value;
                acc(*x, Tensor::full(tx.shape(), g.item() / tx.numel() as f64));
            }
            Op::LogSumExp(x) => {
                let tx = &self.nodes[*x].value;
                let lse = node.value.item();
                let d: Vec<f64> = tx.data().iter().map(|&v| g.item() * (v - lse).exp()).collect();
                acc(*x, Tensor::vector(d));
            }
            Op::StackScalars(xs) => {
                for (k, &x) in xs.iter().enumerate() {
                    acc(x, Tensor::scalar(g.data()[k]));
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Neg(..) => "neg",
        Op::Gelu(..) => "gelu",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::GatherRows { .. } => "gather_rows",
        Op::GatherElems { .. } => "gather_elems",
        Op::MaskedFill { .. } => "masked_fill",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::LogSumExp(..) => "logsumexp",
        Op::StackScalars(..) => "stack_scalars",
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Central finite-difference gradient check.
///
/// `build` constructs the scalar loss for a given parameter assignment; the
/// analytic gradient from `backward` is compared against
/// `(f(p+h) - f(p-h)) / 2h` per scalar parameter. Returns the maximum
/// relative error `|a-b| / max(1e-8, |a|+|b|)`.
pub fn grad_check<F>(build: F, params: &BTreeMap<String, Tensor>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &BTreeMap<String, Tensor>) -> Result<NodeId>,
{
    assert!(h > 0.0);
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        let t = g.value(loss);
        if !t.is_scalar() {
            return Err(TensorError::Invalid("grad_check loss is not scalar".into()));
        }
        t.check_finite("grad_check loss")?;
        Ok(t.item())
    };

    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.value(loss).check_finite("grad_check loss")?;
    let analytic = g.backward(loss)?;

    let mut max_rel = 0.0f64;
    for (path, tensor) in params {
        let an = analytic.get(path).ok_or_else(|| {
            TensorError::Invalid(format!("parameter {path} missing from gradients"))
        })?;
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(path).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(path).unwrap().data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = an.data()[i];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
