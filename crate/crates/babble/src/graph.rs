//! Reverse-mode automatic differentiation over a flat tape of dense tensors.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Operations
//! append nodes in topological order and return [`NodeId`] handles; calling
//! [`Graph::backward`] on a scalar loss walks the tape once in reverse and
//! deposits gradients on every node that requires them. A graph is consumed
//! by backward and cannot be differentiated twice.

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug)]
enum Op {
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Conv1d { x: NodeId, w: NodeId, stride: usize, groups: usize, pad_left: usize },
    Exp(NodeId),
    Log(NodeId),
    Gelu(NodeId),
    Softmax { x: NodeId, axis: usize },
    LogSumExpRows(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Dropout { x: NodeId, mult: Vec<f64> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    ScatterAddRows { x: NodeId, idx: Vec<usize> },
    CosSimRows { a: NodeId, b: NodeId, na: Vec<f64>, nb: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
    Max { x: NodeId, arg: usize },
    Scale { x: NodeId, c: f64 },
    AddConst(NodeId),
    MulConst { x: NodeId, mult: Vec<f64> },
    AddRow { x: NodeId, row: NodeId },
    MulRow { x: NodeId, row: NodeId },
    AddCol { x: NodeId, col: NodeId },
    MulCol { x: NodeId, col: NodeId },
    Transpose(NodeId),
    Reshape(NodeId),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    Concat1d { parts: Vec<NodeId> },
    StraightThrough(NodeId),
    GradScale { x: NodeId, gamma: f64 },
    MeanAxis0(NodeId),
    XLogX(NodeId),
    PrecomputedGrad { x: NodeId, grad: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Option<Op>,
}

/// Tape of operation records in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node. Honors `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        assert!(tensor.is_finite(), "leaf tensor holds non-finite values");
        self.nodes.push(Node { tensor, op: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a constant (no gradient) leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient deposited by `backward`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !tensor.is_finite() {
            return Err(Error::Numeric {
                node: self.nodes.len(),
                msg: "non-finite values in op output".into(),
            });
        }
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.nodes.push(Node { tensor, op: Some(op) });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    // ── elementwise and broadcast arithmetic ──

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dim(format!("add: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dim(format!("mul: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dim(format!("div: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Add a constant tensor (no gradient flows to it).
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape != c.shape {
            return Err(Error::Dim(format!("add_const: {:?} vs {:?}", tx.shape, c.shape)));
        }
        let data = tx.data.iter().zip(&c.data).map(|(a, b)| a + b).collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::AddConst(x), rg)
    }

    /// Multiply elementwise by a constant tensor (no gradient flows to it).
    pub fn mul_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape != c.shape {
            return Err(Error::Dim(format!("mul_const: {:?} vs {:?}", tx.shape, c.shape)));
        }
        let data: Vec<f64> = tx.data.iter().zip(&c.data).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::MulConst { x, mult: c.data.clone() }, rg)
    }

    /// `x[r, c] + row[c]` for a rank-2 x and rank-1 row.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tx.rank() != 2 || tr.rank() != 1 || tx.shape[1] != tr.shape[0] {
            return Err(Error::Dim(format!("add_row: {:?} vs {:?}", tx.shape, tr.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += tr.data[c];
            }
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = self.requires(x) || self.requires(row);
        self.push(t, Op::AddRow { x, row }, rg)
    }

    /// `x[r, c] * row[c]`.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tx.rank() != 2 || tr.rank() != 1 || tx.shape[1] != tr.shape[0] {
            return Err(Error::Dim(format!("mul_row: {:?} vs {:?}", tx.shape, tr.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] *= tr.data[c];
            }
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = self.requires(x) || self.requires(row);
        self.push(t, Op::MulRow { x, row }, rg)
    }

    /// `x[r, c] + col[r]`.
    pub fn add_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (tx, tc) = (self.value(x), self.value(col));
        if tx.rank() != 2 || tc.rank() != 1 || tx.shape[0] != tc.shape[0] {
            return Err(Error::Dim(format!("add_col: {:?} vs {:?}", tx.shape, tc.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += tc.data[r];
            }
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = self.requires(x) || self.requires(col);
        self.push(t, Op::AddCol { x, col }, rg)
    }

    /// `x[r, c] * col[r]`.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (tx, tc) = (self.value(x), self.value(col));
        if tx.rank() != 2 || tc.rank() != 1 || tx.shape[0] != tc.shape[0] {
            return Err(Error::Dim(format!("mul_col: {:?} vs {:?}", tx.shape, tc.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] *= tc.data[r];
            }
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = self.requires(x) || self.requires(col);
        self.push(t, Op::MulCol { x, col }, rg)
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Dim(format!("matmul: {:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], data);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Matmul(a, b), rg)
    }

    /// Grouped 1-d convolution over `x: [C_in, L]` with `w: [C_out, C_in/groups, K]`.
    /// Zero padding is applied on the time axis before striding.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        groups: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<NodeId> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 3 {
            return Err(Error::Dim(format!("conv1d: x {:?}, w {:?}", tx.shape, tw.shape)));
        }
        let (c_in, l_in) = (tx.shape[0], tx.shape[1]);
        let (c_out, cin_g, k) = (tw.shape[0], tw.shape[1], tw.shape[2]);
        if stride == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Dim(format!(
                "conv1d: groups {} incompatible with channels {}->{}",
                groups, c_in, c_out
            )));
        }
        if cin_g != c_in / groups {
            return Err(Error::Dim(format!(
                "conv1d: weight expects {} input channels per group, got {}",
                cin_g,
                c_in / groups
            )));
        }
        let l_pad = l_in + pad_left + pad_right;
        if l_pad < k {
            return Err(Error::Dim(format!("conv1d: padded length {} < kernel {}", l_pad, k)));
        }
        let l_out = (l_pad - k) / stride + 1;
        let cout_g = c_out / groups;
        let mut data = vec![0.0; c_out * l_out];
        for o in 0..c_out {
            let grp = o / cout_g;
            for t in 0..l_out {
                let base = (t * stride) as isize - pad_left as isize;
                let mut acc = 0.0;
                for cl in 0..cin_g {
                    let ci = grp * cin_g + cl;
                    for kk in 0..k {
                        let j = base + kk as isize;
                        if j >= 0 && (j as usize) < l_in {
                            acc += tx.data[ci * l_in + j as usize] * tw.data[(o * cin_g + cl) * k + kk];
                        }
                    }
                }
                data[o * l_out + t] = acc;
            }
        }
        let t = Tensor::new(vec![c_out, l_out], data);
        let rg = self.requires(x) || self.requires(w);
        self.push(t, Op::Conv1d { x, w, stride, groups, pad_left }, rg)
    }

    // ── pointwise nonlinearities ──

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|v| v.exp()).collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|v| v.ln()).collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::Log(x), rg)
    }

    /// GELU through its tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|v| gelu_val(*v)).collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// `x * ln(x)` with the convention that 0 maps to 0.
    pub fn xlogx(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx
            .data
            .iter()
            .map(|v| if *v > 0.0 { v * v.ln() } else { 0.0 })
            .collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::XLogX(x), rg)
    }

    // ── normalization and probability ──

    /// Softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        match tx.rank() {
            1 => {
                if axis != 0 {
                    return Err(Error::Dim(format!("softmax: axis {} on rank-1 tensor", axis)));
                }
                let data = softmax_lane(&tx.data);
                let t = Tensor::new(tx.shape.clone(), data);
                let rg = self.requires(x);
                self.push(t, Op::Softmax { x, axis }, rg)
            }
            2 => {
                if axis > 1 {
                    return Err(Error::Dim(format!("softmax: axis {} on rank-2 tensor", axis)));
                }
                let (n, d) = (tx.shape[0], tx.shape[1]);
                let mut data = vec![0.0; n * d];
                if axis == 1 {
                    for r in 0..n {
                        let lane = softmax_lane(&tx.data[r * d..(r + 1) * d]);
                        data[r * d..(r + 1) * d].copy_from_slice(&lane);
                    }
                } else {
                    for c in 0..d {
                        let col: Vec<f64> = (0..n).map(|r| tx.data[r * d + c]).collect();
                        let lane = softmax_lane(&col);
                        for r in 0..n {
                            data[r * d + c] = lane[r];
                        }
                    }
                }
                let t = Tensor::new(vec![n, d], data);
                let rg = self.requires(x);
                self.push(t, Op::Softmax { x, axis }, rg)
            }
            r => Err(Error::Dim(format!("softmax: unsupported rank {}", r))),
        }
    }

    /// Row-wise log-sum-exp of a rank-2 tensor, shape `[N, M] -> [N]`.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dim(format!("logsumexp_rows: {:?}", tx.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let data: Vec<f64> = (0..n).map(|r| logsumexp(&tx.data[r * d..(r + 1) * d])).collect();
        let t = Tensor::new(vec![n], data);
        let rg = self.requires(x);
        self.push(t, Op::LogSumExpRows(x), rg)
    }

    /// Per-row standardization of a rank-2 tensor: `(x - mean) / sqrt(var + eps)`.
    /// Affine terms are composed externally with `mul_row`/`add_row`.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dim(format!("layer_norm: {:?}", tx.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        if d == 0 {
            return Err(Error::Dim("layer_norm: empty rows".into()));
        }
        let mut data = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                data[r * d + c] = (row[c] - mean) * inv;
            }
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = self.requires(x);
        self.push(t, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Inverted dropout: at train time keeps each element with probability
    /// `1 - rate` and scales survivors by `1/(1 - rate)`; identity at eval.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, train: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {} outside [0, 1)", rate)));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let tx = self.value(x);
        let mult: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = tx.data.iter().zip(&mult).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let rg = self.requires(x);
        self.push(t, Op::Dropout { x, mult }, rg)
    }

    // ── gather / scatter ──

    /// Rows of `x` selected by `idx`: out[i] = x[idx[i]].
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dim(format!("gather_rows: {:?}", tx.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(Error::Dim(format!("gather_rows: index {} out of {} rows", bad, n)));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&tx.data[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], data);
        let rg = self.requires(x);
        self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    /// Accumulate rows of `x` into `out_rows` buckets: out[idx[i]] += x[i].
    pub fn scatter_add_rows(&mut self, x: NodeId, idx: &[usize], out_rows: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 || idx.len() != tx.shape[0] {
            return Err(Error::Dim(format!(
                "scatter_add_rows: {:?} with {} indices",
                tx.shape,
                idx.len()
            )));
        }
        let d = tx.shape[1];
        if let Some(bad) = idx.iter().find(|i| **i >= out_rows) {
            return Err(Error::Dim(format!("scatter_add_rows: index {} out of {} rows", bad, out_rows)));
        }
        let mut data = vec![0.0; out_rows * d];
        for (i, &dst) in idx.iter().enumerate() {
            for c in 0..d {
                data[dst * d + c] += tx.data[i * d + c];
            }
        }
        let t = Tensor::new(vec![out_rows, d], data);
        let rg = self.requires(x);
        self.push(t, Op::ScatterAddRows { x, idx: idx.to_vec() }, rg)
    }

    /// Row-wise cosine similarity of two equal-shape rank-2 tensors.
    pub fn cos_sim_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || ta.shape != tb.shape {
            return Err(Error::Dim(format!("cos_sim_rows: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let (n, d) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; n];
        let mut na = vec![0.0; n];
        let mut nb = vec![0.0; n];
        for r in 0..n {
            let (ra, rb) = (&ta.data[r * d..(r + 1) * d], &tb.data[r * d..(r + 1) * d]);
            let (mut dot, mut qa, mut qb) = (0.0, 0.0, 0.0);
            for c in 0..d {
                dot += ra[c] * rb[c];
                qa += ra[c] * ra[c];
                qb += rb[c] * rb[c];
            }
            if qa == 0.0 || qb == 0.0 {
                return Err(Error::Numeric {
                    node: self.nodes.len(),
                    msg: format!("zero-norm vector in cosine similarity at row {}", r),
                });
            }
            na[r] = qa.sqrt();
            nb[r] = qb.sqrt();
            data[r] = dot / (na[r] * nb[r]);
        }
        let t = Tensor::new(vec![n], data);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::CosSimRows { a, b, na, nb }, rg)
    }

    // ── reductions ──

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.data.iter().sum());
        let rg = self.requires(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::Dim("mean of empty tensor".into()));
        }
        let t = Tensor::scalar(tx.data.iter().sum::<f64>() / tx.numel() as f64);
        let rg = self.requires(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Global maximum; the gradient routes to the first attaining element.
    pub fn max(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::Dim("max of empty tensor".into()));
        }
        let arg = argmax(&tx.data);
        let t = Tensor::scalar(tx.data[arg]);
        let rg = self.requires(x);
        self.push(t, Op::Max { x, arg }, rg)
    }

    /// Index of the global maximum as a non-differentiable scalar tensor.
    pub fn argmax_reduce(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::Dim("argmax of empty tensor".into()));
        }
        let t = Tensor::scalar(argmax(&tx.data) as f64);
        self.push(t, Op::AddConst(x), false)
    }

    /// Column means of a rank-2 tensor, shape `[N, d] -> [d]`.
    pub fn mean_axis0(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape[0] == 0 {
            return Err(Error::Dim(format!("mean_axis0: {:?}", tx.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                data[c] += tx.data[r * d + c];
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let t = Tensor::new(vec![d], data);
        let rg = self.requires(x);
        self.push(t, Op::MeanAxis0(x), rg)
    }

    // ── shape plumbing ──

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dim(format!("transpose: {:?}", tx.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[c * n + r] = tx.data[r * d + c];
            }
        }
        let t = Tensor::new(vec![d, n], data);
        let rg = self.requires(x);
        self.push(t, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::Dim(format!("reshape: {:?} -> {:?}", tx.shape, shape)));
        }
        let t = Tensor::new(shape.to_vec(), tx.data.clone());
        let rg = self.requires(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.shape[0] {
            return Err(Error::Dim(format!("slice_rows: [{}, {}) of {:?}", start, start + len, tx.shape)));
        }
        let d = tx.shape[1];
        let data = tx.data[start * d..(start + len) * d].to_vec();
        let t = Tensor::new(vec![len, d], data);
        let rg = self.requires(x);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.shape[1] {
            return Err(Error::Dim(format!("slice_cols: [{}, {}) of {:?}", start, start + len, tx.shape)));
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&tx.data[r * d + start..r * d + start + len]);
        }
        let t = Tensor::new(vec![n, len], data);
        let rg = self.requires(x);
        self.push(t, Op::SliceCols { x, start }, rg)
    }

    /// Stack rank-2 (or rank-1, read as single-row) parts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: no parts".into()));
        }
        let d = match self.shape(parts[0]) {
            [_, d] => *d,
            [d] => *d,
            s => return Err(Error::Dim(format!("concat_rows: bad part shape {:?}", s))),
        };
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let tp = self.value(p);
            let (rows, cols) = match tp.shape.as_slice() {
                [r, c] => (*r, *c),
                [c] => (1, *c),
                s => return Err(Error::Dim(format!("concat_rows: bad part shape {:?}", s))),
            };
            if cols != d {
                return Err(Error::Dim(format!("concat_rows: width {} vs {}", cols, d)));
            }
            data.extend_from_slice(&tp.data);
            n += rows;
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Stack rank-2 parts horizontally.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: no parts".into()));
        }
        let n = match self.shape(parts[0]) {
            [n, _] => *n,
            s => return Err(Error::Dim(format!("concat_cols: bad part shape {:?}", s))),
        };
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 2 || tp.shape[0] != n {
                return Err(Error::Dim(format!("concat_cols: part {:?} vs {} rows", tp.shape, n)));
            }
            widths.push(tp.shape[1]);
            total += tp.shape[1];
        }
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let tp = &self.nodes[p.0].tensor;
            let w = widths[pi];
            for r in 0..n {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&tp.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![n, total], data);
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(t, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    /// Concatenate scalar or rank-1 parts into one vector.
    pub fn concat1d(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat1d: no parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() > 1 {
                return Err(Error::Dim(format!("concat1d: part rank {}", tp.rank())));
            }
            data.extend_from_slice(&tp.data);
        }
        let t = Tensor::vector(data);
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(t, Op::Concat1d { parts: parts.to_vec() }, rg)
    }

    // ── estimator plumbing ──

    /// Hard row-wise one-hot of the argmax with an identity backward pass,
    /// so gradients flow as if the soft input had been used directly.
    pub fn straight_through_rows(&mut self, soft: NodeId) -> Result<NodeId> {
        let ts = self.value(soft);
        if ts.rank() != 2 {
            return Err(Error::Dim(format!("straight_through_rows: {:?}", ts.shape)));
        }
        let (n, d) = (ts.shape[0], ts.shape[1]);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let a = argmax(&ts.data[r * d..(r + 1) * d]);
            data[r * d + a] = 1.0;
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = self.requires(soft);
        self.push(t, Op::StraightThrough(soft), rg)
    }

    /// Identity forward; backward multiplies the incoming gradient by `gamma`.
    pub fn grad_scale(&mut self, x: NodeId, gamma: f64) -> Result<NodeId> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape.clone(), tx.data.clone());
        let rg = self.requires(x);
        self.push(t, Op::GradScale { x, gamma }, rg)
    }

    /// Detach: a constant copy of the node's value.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Scalar node carrying a loss whose gradient w.r.t. `x` was computed
    /// out-of-band (used by losses with their own forward-backward pass).
    pub(crate) fn precomputed_loss(&mut self, x: NodeId, loss: f64, grad: Vec<f64>) -> Result<NodeId> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::Dim("precomputed_loss: gradient length mismatch".into()));
        }
        let rg = self.requires(x);
        self.push(Tensor::scalar(loss), Op::PrecomputedGrad { x, grad }, rg)
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Populates `grad` on every node that
    /// requires gradients and consumes the graph: a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("graph already consumed by backward".into()));
        }
        self.consumed = true;
        let lt = &self.nodes[loss.0].tensor;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lt.shape)));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tensor.requires_grad {
                continue;
            }
            self.nodes[id].tensor.grad = Some(g.clone());
            let Some(op) = self.nodes[id].op.take() else { continue };
            self.vjp(&op, id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.requires(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].tensor.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn vjp(&self, op: &Op, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let outv = &self.nodes[out].tensor;
        match op {
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g, 1.0));
                self.acc(grads, *b, |d| add_into(d, g, 1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                self.acc(grads, *a, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * tb.data[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * ta.data[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                self.acc(grads, *a, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] / tb.data[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..g.len() {
                        d[i] -= g[i] * ta.data[i] / (tb.data[i] * tb.data[i]);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                self.acc(grads, *a, |d| {
                    // dA = g @ B^T
                    for i in 0..m {
                        for j in 0..n {
                            let gi = g[i * n + j];
                            if gi == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                d[i * k + p] += gi * tb.data[p * n + j];
                            }
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    // dB = A^T @ g
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                d[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, stride, groups, pad_left } => {
                let (tx, tw) = (&self.nodes[x.0].tensor, &self.nodes[w.0].tensor);
                let (_c_in, l_in) = (tx.shape[0], tx.shape[1]);
                let (c_out, cin_g, k) = (tw.shape[0], tw.shape[1], tw.shape[2]);
                let l_out = outv.shape[1];
                let cout_g = c_out / groups;
                self.acc(grads, *x, |d| {
                    for o in 0..c_out {
                        let grp = o / cout_g;
                        for t in 0..l_out {
                            let gv = g[o * l_out + t];
                            if gv == 0.0 {
                                continue;
                            }
                            let base = (t * stride) as isize - *pad_left as isize;
                            for cl in 0..cin_g {
                                let ci = grp * cin_g + cl;
                                for kk in 0..k {
                                    let j = base + kk as isize;
                                    if j >= 0 && (j as usize) < l_in {
                                        d[ci * l_in + j as usize] += gv * tw.data[(o * cin_g + cl) * k + kk];
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *w, |d| {
                    for o in 0..c_out {
                        let grp = o / cout_g;
                        for t in 0..l_out {
                            let gv = g[o * l_out + t];
                            if gv == 0.0 {
                                continue;
                            }
                            let base = (t * stride) as isize - *pad_left as isize;
                            for cl in 0..cin_g {
                                let ci = grp * cin_g + cl;
                                for kk in 0..k {
                                    let j = base + kk as isize;
                                    if j >= 0 && (j as usize) < l_in {
                                        d[(o * cin_g + cl) * k + kk] += gv * tx.data[ci * l_in + j as usize];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Exp(x) => {
                self.acc(grads, *x, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * outv.data[i];
                    }
                });
            }
            Op::Log(x) => {
                let tx = &self.nodes[x.0].tensor;
                self.acc(grads, *x, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] / tx.data[i];
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = &self.nodes[x.0].tensor;
                self.acc(grads, *x, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * gelu_grad(tx.data[i]);
                    }
                });
            }
            Op::XLogX(x) => {
                let tx = &self.nodes[x.0].tensor;
                self.acc(grads, *x, |d| {
                    for i in 0..g.len() {
                        if tx.data[i] > 0.0 {
                            d[i] += g[i] * (tx.data[i].ln() + 1.0);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = outv;
                let shape = &y.shape;
                self.acc(grads, *x, |d| match shape.len() {
                    1 => softmax_vjp_lane(&y.data, g, d, 0, 1, y.data.len()),
                    _ => {
                        let (n, m) = (shape[0], shape[1]);
                        if *axis == 1 {
                            for r in 0..n {
                                softmax_vjp_lane(&y.data, g, d, r * m, 1, m);
                            }
                        } else {
                            for c in 0..m {
                                softmax_vjp_lane(&y.data, g, d, c, m, n);
                            }
                        }
                    }
                });
            }
            Op::LogSumExpRows(x) => {
                let tx = &self.nodes[x.0].tensor;
                let (n, m) = (tx.shape[0], tx.shape[1]);
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[r * m + c] += g[r] * (tx.data[r * m + c] - outv.data[r]).exp();
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = outv;
                let (n, m) = (y.shape[0], y.shape[1]);
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        let yr = &y.data[r * m..(r + 1) * m];
                        let mg = gr.iter().sum::<f64>() / m as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for c in 0..m {
                            d[r * m + c] += inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                });
            }
            Op::Dropout { x, mult } | Op::MulConst { x, mult } => {
                self.acc(grads, *x, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * mult[i];
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d_cols = outv.shape[1];
                self.acc(grads, *x, |d| {
                    for (i, &src) in idx.iter().enumerate() {
                        for c in 0..d_cols {
                            d[src * d_cols + c] += g[i * d_cols + c];
                        }
                    }
                });
            }
            Op::ScatterAddRows { x, idx } => {
                let d_cols = outv.shape[1];
                self.acc(grads, *x, |d| {
                    for (i, &dst) in idx.iter().enumerate() {
                        for c in 0..d_cols {
                            d[i * d_cols + c] += g[dst * d_cols + c];
                        }
                    }
                });
            }
            Op::CosSimRows { a, b, na, nb } => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (n, m) = (ta.shape[0], ta.shape[1]);
                let s = &outv.data;
                self.acc(grads, *a, |d| {
                    for r in 0..n {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..m {
                            let av = ta.data[r * m + c];
                            let bv = tb.data[r * m + c];
                            d[r * m + c] += gr * (bv / (na[r] * nb[r]) - s[r] * av / (na[r] * na[r]));
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..n {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..m {
                            let av = ta.data[r * m + c];
                            let bv = tb.data[r * m + c];
                            d[r * m + c] += gr * (av / (na[r] * nb[r]) - s[r] * bv / (nb[r] * nb[r]));
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].tensor.numel() as f64;
                self.acc(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::Max { x, arg } => {
                self.acc(grads, *x, |d| d[*arg] += g[0]);
            }
            Op::Scale { x, c } => {
                self.acc(grads, *x, |d| add_into(d, g, *c));
            }
            Op::AddConst(x) => {
                self.acc(grads, *x, |d| add_into(d, g, 1.0));
            }
            Op::AddRow { x, row } => {
                let m = outv.shape[1];
                self.acc(grads, *x, |d| add_into(d, g, 1.0));
                self.acc(grads, *row, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % m] += gv;
                    }
                });
            }
            Op::MulRow { x, row } => {
                let (n, m) = (outv.shape[0], outv.shape[1]);
                let (tx, tr) = (&self.nodes[x.0].tensor, &self.nodes[row.0].tensor);
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[r * m + c] += g[r * m + c] * tr.data[c];
                        }
                    }
                });
                self.acc(grads, *row, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[c] += g[r * m + c] * tx.data[r * m + c];
                        }
                    }
                });
            }
            Op::AddCol { x, col } => {
                let m = outv.shape[1];
                self.acc(grads, *x, |d| add_into(d, g, 1.0));
                self.acc(grads, *col, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i / m] += gv;
                    }
                });
            }
            Op::MulCol { x, col } => {
                let (n, m) = (outv.shape[0], outv.shape[1]);
                let (tx, tc) = (&self.nodes[x.0].tensor, &self.nodes[col.0].tensor);
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[r * m + c] += g[r * m + c] * tc.data[r];
                        }
                    }
                });
                self.acc(grads, *col, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[r] += g[r * m + c] * tx.data[r * m + c];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (n, m) = (outv.shape[0], outv.shape[1]); // out is m-by-n of input
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[c * n + r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| add_into(d, g, 1.0));
            }
            Op::SliceRows { x, start } => {
                let m = outv.shape[1];
                let rows = outv.shape[0];
                self.acc(grads, *x, |d| {
                    for r in 0..rows {
                        for c in 0..m {
                            d[(start + r) * m + c] += g[r * m + c];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let full = self.nodes[x.0].tensor.shape[1];
                let (rows, m) = (outv.shape[0], outv.shape[1]);
                self.acc(grads, *x, |d| {
                    for r in 0..rows {
                        for c in 0..m {
                            d[r * full + start + c] += g[r * m + c];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let count = self.nodes[p.0].tensor.numel();
                    self.acc(grads, p, |d| {
                        for i in 0..count {
                            d[i] += g[off + i];
                        }
                    });
                    off += count;
                }
            }
            Op::ConcatCols { parts } => {
                let n = outv.shape[0];
                let total = outv.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].tensor.shape[1];
                    self.acc(grads, p, |d| {
                        for r in 0..n {
                            for c in 0..w {
                                d[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Concat1d { parts } => {
                let mut off = 0;
                for &p in parts {
                    let count = self.nodes[p.0].tensor.numel();
                    self.acc(grads, p, |d| {
                        for i in 0..count {
                            d[i] += g[off + i];
                        }
                    });
                    off += count;
                }
            }
            Op::StraightThrough(x) => {
                self.acc(grads, *x, |d| add_into(d, g, 1.0));
            }
            Op::GradScale { x, gamma } => {
                self.acc(grads, *x, |d| add_into(d, g, *gamma));
            }
            Op::MeanAxis0(x) => {
                let n = self.nodes[x.0].tensor.shape[0];
                let m = outv.shape[0];
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[r * m + c] += g[c] / n as f64;
                        }
                    }
                });
            }
            Op::PrecomputedGrad { x, grad } => {
                self.acc(grads, *x, |d| add_into(d, grad, g[0]));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn softmax_lane(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|v| v / z).collect()
}

/// Softmax VJP on a strided lane: dx = y * (g - dot(g, y)).
fn softmax_vjp_lane(y: &[f64], g: &[f64], dx: &mut [f64], start: usize, stride: usize, len: usize) {
    let mut dot = 0.0;
    for i in 0..len {
        let p = start + i * stride;
        dot += g[p] * y[p];
    }
    for i in 0..len {
        let p = start + i * stride;
        dx[p] += y[p] * (g[p] - dot);
    }
}

/// Numerically stable log(sum(exp(xs))).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// log(exp(a) + exp(b)) without overflow.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
