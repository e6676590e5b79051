use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tag of a recorded primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    Gelu,
    Softmax,
    LayerNorm,
    Gather,
    Dropout,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    Sum,
    Nll,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        src: NodeId,
        ids: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Nll {
        probs: NodeId,
        targets: Vec<usize>,
        clip: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Sum(_) => OpKind::Sum,
            Op::Nll { .. } => OpKind::Nll,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { src, .. } => vec![*src],
            Op::Dropout { x, .. } | Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::Nll { probs, .. } => vec![*probs],
        }
    }
}

/// One entry of the computation record: what ran, on which nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

struct Node {
    value: Tensor,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c (m x n) = beta * c + a (m x k) . b (k x n)` with arbitrary strides on a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Reverse-mode recorder. Every primitive appends a node; [`Tape::backward`]
/// replays the record in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    clipped: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately breaks the backward rule of one primitive (its input
    /// gradient is doubled). Only meant for negative-control checks.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Number of probabilities raised to the clip floor by `nll` so far.
    pub fn clipped_count(&self) -> usize {
        self.clipped
    }

    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Record {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: NodeId(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() > 2 || bv.shape().len() > 2 || av.cols() != bv.rows() {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), 0.0, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape().len() != 1 || bv.len() != av.cols() {
            return Err(self.mismatch("add_row", a, bias));
        }
        let n = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % n])
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(a))
    }

    /// Max-shifted softmax over each row.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(NumericsError::NonFiniteInput("softmax_rows"));
        }
        let n = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Row-wise standardization with population variance, then `gain * xhat + bias`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        if eps <= 0.0 {
            return Err(NumericsError::InvalidEpsilon(eps));
        }
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).shape() != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).shape() != [d] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of `src` by index; backward scatters into the selected rows only.
    pub fn gather_rows(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let sv = self.value(src);
        let rows = sv.rows();
        if ids.is_empty() {
            return Err(NumericsError::EmptySelection);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: rows });
        }
        let c = sv.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(sv.row(i));
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        Ok(self.push(
            t,
            Op::Gather {
                src,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(
        &mut self,
        table: NodeId,
        ids: &[usize],
    ) -> Result<NodeId, NumericsError> {
        self.gather_rows(table, ids)
    }

    /// Inverted dropout with a seeded, recorded mask. Identity when `train` is
    /// false or `p == 0`.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        seed: u64,
        train: bool,
    ) -> Result<NodeId, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidProbability(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptySelection)?;
        let c = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c || pv.shape().len() > 2 {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let t = Tensor::matrix(rows, c, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: xv.rows(),
            });
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptySelection)?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows || self.shape(p).len() > 2 {
                return Err(self.mismatch("concat_cols", first, p));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: xv.cols(),
            });
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(rows, len, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `sum_i -ln(max(probs[i, targets[i]], clip))` over the rows of a probability matrix.
    pub fn nll(
        &mut self,
        probs: NodeId,
        targets: &[usize],
        clip: f64,
    ) -> Result<NodeId, NumericsError> {
        let pv = self.value(probs);
        if pv.rows() != targets.len() {
            return Err(NumericsError::LengthMismatch {
                left: pv.rows(),
                right: targets.len(),
            });
        }
        let c = pv.cols();
        let mut total = 0.0;
        let mut clipped = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericsError::IndexOutOfRange { index: t, len: c });
            }
            let p = pv.get(r, t);
            if p < clip {
                clipped += 1;
            }
            total -= p.max(clip).ln();
        }
        self.clipped += clipped;
        Ok(self.push(
            Tensor::scalar(total),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                clip,
            },
        ))
    }

    /// Accumulates d(root)/d(node) for every node and stores it in each
    /// tensor's `grad`. `root` must hold a single value.
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let factor = if self.fault == Some(node.op.kind()) {
                2.0
            } else {
                1.0
            };
            self.backprop(idx, &g, factor, &mut grads);
            grads[idx] = Some(g);
        }
        let non_finite = grads.iter().flatten().flatten().any(|v| !v.is_finite());
        for node in self.nodes.iter_mut() {
            node.value.grad = None;
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = g;
        }
        if non_finite {
            return Err(NumericsError::NonFiniteGradient);
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &[f64], factor: f64, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let gs: Vec<f64> = g.iter().map(|v| v * factor).collect();
                acc(*a, &mut |da| {
                    gemm(m, n, k, &gs, (n, 1), bv.data(), (1, n), 1.0, da)
                });
                acc(*b, &mut |db| {
                    gemm(k, m, n, av.data(), (1, k), &gs, (n, 1), 1.0, db)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += factor * g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    acc(id, &mut |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g)
                    });
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g)
                });
                let n = self.value(*bias).len();
                acc(*bias, &mut |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += factor * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += factor * g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += factor * g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * c * g)
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += factor * g[i] * gelu_derivative(x[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*a, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dr[j] += factor * yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                acc(*x, &mut |dx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            dx[r * d + c] += factor * is / d as f64
                                * (d as f64 * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (i, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += factor * gv * h;
                    }
                });
                acc(*bias, &mut |db| {
                    for (i, gv) in g.iter().enumerate() {
                        db[i % d] += factor * gv;
                    }
                });
            }
            Op::Gather { src, ids } => {
                let c = node.value.cols();
                acc(*src, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += factor * g[r * c + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += factor * g[i] * mask[i];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |d| {
                        d.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, g)| *d += factor * g)
                    });
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let off = start * c;
                acc(*x, &mut |d| {
                    d[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += factor * g)
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let rows = self.value(p).rows();
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += factor * g[r * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let total = self.value(*x).cols();
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            d[r * total + start + j] += factor * gr[j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += factor * g[0]));
            }
            Op::Nll {
                probs,
                targets,
                clip,
            } => {
                let pv = self.value(*probs);
                let c = pv.cols();
                acc(*probs, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pv.get(r, t);
                        if p >= *clip {
                            d[r * c + t] -= factor * g[0] / p;
                        }
                    }
                });
            }
        }
    }
}
