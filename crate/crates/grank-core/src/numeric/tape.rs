//! Wengert tape: forward ops record onto a linear tape, gradients come from
//! a single reverse sweep. The op set is exactly what the model needs; no
//! broadcasting beyond row-bias addition.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use super::mask::AttentionMask;
use super::matrix::Matrix;
use super::params::{ParamId, ParamSet};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Op<S: Scalar> {
    Leaf,
    Param,
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    /// out = a · bᵀ
    MatmulTransposeB {
        a: ValueId,
        b: ValueId,
    },
    Transpose {
        a: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    /// out[i,:] = a[i,:] + bias[0,:]
    AddRowBias {
        a: ValueId,
        bias: ValueId,
    },
    Scale {
        a: ValueId,
        c: f64,
    },
    /// out[i,0] = dot(a[i,:], b[i,:])
    RowwiseDot {
        a: ValueId,
        b: ValueId,
    },
    /// out[i,:] = scale[i,0] * mat[i,:]
    RowScale {
        scale: ValueId,
        mat: ValueId,
    },
    ConcatRows {
        parts: Vec<ValueId>,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    SliceRows {
        a: ValueId,
        start: usize,
    },
    SliceCols {
        a: ValueId,
        start: usize,
    },
    SoftmaxRows {
        a: ValueId,
    },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        xhat: Matrix<S>,
        inv_std: Vec<S>,
    },
    Relu {
        a: ValueId,
    },
    Gelu {
        a: ValueId,
    },
    Gather {
        table: ValueId,
        ids: Arc<Vec<usize>>,
    },
    L2NormalizeRows {
        a: ValueId,
        inv_norm: Vec<S>,
    },
    /// out[i,0] = -log softmax(logits[i,:])[targets[i]]
    RowSoftmaxCrossEntropy {
        logits: ValueId,
        targets: Arc<Vec<usize>>,
    },
    MeanAll {
        a: ValueId,
    },
    SumAll {
        a: ValueId,
    },
}

struct Node<S: Scalar> {
    value: Matrix<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matrix kernels (shared by forward and backward) ────────────────

pub(crate) fn mat_mul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = b.row(kk);
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
        let _ = k;
    }
    out
}

/// a · bᵀ where a is m×k and b is n×k.
pub(crate) fn mat_mul_tb<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    let m = a.rows();
    let n = b.rows();
    debug_assert_eq!(a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = S::ZERO;
            for (x, y) in arow.iter().zip(brow.iter()) {
                acc += *x * *y;
            }
            orow[j] = acc;
        }
    }
    out
}

/// aᵀ · b where a is m×k and b is m×n.
pub(crate) fn mat_mul_ta<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), m);
    let mut out = Matrix::zeros(k, n);
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = out.row_mut(kk);
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

fn gelu_scalar<S: Scalar>(x: S) -> S {
    // tanh approximation, used consistently in forward and backward
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let u = c * (x + a * x.powi(3));
    S::from_f64(0.5) * x * (S::ONE + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x.powi(3));
    let t = u.tanh();
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * c * (S::ONE + three * a * x.powi(2))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Matrix<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ValueId) -> Option<&Matrix<S>> {
        self.grads[id.0].as_ref()
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> ValueId {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        id
    }

    pub fn constant(&mut self, m: Matrix<S>) -> ValueId {
        self.push(m, Op::Leaf)
    }

    pub(crate) fn param_node(&mut self, value: Matrix<S>) -> ValueId {
        self.push(value, Op::Param)
    }

    pub fn shape(&self, id: ValueId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::dim("matmul", (ar, ac), (br, bc)));
        }
        let out = mat_mul(self.value(a), self.value(b));
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// out = a · bᵀ
    pub fn matmul_tb(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::dim("matmul_tb", (ar, ac), (br, bc)));
        }
        let out = mat_mul_tb(self.value(a), self.value(b));
        Ok(self.push(out, Op::MatmulTransposeB { a, b }))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose { a })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = av.clone();
        for (o, x) in out.data_mut().iter_mut().zip(bv.data().iter()) {
            *o += *x;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn add_row_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != ac {
            return Err(Error::dim("add_row_bias", self.shape(a), (br, bc)));
        }
        let bv = self.value(bias).clone();
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for j in 0..cols {
                row[j] += bv.get(0, j);
            }
        }
        Ok(self.push(out, Op::AddRowBias { a, bias }))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let cs = S::from_f64(c);
        let out = self.value(a).map(|v| v * cs);
        self.push(out, Op::Scale { a, c })
    }

    pub fn rowwise_dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("rowwise_dot", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), 1);
        for i in 0..av.rows() {
            let mut acc = S::ZERO;
            for (x, y) in av.row(i).iter().zip(bv.row(i).iter()) {
                acc += *x * *y;
            }
            out.set(i, 0, acc);
        }
        Ok(self.push(out, Op::RowwiseDot { a, b }))
    }

    pub fn row_scale(&mut self, scale: ValueId, mat: ValueId) -> Result<ValueId> {
        let (sr, sc) = self.shape(scale);
        let (mr, _) = self.shape(mat);
        if sc != 1 || sr != mr {
            return Err(Error::dim("row_scale", (sr, sc), self.shape(mat)));
        }
        let sv = self.value(scale).clone();
        let mut out = self.value(mat).clone();
        for i in 0..out.rows() {
            let s = sv.get(i, 0);
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        Ok(self.push(out, Op::RowScale { scale, mat }))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows of zero parts".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::dim("concat_rows", (rows, cols), self.shape(p)));
            }
            rows += self.shape(p).0;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols of zero parts".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dim("concat_cols", (rows, cols), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p).clone();
            for i in 0..rows {
                let dst = &mut out.row_mut(i)[offset..offset + pv.cols()];
                dst.copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return Err(Error::Argument(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let src = self.value(a);
        let data = src.data()[start * cols..(start + len) * cols].to_vec();
        let out = Matrix::from_vec(len, cols, data)?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(Error::Argument(format!(
                "slice_cols {start}..{} out of {cols} cols",
                start + len
            )));
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(rows, len);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    /// Row-wise softmax. Masked entries are excluded before exponentiation
    /// (equivalent to adding negative infinity) and come out as exact zeros.
    /// Stabilized by per-row max subtraction over the unmasked entries.
    pub fn softmax_rows(
        &mut self,
        a: ValueId,
        mask: Option<Arc<AttentionMask>>,
    ) -> Result<ValueId> {
        let (rows, cols) = self.shape(a);
        if let Some(m) = &mask {
            if m.shape() != (rows, cols) {
                return Err(Error::dim("softmax_rows mask", (rows, cols), m.shape()));
            }
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = src.row(i);
            let mut max = S::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                let ok = mask.as_ref().map_or(true, |m| m.is_allowed(i, j));
                if ok {
                    any = true;
                    max = max.maximum(v);
                }
            }
            if !any {
                return Err(Error::FullyMaskedRow { row: i });
            }
            let orow = out.row_mut(i);
            let mut sum = S::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let ok = mask.as_ref().map_or(true, |m| m.is_allowed(i, j));
                if ok {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                } else {
                    orow[j] = S::ZERO;
                }
            }
            for v in orow.iter_mut() {
                *v = *v / sum;
            }
        }
        Ok(self.push(out, Op::SoftmaxRows { a }))
    }

    /// Per-row normalization to zero mean and unit variance (epsilon inside
    /// the square root), then per-column affine with `gain` and `bias` (1×n).
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let (rows, cols) = self.shape(x);
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let (pr, pc) = self.shape(p);
            if pr != 1 || pc != cols {
                let _ = name;
                return Err(Error::dim("layer_norm", (rows, cols), (pr, pc)));
            }
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let n = S::from_f64(cols as f64);
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() / n;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / n;
            let istd = S::ONE / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..cols {
                let h = (row[j] - mean) * istd;
                xhat.set(i, j, h);
                out.set(i, j, h * gv.get(0, j) + bv.get(0, j));
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(|v| if v > S::ZERO { v } else { S::ZERO });
        self.push(out, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu { a })
    }

    /// Row gather: out[i,:] = table[ids[i],:]. Backward scatter-adds.
    pub fn gather(&mut self, table: ValueId, ids: Arc<Vec<usize>>) -> Result<ValueId> {
        let (rows, cols) = self.shape(table);
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Integrity(format!(
                    "gather id {id} out of range for {rows}-row table"
                )));
            }
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        Ok(self.push(out, Op::Gather { table, ids }))
    }

    pub fn l2_normalize_rows(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let floor = S::from_f64(1e-30);
        let mut out = src.clone();
        let mut inv_norm = Vec::with_capacity(src.rows());
        for i in 0..out.rows() {
            let mut sq = S::ZERO;
            for &v in out.row(i) {
                sq += v * v;
            }
            let inv = S::ONE / sq.sqrt().maximum(floor);
            inv_norm.push(inv);
            for v in out.row_mut(i) {
                *v *= inv;
            }
        }
        self.push(out, Op::L2NormalizeRows { a, inv_norm })
    }

    /// Per-row -log softmax(logits)[target], numerically stabilized.
    pub fn row_softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: Arc<Vec<usize>>,
    ) -> Result<ValueId> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::Argument(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        let mut out = Matrix::zeros(rows, 1);
        for i in 0..rows {
            let t = targets[i];
            if t >= cols {
                return Err(Error::Argument(format!(
                    "target index {t} out of {cols} classes"
                )));
            }
            let row = lv.row(i);
            let mut max = S::neg_infinity();
            for &v in row {
                max = max.maximum(v);
            }
            let mut sum = S::ZERO;
            for &v in row {
                sum += (v - max).exp();
            }
            out.set(i, 0, sum.ln() - (row[t] - max));
        }
        Ok(self.push(out, Op::RowSoftmaxCrossEntropy { logits, targets }))
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let n = S::from_f64(src.len() as f64);
        let total: S = src.data().iter().copied().sum();
        let out = Matrix::from_vec(1, 1, vec![total / n]).expect("scalar");
        self.push(out, Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let total: S = src.data().iter().copied().sum();
        let out = Matrix::from_vec(1, 1, vec![total]).expect("scalar");
        self.push(out, Op::SumAll { a })
    }

    // ── backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: ValueId, delta: Matrix<S>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                    *a += *b;
                }
            }
            None => self.grads[id.0] = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients for every upstream
    /// node are accumulated and can be read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        if !self.value(loss).get(0, 0).is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
            });
        }
        self.grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![S::ONE]).expect("scalar"));

        for idx in (0..self.nodes.len()).rev() {
            let Some(d_out) = self.grads[idx].clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Param => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let d_a = mat_mul_tb(&d_out, self.value(b));
                    let d_b = mat_mul_ta(self.value(a), &d_out);
                    self.accumulate(a, d_a);
                    self.accumulate(b, d_b);
                }
                Op::MatmulTransposeB { a, b } => {
                    let (a, b) = (*a, *b);
                    let d_a = mat_mul(&d_out, self.value(b));
                    let d_b = mat_mul_ta(&d_out, self.value(a));
                    self.accumulate(a, d_a);
                    self.accumulate(b, d_b);
                }
                Op::Transpose { a } => {
                    let a = *a;
                    self.accumulate(a, d_out.transposed());
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, d_out.clone());
                    self.accumulate(b, d_out);
                }
                Op::AddRowBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let mut d_bias = Matrix::zeros(1, d_out.cols());
                    for i in 0..d_out.rows() {
                        for j in 0..d_out.cols() {
                            let v = d_bias.get(0, j) + d_out.get(i, j);
                            d_bias.set(0, j, v);
                        }
                    }
                    self.accumulate(a, d_out);
                    self.accumulate(bias, d_bias);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, S::from_f64(*c));
                    self.accumulate(a, d_out.map(|v| v * c));
                }
                Op::RowwiseDot { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let mut d_a = Matrix::zeros(av.rows(), av.cols());
                    let mut d_b = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let g = d_out.get(i, 0);
                        for j in 0..av.cols() {
                            d_a.set(i, j, g * bv.get(i, j));
                            d_b.set(i, j, g * av.get(i, j));
                        }
                    }
                    self.accumulate(a, d_a);
                    self.accumulate(b, d_b);
                }
                Op::RowScale { scale, mat } => {
                    let (scale, mat) = (*scale, *mat);
                    let sv = self.value(scale).clone();
                    let mv = self.value(mat).clone();
                    let mut d_scale = Matrix::zeros(sv.rows(), 1);
                    let mut d_mat = Matrix::zeros(mv.rows(), mv.cols());
                    for i in 0..mv.rows() {
                        let mut acc = S::ZERO;
                        for j in 0..mv.cols() {
                            acc += d_out.get(i, j) * mv.get(i, j);
                            d_mat.set(i, j, sv.get(i, 0) * d_out.get(i, j));
                        }
                        d_scale.set(i, 0, acc);
                    }
                    self.accumulate(scale, d_scale);
                    self.accumulate(mat, d_mat);
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(p).0;
                        let cols = d_out.cols();
                        let data =
                            d_out.data()[start * cols..(start + rows) * cols].to_vec();
                        let d_p = Matrix::from_vec(rows, cols, data).expect("slice");
                        self.accumulate(p, d_p);
                        start += rows;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut d_p = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            d_p.row_mut(i)
                                .copy_from_slice(&d_out.row(i)[start..start + cols]);
                        }
                        self.accumulate(p, d_p);
                        start += cols;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (a, start) = (*a, *start);
                    let (rows, cols) = self.shape(a);
                    let mut d_a = Matrix::zeros(rows, cols);
                    for i in 0..d_out.rows() {
                        d_a.row_mut(start + i).copy_from_slice(d_out.row(i));
                    }
                    self.accumulate(a, d_a);
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    let (rows, cols) = self.shape(a);
                    let mut d_a = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        d_a.row_mut(i)[start..start + d_out.cols()]
                            .copy_from_slice(d_out.row(i));
                    }
                    self.accumulate(a, d_a);
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    // masked entries have y = 0, so their gradient is 0
                    let y = self.nodes[idx].value.clone();
                    let mut d_a = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let mut dot = S::ZERO;
                        for j in 0..y.cols() {
                            dot += d_out.get(i, j) * y.get(i, j);
                        }
                        for j in 0..y.cols() {
                            d_a.set(i, j, y.get(i, j) * (d_out.get(i, j) - dot));
                        }
                    }
                    self.accumulate(a, d_a);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let gv = self.value(gain).clone();
                    let (rows, cols) = xhat.shape();
                    let n = S::from_f64(cols as f64);
                    let mut d_x = Matrix::zeros(rows, cols);
                    let mut d_gain = Matrix::zeros(1, cols);
                    let mut d_bias = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        let mut m1 = S::ZERO;
                        let mut m2 = S::ZERO;
                        for j in 0..cols {
                            let dxh = d_out.get(i, j) * gv.get(0, j);
                            m1 += dxh;
                            m2 += dxh * xhat.get(i, j);
                            d_gain.set(0, j, d_gain.get(0, j) + d_out.get(i, j) * xhat.get(i, j));
                            d_bias.set(0, j, d_bias.get(0, j) + d_out.get(i, j));
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..cols {
                            let dxh = d_out.get(i, j) * gv.get(0, j);
                            d_x.set(i, j, inv_std[i] * (dxh - m1 - xhat.get(i, j) * m2));
                        }
                    }
                    self.accumulate(x, d_x);
                    self.accumulate(gain, d_gain);
                    self.accumulate(bias, d_bias);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let xv = self.value(a).clone();
                    let mut d_a = d_out;
                    for (g, &x) in d_a.data_mut().iter_mut().zip(xv.data().iter()) {
                        if x <= S::ZERO {
                            *g = S::ZERO;
                        }
                    }
                    self.accumulate(a, d_a);
                }
                Op::Gelu { a } => {
                    let a = *a;
                    let xv = self.value(a).clone();
                    let mut d_a = d_out;
                    for (g, &x) in d_a.data_mut().iter_mut().zip(xv.data().iter()) {
                        *g *= gelu_grad_scalar(x);
                    }
                    self.accumulate(a, d_a);
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let (rows, cols) = self.shape(table);
                    let mut d_t = Matrix::zeros(rows, cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            d_t.set(id, j, d_t.get(id, j) + d_out.get(i, j));
                        }
                    }
                    self.accumulate(table, d_t);
                }
                Op::L2NormalizeRows { a, inv_norm } => {
                    let a = *a;
                    let inv_norm = inv_norm.clone();
                    let y = self.nodes[idx].value.clone();
                    let mut d_a = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let mut dot = S::ZERO;
                        for j in 0..y.cols() {
                            dot += d_out.get(i, j) * y.get(i, j);
                        }
                        for j in 0..y.cols() {
                            d_a.set(i, j, (d_out.get(i, j) - y.get(i, j) * dot) * inv_norm[i]);
                        }
                    }
                    self.accumulate(a, d_a);
                }
                Op::RowSoftmaxCrossEntropy { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let lv = self.value(logits).clone();
                    let (rows, cols) = lv.shape();
                    let mut d_l = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let g = d_out.get(i, 0);
                        let row = lv.row(i);
                        let mut max = S::neg_infinity();
                        for &v in row {
                            max = max.maximum(v);
                        }
                        let mut sum = S::ZERO;
                        for &v in row {
                            sum += (v - max).exp();
                        }
                        for j in 0..cols {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == targets[i] { S::ONE } else { S::ZERO };
                            d_l.set(i, j, g * (p - onehot));
                        }
                    }
                    self.accumulate(logits, d_l);
                }
                Op::MeanAll { a } => {
                    let a = *a;
                    let (rows, cols) = self.shape(a);
                    let g = d_out.get(0, 0) / S::from_f64((rows * cols) as f64);
                    self.accumulate(a, Matrix::from_fn(rows, cols, |_, _| g));
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let (rows, cols) = self.shape(a);
                    let g = d_out.get(0, 0);
                    self.accumulate(a, Matrix::from_fn(rows, cols, |_, _| g));
                }
            }
        }
        Ok(())
    }
}

/// A tape bound to a parameter set: parameters are snapshotted onto the tape
/// on first use, and their gradients can be taken out after `backward`.
pub struct Session<'p, S: Scalar> {
    tape: Tape<S>,
    params: &'p ParamSet<S>,
    bound: Vec<Option<ValueId>>,
}

impl<'p, S: Scalar> Session<'p, S> {
    pub fn new(params: &'p ParamSet<S>) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<S> {
        self.params
    }

    /// Bind a parameter onto the tape (snapshot of the current value).
    pub fn param(&mut self, id: ParamId) -> ValueId {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self.params.get(id).value.clone();
        let v = self.tape.param_node(value);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.tape.value(id).get(0, 0).to_f64()
    }

    /// Run backward and hand out per-parameter gradients.
    pub fn take_param_grads(mut self, loss: ValueId) -> Result<Vec<(ParamId, Matrix<S>)>> {
        self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (pid, vid) in self.bound.iter().enumerate() {
            if let Some(vid) = vid {
                if let Some(g) = self.tape.grad(*vid) {
                    out.push((ParamId(pid), g.clone()));
                }
            }
        }
        Ok(out)
    }
}

impl<'p, S: Scalar> Deref for Session<'p, S> {
    type Target = Tape<S>;
    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}

impl<'p, S: Scalar> DerefMut for Session<'p, S> {
    fn deref_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut t: Tape<f64> = Tape::new();
        let i2 = t.constant(Matrix::identity(2));
        let m = t.constant(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(out), t.value(m));
    }

    #[test]
    fn matmul_hand_case() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap());
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "got: {err}");
    }

    #[test]
    fn softmax_uniform_row() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Matrix::zeros(1, 4));
        let s = t.softmax_rows(a, None).unwrap();
        for j in 0..4 {
            assert!(close(t.value(s).get(0, j), 0.25, 1e-12));
        }
    }

    #[test]
    fn softmax_large_values_stable() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.constant(Matrix::from_vec(1, 3, vec![1000.0, 1000.0, 1000.0]).unwrap());
        let s = t.softmax_rows(a, None).unwrap();
        for j in 0..3 {
            let v = t.value(s).get(0, j);
            assert!(v.is_finite());
            assert!(close(v as f64, 1.0 / 3.0, 1e-6));
        }
    }

    #[test]
    fn softmax_masked_renormalizes() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Matrix::zeros(1, 3));
        let mask = AttentionMask::from_fn(1, 3, |_, j| j < 2);
        let s = t.softmax_rows(a, Some(Arc::new(mask))).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Matrix::zeros(2, 2));
        let mask = AttentionMask::from_fn(2, 2, |i, _| i == 0);
        let err = t.softmax_rows(a, Some(Arc::new(mask))).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Matrix::from_fn(5, 7, |i, j| ((i * 31 + j * 17) % 13) as f64 - 6.0));
        let s = t.softmax_rows(a, None).unwrap();
        for i in 0..5 {
            let sum: f64 = t.value(s).row(i).iter().sum();
            assert!(close(sum, 1.0, 1e-9));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Matrix::from_fn(1, 4, |_, _| 3.5));
        let g = t.constant(Matrix::from_fn(1, 4, |_, _| 1.0));
        let b = t.constant(Matrix::zeros(1, 4));
        let y = t.layer_norm(x, g, b).unwrap();
        for j in 0..4 {
            assert!(close(t.value(y).get(0, j), 0.0, 1e-9));
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let g = t.constant(Matrix::from_fn(1, 2, |_, _| 1.0));
        let b = t.constant(Matrix::zeros(1, 2));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(close(t.value(y).get(0, 0), 1.0, 1e-4));
        assert!(close(t.value(y).get(0, 1), -1.0, 1e-4));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.constant(Matrix::zeros(1, 16));
        let ce = t
            .row_softmax_cross_entropy(logits, Arc::new(vec![3]))
            .unwrap();
        assert!(close(t.value(ce).get(0, 0), (16.0f64).ln(), 1e-12));
    }

    #[test]
    fn backward_through_chain() {
        // loss = mean(relu(a*2)) with a = [[1, -1]]: d/da = [1, 0] * 2 / 2
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let s = t.scale(a, 2.0);
        let r = t.relu(s);
        let loss = t.mean_all(r);
        t.backward(loss).unwrap();
        let g = t.grad(a).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn purity_same_inputs_same_bits() {
        let run = || -> Vec<f32> {
            let mut t: Tape<f32> = Tape::new();
            let a = t.constant(Matrix::from_fn(4, 4, |i, j| (i as f32 + 1.3) * (j as f32 - 0.7)));
            let b = t.constant(Matrix::from_fn(4, 4, |i, j| (i as f32 - 2.1) * (j as f32 + 0.4)));
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(c, None).unwrap();
            t.value(s).data().to_vec()
        };
        let x = run();
        let y = run();
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
