//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every operation in evaluation order. [`Tape::backward`]
//! walks the records in exact reverse order, accumulating adjoints additively,
//! and adds the adjoints of parameter leaves into their owning
//! [`ParamStore`]s. Tapes are single-threaded and short-lived: build one per
//! forward pass and drop it after the update.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::tensor::{CsrMatrix, Tensor};

/// Values below this are clamped before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-30;

/// Column sums of absolute projections below this count as degenerate in
/// [`Tape::segment_masked_mean`].
pub const MASK_EPS: f64 = 1e-12;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamIdx(pub usize);

/// A trainable tensor with its gradient and Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    /// Adam steps taken, used for bias correction.
    pub steps: u64,
    has_grad: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            steps: 0,
            has_grad: false,
        }
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
        self.has_grad = false;
    }

    fn accumulate(&mut self, g: &Tensor) -> Result<(), NumericError> {
        self.grad.add_assign(g)?;
        self.has_grad = true;
        Ok(())
    }
}

/// An ordered collection of parameters with a process-unique identity, so a
/// tape can route gradients back to the right owner.
#[derive(Debug)]
pub struct ParamStore {
    id: StoreId,
    params: Vec<Parameter>,
}

impl Clone for ParamStore {
    /// Clones receive a fresh identity; gradients recorded against the
    /// original never land in the copy.
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            params: self.params.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: StoreId::fresh(),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    /// Copy that keeps this store's identity, so gradients recorded against
    /// the copy route back to the original.
    pub fn snapshot(&self) -> Self {
        Self {
            id: self.id,
            params: self.params.clone(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamIdx {
        self.params.push(Parameter::new(name, value));
        ParamIdx(self.params.len() - 1)
    }

    pub fn get(&self, idx: ParamIdx) -> &Parameter {
        &self.params[idx.0]
    }

    pub fn get_mut(&mut self, idx: ParamIdx) -> &mut Parameter {
        &mut self.params[idx.0]
    }

    pub fn value(&self, idx: ParamIdx) -> &Tensor {
        &self.params[idx.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Clamps every parameter entry into `[lo, hi]`.
    pub fn clamp_values(&mut self, lo: f64, hi: f64) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: StoreId, idx: usize },
    MatMul(Var, Var),
    SparseMatMul(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Log(Var),
    MeanRows(Var),
    SumRows(Var),
    Sum(Var),
    Pow(Var, u32),
    SegmentMaskedMean(Var, Vec<Range<usize>>),
    WeightedSum(Var, Vec<(usize, usize, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped_logs: usize,
}

/// Adjoints for every node reachable from a loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericError> {
    if a.shape() != b.shape() {
        return Err(NumericError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn softmax_rows_plain(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        debug_assert_eq!(row.len(), cols);
    }
    out
}

/// Row-wise softmax on plain values (max-shifted).
pub fn softmax(values: &[f64]) -> Vec<f64> {
    softmax_rows_plain(&Tensor::row_vector(values)).into_data()
}

/// Per-column `sum_l |p_l| p_l / sum_l |p_l|` for the rows in `span`, falling
/// back to the plain mean when the absolute column sum is below [`MASK_EPS`].
pub fn masked_column_mean(proj: &Tensor, span: Range<usize>) -> Vec<f64> {
    let n = span.len() as f64;
    (0..proj.cols())
        .map(|d| {
            let mut num = 0.0;
            let mut den = 0.0;
            for l in span.clone() {
                let p = proj.get(l, d);
                num += p.abs() * p;
                den += p.abs();
            }
            if den < MASK_EPS {
                span.clone().map(|l| proj.get(l, d)).sum::<f64>() / n
            } else {
                num / den
            }
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of log arguments clamped to [`LOG_FLOOR`] so far.
    pub fn clamped_logs(&self) -> usize {
        self.clamped_logs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFiniteInput { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericError> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, idx: ParamIdx) -> Result<Var, NumericError> {
        let value = store.value(idx).clone();
        self.push(
            value,
            Op::Param {
                store: store.id(),
                idx: idx.0,
            },
            "param",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn sparse_matmul(&mut self, m: Arc<CsrMatrix>, x: Var) -> Result<Var, NumericError> {
        let out = m.mul_dense(self.value(x))?;
        self.push(out, Op::SparseMatMul(m, x), "sparse_matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("add", va, vb)?;
        let mut out = va.clone();
        out.add_assign(vb)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericError> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                left: vx.shape(),
                right: vr.shape(),
            });
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("elementwise_mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data)?;
        self.push(out, Op::Mul(a, b), "elementwise_mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericError> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericError> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericError> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        if !self.value(x).is_finite() {
            return Err(NumericError::NonFiniteInput { op: "softmax_rows" });
        }
        let out = softmax_rows_plain(self.value(x));
        self.push(out, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Natural log with arguments clamped to [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Result<Var, NumericError> {
        let mut clamped = 0;
        let out = self.value(x).map(|v| {
            if v < LOG_FLOOR {
                LOG_FLOOR.ln()
            } else {
                v.ln()
            }
        });
        clamped += self.value(x).data().iter().filter(|&&v| v < LOG_FLOOR).count();
        self.clamped_logs += clamped;
        self.push(out, Op::Log(x), "log")
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let vx = self.value(x);
        if vx.rows() == 0 {
            return Err(NumericError::InvalidArgument("mean over zero rows".into()));
        }
        let n = vx.rows() as f64;
        let mut out = column_sums(vx);
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        self.push(out, Op::MeanRows(x), "mean_rows")
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let out = column_sums(self.value(x));
        self.push(out, Op::SumRows(x), "sum_rows")
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Elementwise integer power; defined for negative bases.
    pub fn pow(&mut self, x: Var, exponent: u32) -> Result<Var, NumericError> {
        if exponent == 0 {
            return Err(NumericError::InvalidArgument(
                "power exponent must be positive".into(),
            ));
        }
        let out = self.value(x).map(|v| v.powi(exponent as i32));
        self.push(out, Op::Pow(x, exponent), "scalar_pow")
    }

    /// For each row span (one graph), the mask-weighted column mean of the
    /// projections: row `i` of the output is [`masked_column_mean`] over
    /// `segments[i]`.
    pub fn segment_masked_mean(
        &mut self,
        proj: Var,
        segments: &[Range<usize>],
    ) -> Result<Var, NumericError> {
        let vp = self.value(proj);
        let mut out = Tensor::zeros(segments.len(), vp.cols());
        for (i, span) in segments.iter().enumerate() {
            if span.is_empty() || span.end > vp.rows() {
                return Err(NumericError::InvalidArgument(format!(
                    "segment {span:?} out of range for {} rows",
                    vp.rows()
                )));
            }
            out.row_mut(i)
                .copy_from_slice(&masked_column_mean(vp, span.clone()));
        }
        self.push(
            out,
            Op::SegmentMaskedMean(proj, segments.to_vec()),
            "segment_masked_mean",
        )
    }

    /// `sum w * x[r, c]` over the given entries, as a `1 x 1` tensor.
    pub fn weighted_sum(
        &mut self,
        x: Var,
        entries: Vec<(usize, usize, f64)>,
    ) -> Result<Var, NumericError> {
        let vx = self.value(x);
        let mut s = 0.0;
        for &(r, c, w) in &entries {
            if r >= vx.rows() || c >= vx.cols() {
                return Err(NumericError::InvalidArgument(format!(
                    "entry ({r}, {c}) outside {:?}",
                    vx.shape()
                )));
            }
            s += w * vx.get(r, c);
        }
        self.push(Tensor::scalar(s), Op::WeightedSum(x, entries), "weighted_sum")
    }

    /// Computes adjoints of every node with respect to `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, NumericError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (input, contrib) in self.local_backward(node, &g)? {
                match &mut grads[input.0] {
                    Some(existing) => existing.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagates `loss` and adds parameter adjoints into the matching
    /// stores. Calling it twice without zeroing accumulates.
    pub fn backward(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<(), NumericError> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let Op::Param { store, idx } = node.op else { continue };
            let Some(g) = grads.get(Var(i)) else { continue };
            if let Some(s) = stores.iter_mut().find(|s| s.id() == store) {
                s.get_mut(ParamIdx(idx)).accumulate(g)?;
            }
        }
        Ok(())
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>, NumericError> {
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Param { .. } => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.matmul(&vb.transpose())?;
                let gb = va.transpose().matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::SparseMatMul(m, x) => vec![(*x, m.mul_dense_transposed(g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(x, row) => vec![(*x, g.clone()), (*row, column_sums(g))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, vb, |gv, bv| gv * bv);
                let gb = zip_map(g, va, |gv, av| gv * av);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Relu(x) => {
                let gx = zip_map(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                vec![(*x, gx)]
            }
            Op::Tanh(x) => vec![(*x, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
            Op::SoftmaxRows(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Log(x) => {
                let gx = zip_map(g, self.value(*x), |gv, xv| {
                    if xv < LOG_FLOOR {
                        0.0
                    } else {
                        gv / xv
                    }
                });
                vec![(*x, gx)]
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let n = vx.rows() as f64;
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    for (o, gv) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv / n;
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumRows(x) => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    gx.row_mut(r).copy_from_slice(g.data());
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                vec![(*x, Tensor::filled(r, c, g.data()[0]))]
            }
            Op::Pow(x, n) => {
                let n = *n as i32;
                let gx = zip_map(g, self.value(*x), |gv, xv| gv * n as f64 * xv.powi(n - 1));
                vec![(*x, gx)]
            }
            Op::SegmentMaskedMean(p, segments) => {
                let vp = self.value(*p);
                let mut gp = Tensor::zeros(vp.rows(), vp.cols());
                for (i, span) in segments.iter().enumerate() {
                    let n = span.len() as f64;
                    for d in 0..vp.cols() {
                        let gs = g.get(i, d);
                        let den: f64 = span.clone().map(|l| vp.get(l, d).abs()).sum();
                        if den < MASK_EPS {
                            for l in span.clone() {
                                gp.set(l, d, gs / n);
                            }
                        } else {
                            let s = y.get(i, d);
                            for l in span.clone() {
                                let pv = vp.get(l, d);
                                let sign = if pv > 0.0 {
                                    1.0
                                } else if pv < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                gp.set(l, d, gs * (2.0 * pv.abs() - s * sign) / den);
                            }
                        }
                    }
                }
                vec![(*p, gp)]
            }
            Op::WeightedSum(x, entries) => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                let gv = g.data()[0];
                for &(r, c, w) in entries {
                    let cur = gx.get(r, c);
                    gx.set(r, c, cur + w * gv);
                }
                vec![(*x, gx)]
            }
        })
    }
}

fn column_sums(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, x.cols());
    for row in x.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    // Shapes are checked when the forward op was recorded.
    Tensor::from_vec(a.rows(), a.cols(), data).expect("matching shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn tanh_zero_and_range() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0, 50.0, -50.0, 3.0]])).unwrap();
        let y = tape.tanh(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(0, 0), 0.0);
        assert!(v.data().iter().all(|x| x.abs() <= 1.0));
        assert!(v.get(0, 3).abs() < 1.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0, 0.0]])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pow_negative_base() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-0.5)).unwrap();
        let y = tape.pow(x, 3).unwrap();
        assert_eq!(tape.value(y).item(), Some(-0.125));
    }

    #[test]
    fn linear_gradient_equals_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![0.3, -0.2, 0.7]]));
        let x = t(&[vec![1.5, -2.0, 4.0]]);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let prod = tape.mul(wv, xv).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss, &mut [&mut store]).unwrap();
        assert_eq!(store.get(w).grad, x);
        assert!(store.get(w).has_grad());
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let y = tape.tanh(wv).unwrap();
        tape.backward(y, &mut [&mut store]).unwrap();
        assert_eq!(store.get(w).grad.item(), Some(1.0));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![0.0, 1.0, -1.0]]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let y = tape.relu(wv).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut [&mut store]).unwrap();
        assert_eq!(store.get(w).grad.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert_eq!(
            tape.backward(x, &mut []),
            Err(NumericError::NotScalar((2, 2)))
        );
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let y = tape.pow(wv, 2).unwrap();
        tape.backward(y, &mut [&mut store]).unwrap();
        tape.backward(y, &mut [&mut store]).unwrap();
        assert_eq!(store.get(w).grad.item(), Some(8.0));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = w * w via Mul with the same var twice.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let y = tape.mul(wv, wv).unwrap();
        tape.backward(y, &mut [&mut store]).unwrap();
        assert_eq!(store.get(w).grad.item(), Some(6.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(tape.add(a, b), Err(NumericError::ShapeMismatch { .. })));
        assert!(matches!(tape.mul(a, b), Err(NumericError::ShapeMismatch { .. })));
        assert!(tape.matmul(a, b).is_ok());
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(
            tape.pow(x, 3),
            Err(NumericError::NonFiniteInput { .. })
        ));
        let bad = tape.constant(Tensor::scalar(f64::NAN));
        assert!(bad.is_err());
    }

    #[test]
    fn log_clamps_and_counts() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0, 1.0]])).unwrap();
        let y = tape.log(x).unwrap();
        assert_eq!(tape.value(y).get(0, 0), LOG_FLOOR.ln());
        assert_eq!(tape.value(y).get(0, 1), 0.0);
        assert_eq!(tape.clamped_logs(), 1);
    }

    #[test]
    fn masked_mean_zero_row_is_inert() {
        let proj = t(&[vec![0.4, -0.3], vec![-0.1, 0.9]]);
        let with_null = t(&[vec![0.4, -0.3], vec![-0.1, 0.9], vec![0.0, 0.0]]);
        let a = masked_column_mean(&proj, 0..2);
        let b = masked_column_mean(&with_null, 0..3);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let build = |tape: &mut Tape, store: &ParamStore, w: ParamIdx| {
            let wv = tape.param(store, w).unwrap();
            let a = tape.tanh(wv).unwrap();
            let l1 = tape.sum(a).unwrap();
            let b = tape.pow(wv, 3).unwrap();
            let l2 = tape.sum(b).unwrap();
            (l1, l2)
        };
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![0.2, -0.7], vec![1.1, 0.05]]));

        let mut tape = Tape::new();
        let (l1, l2) = build(&mut tape, &store, w);
        let total = tape.add(l1, l2).unwrap();
        tape.backward(total, &mut [&mut store]).unwrap();
        let joint = store.get(w).grad.clone();

        store.zero_grad();
        let mut tape = Tape::new();
        let (l1, _) = build(&mut tape, &store, w);
        tape.backward(l1, &mut [&mut store]).unwrap();
        let mut tape = Tape::new();
        let (_, l2) = build(&mut tape, &store, w);
        tape.backward(l2, &mut [&mut store]).unwrap();
        let separate = store.get(w).grad.clone();

        for (a, b) in joint.data().iter().zip(separate.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
