//! Reverse-mode differentiation over a per-step operation tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and returns
//! exact analytic gradients for every node that requires them.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry};
use super::segments::Segments;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Rows whose norm falls at or below this floor are rejected by normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    AddRow(usize, usize),
    MulScalar(usize, usize),
    MulCol(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize, Option<Rc<[bool]>>),
    SegmentLogSumExp(usize, Segments),
    SegmentSoftmax(usize, Segments),
    SegmentSum(usize, Segments),
    SegmentMean(usize, Segments),
    BlockAttention {
        q: usize,
        k: usize,
        v: usize,
        segments: Segments,
        scale: f64,
    },
    Sum(usize),
    Mean(usize),
    SumAxis0(usize),
    SumAxis1(usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Rc<[usize]>),
    SliceRows(usize, usize),
    L2NormalizeRows(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geometry: ConvGeometry,
    },
    GlobalAvgPool(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Result of a backward pass. Gradients are kept for leaf nodes only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when no gradient reached it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagates from a single-element `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::shape("backward", out.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(out.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut emit = |i: usize, t: Tensor| {
                if nodes[i].requires_grad {
                    match &mut grads[i] {
                        Some(acc) => acc.add_assign(&t),
                        slot @ None => *slot = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::Add(a, b) => {
                    emit(a, g.clone());
                    emit(b, g);
                }
                &Op::Sub(a, b) => {
                    emit(b, g.map(|x| -x));
                    emit(a, g);
                }
                &Op::Mul(a, b) => {
                    emit(a, g.zip_map(val(b), |x, y| x * y));
                    emit(b, g.zip_map(val(a), |x, y| x * y));
                }
                &Op::Scale(a, c) => emit(a, g.map(|x| x * c)),
                &Op::AddConst(a) => emit(a, g),
                &Op::AddRow(a, r) => {
                    let (m, k) = g.dims2()?;
                    let mut gr = vec![0.0; k];
                    for i in 0..m {
                        gr.iter_mut().zip(g.row_slice(i)).for_each(|(s, x)| *s += x);
                    }
                    emit(r, Tensor::new(val(r).shape(), gr)?);
                    emit(a, g);
                }
                &Op::MulScalar(a, s) => {
                    let sv = val(s).item();
                    let gs: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                    emit(s, Tensor::new(val(s).shape(), vec![gs])?);
                    emit(a, g.map(|x| x * sv));
                }
                &Op::MulCol(a, c) => {
                    let (m, k) = g.dims2()?;
                    let av = val(a);
                    let cv = val(c);
                    let mut ga = vec![0.0; m * k];
                    let mut gc = vec![0.0; m];
                    for i in 0..m {
                        let ci = cv.data()[i];
                        for j in 0..k {
                            ga[i * k + j] = g.data()[i * k + j] * ci;
                            gc[i] += g.data()[i * k + j] * av.data()[i * k + j];
                        }
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                    emit(c, Tensor::new(&[m, 1], gc)?);
                }
                &Op::Matmul(a, b) => {
                    let (m, k) = val(a).dims2()?;
                    let (_, n) = val(b).dims2()?;
                    if nodes[a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, val(b).data(), true, &mut ga, false);
                        emit(a, Tensor::new(&[m, k], ga)?);
                    }
                    if nodes[b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, val(a).data(), true, g.data(), false, &mut gb, false);
                        emit(b, Tensor::new(&[k, n], gb)?);
                    }
                }
                &Op::Transpose(a) => emit(a, g.transpose()?),
                &Op::Reshape(a) => emit(a, g.reshape(val(a).shape())?),
                &Op::Exp(a) => emit(a, g.zip_map(&node.value, |x, y| x * y)),
                &Op::Log(a) => emit(a, g.zip_map(val(a), |x, y| x / y)),
                &Op::Relu(a) => emit(a, g.zip_map(val(a), |x, y| if y > 0.0 { x } else { 0.0 })),
                &Op::SoftmaxRows(a) => {
                    let (m, k) = g.dims2()?;
                    let y = &node.value;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..k {
                            ga[i * k + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                }
                Op::LogSumExpRows(a, mask) => {
                    let a = *a;
                    let x = val(a);
                    let (m, k) = x.dims2()?;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let lse = node.value.data()[i];
                        for j in 0..k {
                            if mask.as_ref().is_none_or(|mk| mk[i * k + j]) {
                                ga[i * k + j] = g.data()[i] * (x.data()[i * k + j] - lse).exp();
                            }
                        }
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                }
                Op::SegmentLogSumExp(a, segs) => {
                    let a = *a;
                    let x = val(a);
                    let mut ga = vec![0.0; x.len()];
                    for (s, r) in segs.iter().enumerate() {
                        let lse = node.value.data()[s];
                        for row in r {
                            ga[row] = g.data()[s] * (x.data()[row] - lse).exp();
                        }
                    }
                    emit(a, Tensor::new(x.shape(), ga)?);
                }
                Op::SegmentSoftmax(a, segs) => {
                    let a = *a;
                    let y = &node.value;
                    let mut ga = vec![0.0; y.len()];
                    for r in segs.iter() {
                        let dot: f64 = r.clone().map(|i| y.data()[i] * g.data()[i]).sum();
                        for i in r {
                            ga[i] = y.data()[i] * (g.data()[i] - dot);
                        }
                    }
                    emit(a, Tensor::new(y.shape(), ga)?);
                }
                Op::SegmentSum(a, segs) | Op::SegmentMean(a, segs) => {
                    let a = *a;
                    let mean = matches!(node.op, Op::SegmentMean(..));
                    let x = val(a);
                    let (m, k) = x.dims2()?;
                    let mut ga = vec![0.0; m * k];
                    for (s, r) in segs.iter().enumerate() {
                        let w = if mean { 1.0 / r.len() as f64 } else { 1.0 };
                        let gs = g.row_slice(s);
                        for i in r {
                            for j in 0..k {
                                ga[i * k + j] = gs[j] * w;
                            }
                        }
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    segments,
                    scale,
                } => {
                    let (q, k, v, scale) = (*q, *k, *v, *scale);
                    let (qv, kv, vv) = (val(q), val(k), val(v));
                    let (m, d) = qv.dims2()?;
                    let mut gq = vec![0.0; m * d];
                    let mut gk = vec![0.0; m * d];
                    let mut gv = vec![0.0; m * d];
                    for r in segments.iter() {
                        let len = r.len();
                        let span = r.start * d..r.end * d;
                        let p = kernels::block_attention_probs(
                            &qv.data()[span.clone()],
                            &kv.data()[span.clone()],
                            len,
                            d,
                            scale,
                        );
                        let go = &g.data()[span.clone()];
                        // dV = P^T dO
                        gemm(len, len, d, &p, true, go, false, &mut gv[span.clone()], false);
                        // dP = dO V^T
                        let mut dp = vec![0.0; len * len];
                        gemm(len, d, len, go, false, &vv.data()[span.clone()], true, &mut dp, false);
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &mut dp[i * len..(i + 1) * len];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        gemm(len, len, d, &dp, false, &kv.data()[span.clone()], false, &mut gq[span.clone()], false);
                        gemm(len, len, d, &dp, true, &qv.data()[span.clone()], false, &mut gk[span.clone()], false);
                    }
                    emit(q, Tensor::new(&[m, d], gq)?);
                    emit(k, Tensor::new(&[m, d], gk)?);
                    emit(v, Tensor::new(&[m, d], gv)?);
                }
                &Op::Sum(a) => emit(a, Tensor::full(val(a).shape(), g.item())),
                &Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    emit(a, Tensor::full(val(a).shape(), g.item() / n));
                }
                &Op::SumAxis0(a) => {
                    let (m, k) = val(a).dims2()?;
                    let mut ga = Vec::with_capacity(m * k);
                    for _ in 0..m {
                        ga.extend_from_slice(g.data());
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                }
                &Op::SumAxis1(a) => {
                    let (m, k) = val(a).dims2()?;
                    let mut ga = Vec::with_capacity(m * k);
                    for i in 0..m {
                        ga.extend(std::iter::repeat_n(g.data()[i], k));
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                }
                &Op::ConcatCols(a, b) => {
                    let (m, ka) = val(a).dims2()?;
                    let (_, kb) = val(b).dims2()?;
                    let mut ga = Vec::with_capacity(m * ka);
                    let mut gb = Vec::with_capacity(m * kb);
                    for i in 0..m {
                        let r = g.row_slice(i);
                        ga.extend_from_slice(&r[..ka]);
                        gb.extend_from_slice(&r[ka..]);
                    }
                    emit(a, Tensor::new(&[m, ka], ga)?);
                    emit(b, Tensor::new(&[m, kb], gb)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        emit(p, Tensor::new(val(p).shape(), g.data()[offset..offset + n].to_vec())?);
                        offset += n;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let (m, k) = val(a).dims2()?;
                    let mut ga = vec![0.0; m * k];
                    for (r, &src) in idx.iter().enumerate() {
                        ga[src * k..(src + 1) * k]
                            .iter_mut()
                            .zip(g.row_slice(r))
                            .for_each(|(s, x)| *s += x);
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                }
                &Op::SliceRows(a, start) => {
                    let x = val(a);
                    let cols = x.len() / x.shape()[0];
                    let mut ga = vec![0.0; x.len()];
                    ga[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    emit(a, Tensor::new(x.shape(), ga)?);
                }
                &Op::L2NormalizeRows(a) => {
                    let x = val(a);
                    let y = &node.value;
                    let (m, k) = x.dims2()?;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let norm = x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..k {
                            ga[i * k + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    emit(a, Tensor::new(&[m, k], ga)?);
                }
                &Op::Conv2d { x, w, b, geometry } => {
                    let need_dx = nodes[x].requires_grad;
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &geometry,
                        val(x).data(),
                        val(w).data(),
                        g.data(),
                        need_dx,
                    );
                    if let Some(dx) = dx {
                        emit(x, Tensor::new(val(x).shape(), dx)?);
                    }
                    emit(w, Tensor::new(val(w).shape(), dw)?);
                    emit(b, Tensor::new(val(b).shape(), db)?);
                }
                &Op::GlobalAvgPool(a) => {
                    let x = val(a);
                    let plane = x.shape()[2] * x.shape()[3];
                    let mut ga = Vec::with_capacity(x.len());
                    for &gv in g.data() {
                        ga.extend(std::iter::repeat_n(gv / plane as f64, plane));
                    }
                    emit(a, Tensor::new(x.shape(), ga)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_segments(op: &'static str, rows: usize, segs: &Segments) -> Result<()> {
    if segs.total() != rows {
        return Err(Error::shape(op, &[rows], &[segs.total()]));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x + c), Op::AddConst(self.id))
    }

    /// `[M, K] + [1, K]` broadcast over rows.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let (m, k) = a.dims2()?;
        if r.len() != k || r.rank() != 2 {
            return Err(Error::shape("add_row", a.shape(), r.shape()));
        }
        let mut out = a.data().to_vec();
        for i in 0..m {
            out[i * k..(i + 1) * k]
                .iter_mut()
                .zip(r.data())
                .for_each(|(x, y)| *x += y);
        }
        Ok(self.binary(row, Tensor::new(&[m, k], out)?, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every element by a single-element variable.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::shape("mul_scalar", &self.shape(), sv.shape()));
        }
        let c = sv.item();
        Ok(self.binary(s, self.value().map(|x| x * c), Op::MulScalar(self.id, s.id)))
    }

    /// `[M, K] * [M, 1]` broadcast over columns.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let (a, c) = (self.value(), col.value());
        let (m, k) = a.dims2()?;
        if c.shape() != [m, 1] {
            return Err(Error::shape("mul_col", a.shape(), c.shape()));
        }
        let mut out = a.data().to_vec();
        for i in 0..m {
            let ci = c.data()[i];
            out[i * k..(i + 1) * k].iter_mut().for_each(|x| *x *= ci);
        }
        Ok(self.binary(col, Tensor::new(&[m, k], out)?, Op::MulCol(self.id, col.id)))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::Matmul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value().transpose()?, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        Ok(self.unary(self.value().reshape(shape)?, Op::Reshape(self.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NumericDomain("log of non-positive value".into()));
        }
        Ok(self.unary(v.map(f64::ln), Op::Log(self.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (m, k) = v.dims2()?;
        let mut out = v.data().to_vec();
        out.chunks_mut(k).for_each(kernels::softmax_in_place);
        Ok(self.unary(Tensor::new(&[m, k], out)?, Op::SoftmaxRows(self.id)))
    }

    /// Row-wise log-sum-exp, `[M, K] -> [M, 1]`.
    pub fn logsumexp_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (m, _) = v.dims2()?;
        let out: Vec<f64> = (0..m)
            .map(|i| kernels::logsumexp(v.row_slice(i).iter().copied()))
            .collect();
        Ok(self.unary(Tensor::new(&[m, 1], out)?, Op::LogSumExpRows(self.id, None)))
    }

    /// Row-wise log-sum-exp restricted to entries where `mask` is true.
    /// Every row must keep at least one entry.
    pub fn logsumexp_rows_masked(&self, mask: &[bool]) -> Result<Var<'t>> {
        let v = self.value();
        let (m, k) = v.dims2()?;
        if mask.len() != m * k {
            return Err(Error::shape("logsumexp_rows_masked", v.shape(), &[mask.len()]));
        }
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = v.row_slice(i);
            let keep = &mask[i * k..(i + 1) * k];
            if !keep.iter().any(|&b| b) {
                return Err(Error::Validation(format!("row {i} is fully masked")));
            }
            let it = row.iter().zip(keep).filter(|(_, &b)| b).map(|(&x, _)| x);
            out.push(kernels::logsumexp(it));
        }
        Ok(self.unary(
            Tensor::new(&[m, 1], out)?,
            Op::LogSumExpRows(self.id, Some(mask.into())),
        ))
    }

    /// Log-sum-exp within each segment of a column vector, `[M, 1] -> [S, 1]`.
    pub fn segment_logsumexp(&self, segs: &Segments) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != [segs.total(), 1] {
            return Err(Error::shape("segment_logsumexp", v.shape(), &[segs.total(), 1]));
        }
        let out: Vec<f64> = segs
            .iter()
            .map(|r| kernels::logsumexp(v.data()[r].iter().copied()))
            .collect();
        Ok(self.unary(
            Tensor::new(&[segs.len(), 1], out)?,
            Op::SegmentLogSumExp(self.id, segs.clone()),
        ))
    }

    /// Softmax within each segment of a column vector.
    pub fn segment_softmax(&self, segs: &Segments) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != [segs.total(), 1] {
            return Err(Error::shape("segment_softmax", v.shape(), &[segs.total(), 1]));
        }
        let mut out = v.data().to_vec();
        for r in segs.iter() {
            kernels::softmax_in_place(&mut out[r]);
        }
        Ok(self.unary(
            Tensor::new(v.shape(), out)?,
            Op::SegmentSoftmax(self.id, segs.clone()),
        ))
    }

    fn segment_reduce(&self, segs: &Segments, mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        let (m, k) = v.dims2()?;
        check_segments("segment_sum", m, segs)?;
        let mut out = vec![0.0; segs.len() * k];
        for (s, r) in segs.iter().enumerate() {
            let w = if mean { 1.0 / r.len() as f64 } else { 1.0 };
            let dst = &mut out[s * k..(s + 1) * k];
            for i in r {
                dst.iter_mut().zip(v.row_slice(i)).for_each(|(d, x)| *d += x * w);
            }
        }
        let op = if mean {
            Op::SegmentMean(self.id, segs.clone())
        } else {
            Op::SegmentSum(self.id, segs.clone())
        };
        Ok(self.unary(Tensor::new(&[segs.len(), k], out)?, op))
    }

    /// Sum of rows within each segment, `[M, K] -> [S, K]`.
    pub fn segment_sum(&self, segs: &Segments) -> Result<Var<'t>> {
        self.segment_reduce(segs, false)
    }

    /// Mean of rows within each segment, `[M, K] -> [S, K]`.
    pub fn segment_mean(&self, segs: &Segments) -> Result<Var<'t>> {
        self.segment_reduce(segs, true)
    }

    /// Scaled dot-product self-attention applied independently to each
    /// row block: `softmax(q k^T * scale) v` per segment.
    pub fn block_attention(
        &self,
        k: &Var<'t>,
        v: &Var<'t>,
        segs: &Segments,
        scale: f64,
    ) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        same_shape("block_attention", &qv, &kv)?;
        same_shape("block_attention", &qv, &vv)?;
        let (m, d) = qv.dims2()?;
        check_segments("block_attention", m, segs)?;
        let mut out = vec![0.0; m * d];
        for r in segs.iter() {
            let span = r.start * d..r.end * d;
            let p = kernels::block_attention_probs(
                &qv.data()[span.clone()],
                &kv.data()[span.clone()],
                r.len(),
                d,
                scale,
            );
            gemm(r.len(), r.len(), d, &p, false, &vv.data()[span.clone()], false, &mut out[span], false);
        }
        let rg = self.requires_grad() || k.requires_grad() || v.requires_grad();
        Ok(self.tape.push(
            Tensor::new(&[m, d], out)?,
            Op::BlockAttention {
                q: self.id,
                k: k.id,
                v: v.id,
                segments: segs.clone(),
                scale,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        self.unary(Tensor::scalar(v.sum() / v.len() as f64), Op::Mean(self.id))
    }

    /// Column sums, `[M, K] -> [1, K]`.
    pub fn sum_axis0(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (m, k) = v.dims2()?;
        let mut out = vec![0.0; k];
        for i in 0..m {
            out.iter_mut().zip(v.row_slice(i)).for_each(|(s, x)| *s += x);
        }
        Ok(self.unary(Tensor::new(&[1, k], out)?, Op::SumAxis0(self.id)))
    }

    /// Row sums, `[M, K] -> [M, 1]`.
    pub fn sum_axis1(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (m, _) = v.dims2()?;
        let out = (0..m).map(|i| v.row_slice(i).iter().sum()).collect();
        Ok(self.unary(Tensor::new(&[m, 1], out)?, Op::SumAxis1(self.id)))
    }

    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, ka) = a.dims2()?;
        let (mb, kb) = b.dims2()?;
        if m != mb {
            return Err(Error::shape("concat_cols", a.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(m * (ka + kb));
        for i in 0..m {
            out.extend_from_slice(a.row_slice(i));
            out.extend_from_slice(b.row_slice(i));
        }
        Ok(self.binary(
            other,
            Tensor::new(&[m, ka + kb], out)?,
            Op::ConcatCols(self.id, other.id),
        ))
    }

    /// Stacks row blocks (any rank, matching trailing dimensions).
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat_rows of nothing".into()))?;
        let head = first.value();
        let tail = head.shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", head.shape(), v.shape()));
            }
            rows += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(Var::requires_grad);
        Ok(first.tape.push(
            Tensor::new(&shape, out)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Selects rows by index, `[V, K] -> [idx.len(), K]`; repeated indices allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (m, k) = v.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", v.shape(), &[bad]));
        }
        if idx.is_empty() {
            return Err(Error::Validation("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            out.extend_from_slice(v.row_slice(i));
        }
        Ok(self.unary(
            Tensor::new(&[idx.len(), k], out)?,
            Op::GatherRows(self.id, idx.into()),
        ))
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.shape()[0];
        if start >= end || end > n {
            return Err(Error::shape("slice_rows", v.shape(), &[start, end]));
        }
        let per = v.len() / n;
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let out = v.data()[start * per..end * per].to_vec();
        Ok(self.unary(Tensor::new(&shape, out)?, Op::SliceRows(self.id, start)))
    }

    /// Scales each row to unit L2 norm; rows with norm `<= NORM_EPS` are an error.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (m, k) = v.dims2()?;
        let mut out = v.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * k..(i + 1) * k];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::NumericDomain(format!(
                    "row {i} has norm {norm:e}, at or below {NORM_EPS:e}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(self.unary(Tensor::new(&[m, k], out)?, Op::L2NormalizeRows(self.id)))
    }

    /// Stop-gradient: same values, no path back to `self`.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push((*self.value()).clone(), Op::Leaf, false)
    }

    /// 2-D convolution over `[N, C, H, W]` with weight `[O, C, k, k]` and bias `[O]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: &Var<'t>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (&[n, c, h, wd], &[o, ci, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        };
        if c != ci || kh != kw || b.len() != o || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            out_channels: o,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geometry, x.data(), w.data(), b.data());
        let shape = [n, o, geometry.out_height(), geometry.out_width()];
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geometry,
            },
            rg,
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::shape("global_avg_pool", x.shape(), &[0, 0, 0, 0]));
        };
        let plane = h * w;
        let out = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.unary(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(self.id)))
    }
}
