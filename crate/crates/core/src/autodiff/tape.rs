//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and enough saved
//! state to run its backward rule. Parameters enter the tape by copy through
//! [`Tape::param`]; their gradients land in the owning [`ParamStore`].

use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Spmm(Arc<CsrMatrix>, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        positions: Vec<usize>,
        src_rows: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    BceWithLogits {
        z: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds `row` (one value per column) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(Error::Shape(format!(
                "add_row: row of {} values for {} columns",
                self.value(row).numel(),
                cols
            )));
        }
        let r = self.data(row).to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(cols.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `a · b` with `a` viewed as `rows × k` and `b` a `k × n` matrix. Leading
    /// dimensions of `a` are kept.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || tb.shape()[0] != ta.cols() {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let data = gemm_nn(ta.data(), m, k, tb.data(), n);
        let mut shape = ta.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = n,
            None => shape.push(n),
        }
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Batched `a[i] · b[i]` (or `a[i] · b[i]ᵀ`) over rank-3 tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("batch_matmul: {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::Shape(format!(
                "batch_matmul: inner dims {k} vs {kb} (trans_b={trans_b})"
            )));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let out = if trans_b {
                gemm_nt(ai, m, k, bi, n)
            } else {
                gemm_nn(ai, m, k, bi, n)
            };
            data.extend_from_slice(&out);
        }
        let v = Tensor::new(vec![batch, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    /// Constant sparse matrix times dense `h` (viewed as rows × d). No gradient
    /// flows to the sparse operand.
    pub fn spmm(&mut self, a: Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let th = self.value(h);
        if th.rows() != a.ncols() {
            return Err(Error::Shape(format!(
                "spmm: sparse {}x{} times {:?}",
                a.nrows(),
                a.ncols(),
                th.shape()
            )));
        }
        let d = th.cols();
        let data = a.mul_dense(th.data(), d)?;
        let v = Tensor::new(vec![a.nrows(), d], data)?;
        let rg = self.rg(h);
        Ok(self.push(v, Op::Spmm(a, h), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.cols().max(1);
        for row in v.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Per-row normalization over the last dimension, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(Error::Shape(format!(
                    "layer_norm: affine of {} values for {} columns",
                    self.value(p).numel(),
                    cols
                )));
            }
        }
        let xs = self.value(x);
        let rows = xs.rows();
        let mut xhat = vec![0.0; xs.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xs.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = xhat.clone();
        for chunk in out.chunks_mut(cols.max(1)) {
            for ((o, gv), bv) in chunk.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let v = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. With `train == false` or `p == 0` this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout { x, mask }, rg))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Shape(format!("concat: {} rows vs {}", t.rows(), rows)));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start + len > cols {
            return Err(Error::Shape(format!("slice_cols {start}..{} of {cols}", start + len)));
        }
        let data = (0..t.rows())
            .flat_map(|r| t.row(r)[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceCols { x, start }, rg))
    }

    /// Rows of `x` (viewed as a matrix) at `index`; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::out_of_range("row", i, rows));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![index.len(), cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Copy of `base` whose rows `positions[i]` are replaced by `src` rows
    /// `src_rows[i]`. Positions must be distinct.
    pub fn scatter_rows(&mut self, base: Var, src: Var, positions: &[usize], src_rows: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        if tb.cols() != ts.cols() || positions.len() != src_rows.len() {
            return Err(Error::Shape(format!(
                "scatter_rows: base {:?}, src {:?}, {} positions for {} sources",
                tb.shape(),
                ts.shape(),
                positions.len(),
                src_rows.len()
            )));
        }
        let cols = tb.cols();
        let mut v = tb.clone();
        for (&p, &s) in positions.iter().zip(src_rows) {
            if p >= tb.rows() {
                return Err(Error::out_of_range("row", p, tb.rows()));
            }
            if s >= ts.rows() {
                return Err(Error::out_of_range("row", s, ts.rows()));
            }
            v.data_mut()[p * cols..(p + 1) * cols].copy_from_slice(ts.row(s));
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(
            v,
            Op::ScatterRows {
                base,
                src,
                positions: positions.to_vec(),
                src_rows: src_rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows; result is `1 × cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows.max(1) as f64);
        let v = Tensor::new(vec![1, cols], out).expect("shape");
        let rg = self.rg(x);
        self.push(v, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Mean binary cross-entropy of logits `z` against `{0,1}` labels, in the
    /// overflow-free `max(z,0) − z·y + ln(1 + e^{−|z|})` form.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zs = self.data(z);
        if zs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "bce: {} logits for {} labels",
                zs.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument(format!("label {y} is not 0 or 1")));
        }
        let n = labels.len().max(1) as f64;
        let loss = zs
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                z,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `d loss / d node` back through the tape. Leaf gradients
    /// accumulate on the tape, parameter gradients in `store`; repeated calls add.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            match &self.nodes[i].op {
                Op::Param(id) => store.accumulate_grad(*id, &g),
                op => self.backward_op(op, &self.nodes[i].value, g, &mut grads),
            }
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("handled by caller"),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *b, g.iter().map(|x| -x).collect());
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    acc(grads, *a, g.iter().zip(db).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(grads, *b, g.iter().zip(da).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*row) {
                    let cols = out.cols().max(1);
                    let mut s = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        s.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    acc(grads, *row, s);
                }
                acc(grads, *a, g);
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if self.rg(*a) {
                    acc(grads, *a, gemm_nt(&g, m, n, tb.data(), k));
                }
                if self.rg(*b) {
                    acc(grads, *b, gemm_tn(ta.data(), m, k, &g, n));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = Vec::with_capacity(da.len());
                let mut gb = Vec::with_capacity(db.len());
                for i in 0..batch {
                    let ai = &da[i * m * k..(i + 1) * m * k];
                    let bi = &db[i * k * n..(i + 1) * k * n];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if *trans_b {
                        // out = a·bᵀ with b n×k
                        ga.extend_from_slice(&gemm_nn(gi, m, n, bi, k));
                        gb.extend_from_slice(&gemm_tn(gi, m, n, ai, k));
                    } else {
                        ga.extend_from_slice(&gemm_nt(gi, m, n, bi, k));
                        gb.extend_from_slice(&gemm_tn(ai, m, k, gi, n));
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Spmm(mat, h) => {
                let d = out.cols();
                let gh = mat.transpose().mul_dense(&g, d).expect("shapes validated in forward");
                acc(grads, *h, gh);
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(
                    grads,
                    *a,
                    g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                );
            }
            Op::Softmax(a) => {
                let cols = out.cols().max(1);
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = out.cols().max(1);
                let gm = self.data(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * xr[c];
                            db[c] += gr[c];
                        }
                    }
                    acc(grads, *gamma, dg);
                    acc(grads, *beta, db);
                }
                if self.rg(*x) {
                    let nf = cols as f64;
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dxr, gr), xr)) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let dxhat: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dxr[c] = inv_std[r] / nf * (nf * dxhat[c] - s1 - xr[c] * s2);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (cols, len) = (tx.cols(), out.cols());
                let mut gx = vec![0.0; tx.numel()];
                for (r, gr) in g.chunks(len.max(1)).enumerate() {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(gr);
                }
                acc(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut gx = vec![0.0; tx.numel()];
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        gx[i * cols + c] += g[k * cols + c];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::ScatterRows {
                base,
                src,
                positions,
                src_rows,
            } => {
                let cols = out.cols();
                if self.rg(*src) {
                    let mut gs = vec![0.0; self.value(*src).numel()];
                    for (&p, &s) in positions.iter().zip(src_rows) {
                        for c in 0..cols {
                            gs[s * cols + c] += g[p * cols + c];
                        }
                    }
                    acc(grads, *src, gs);
                }
                if self.rg(*base) {
                    let mut gb = g;
                    for &p in positions {
                        gb[p * cols..(p + 1) * cols].iter_mut().for_each(|x| *x = 0.0);
                    }
                    acc(grads, *base, gb);
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let rows = tx.rows().max(1) as f64;
                let gx = (0..tx.rows()).flat_map(|_| g.iter().map(|v| v / rows)).collect();
                acc(grads, *x, gx);
            }
            Op::Sum(x) => acc(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(grads, *x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Reshape(x) => acc(grads, *x, g),
            Op::BceWithLogits { z, labels } => {
                let n = labels.len().max(1) as f64;
                let gz = self
                    .data(*z)
                    .iter()
                    .zip(labels)
                    .map(|(&zv, &y)| (sigmoid(zv) - y) / n * g[0])
                    .collect();
                acc(grads, *z, gz);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn filled(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Weighted sum so that every output element gets a distinct upstream gradient.
    fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).numel();
        let w = Tensor::new(
            tape.shape(x).to_vec(),
            (0..n).map(|i| 0.3 + (i % 7) as f64 * 0.17).collect(),
        )?;
        let w = tape.constant(w);
        let p = tape.mul(x, w)?;
        Ok(tape.sum(p))
    }

    fn check<F>(f: F, inputs: &[Tensor])
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = grad_check(
            |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y)
            },
            inputs,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel error {}: {:?}",
            report.max_rel_error(),
            report.failures().next()
        );
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, -3.0]), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_accumulates() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let a = tape.sum(x);
        let b = tape.scale(x, 3.0);
        let b = tape.sum(b);
        tape.backward(a, &mut store).unwrap();
        tape.backward(b, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let err = tape.backward(x, &mut ParamStore::new()).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[Tensor::vector(vec![1.0, 2.0])],
            STEP,
            1e-8,
        )
        .unwrap();
        assert!(report.passed());
        let analytic: Vec<f64> = report.entries.iter().map(|e| e.analytic).collect();
        assert_eq!(analytic, vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_sum_against_finite_differences() {
        let report = grad_check(
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[filled(vec![3, 4], 1), filled(vec![4, 2], 2)],
            STEP,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error());
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0]), true);
        let l = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let z2 = tape.leaf(Tensor::vector(vec![30.0]), true);
        let l2 = tape.bce_with_logits(z2, &[1.0]).unwrap();
        assert!(tape.value(l2).item() < 1e-12);

        let z3 = tape.leaf(Tensor::vector(vec![0.0]), true);
        let l3 = tape.bce_with_logits(z3, &[0.0]).unwrap();
        tape.backward(l3, &mut ParamStore::new()).unwrap();
        assert_eq!(tape.grad(z3).unwrap(), &[0.5]);

        assert!(tape.bce_with_logits(z3, &[2.0]).is_err());
    }

    #[test]
    fn spmm_examples_and_mismatch() {
        let mut tape = Tape::new();
        let a = Arc::new(CsrMatrix::from_dense(2, 2, &[0.5, 0.5, 0.5, 0.5]));
        let h = tape.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let out = tape.spmm(a, h).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 1.0, 1.0]);
        let bad = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.spmm(Arc::new(CsrMatrix::identity(2)), bad).is_err());
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let a = filled(vec![3, 4], 11);
        let b = filled(vec![3, 4], 12);
        let row = filled(vec![4], 13);
        let w = filled(vec![4, 5], 14);
        check(|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()]);
        check(|t, v| t.sub(v[0], v[1]), &[a.clone(), b.clone()]);
        check(|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()]);
        check(|t, v| t.add_row(v[0], v[1]), &[a.clone(), row.clone()]);
        check(|t, v| Ok(t.scale(v[0], -0.7)), &[a.clone()]);
        check(|t, v| t.matmul(v[0], v[1]), &[a.clone(), w.clone()]);
        check(|t, v| t.matmul(v[0], v[1]), &[filled(vec![2, 3, 4], 15), w.clone()]);
        check(
            |t, v| t.batch_matmul(v[0], v[1], false),
            &[filled(vec![2, 3, 4], 16), filled(vec![2, 4, 2], 17)],
        );
        check(
            |t, v| t.batch_matmul(v[0], v[1], true),
            &[filled(vec![2, 3, 4], 18), filled(vec![2, 5, 4], 19)],
        );
        let sp = Arc::new(CsrMatrix::from_dense(2, 3, &[0.5, 0.0, 0.25, 0.0, 1.0, -0.5]));
        check(move |t, v| t.spmm(sp.clone(), v[0]), &[a.clone()]);
        check(|t, v| Ok(t.relu(v[0])), &[a.clone()]);
        check(|t, v| Ok(t.sigmoid(v[0])), &[a.clone()]);
        check(|t, v| Ok(t.softmax(v[0])), &[a.clone()]);
        check(
            |t, v| t.layer_norm(v[0], v[1], v[2]),
            &[a.clone(), row.clone(), filled(vec![4], 20)],
        );
        check(
            |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                t.dropout(v[0], 0.4, true, &mut rng)
            },
            &[a.clone()],
        );
        check(|t, v| t.concat(&[v[0], v[1]]), &[a.clone(), filled(vec![3, 2], 21)]);
        check(|t, v| t.slice_cols(v[0], 1, 2), &[a.clone()]);
        check(|t, v| t.gather_rows(v[0], &[2, 0, 2]), &[a.clone()]);
        check(|t, v| t.embedding(v[0], &[1, 1, 0]), &[a.clone()]);
        check(
            |t, v| t.scatter_rows(v[0], v[1], &[0, 2], &[1, 1]),
            &[a.clone(), filled(vec![2, 4], 22)],
        );
        check(|t, v| Ok(t.mean_rows(v[0])), &[a.clone()]);
        check(|t, v| Ok(t.mean(v[0])), &[a.clone()]);
        check(|t, v| t.reshape(v[0], vec![2, 6]), &[a.clone()]);
        check(
            |t, v| {
                let z = t.reshape(v[0], vec![12])?;
                let labels: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
                t.bce_with_logits(z, &labels)
            },
            &[a.clone()],
        );
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.leaf(filled(vec![4, 4], 1), true);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!(*o == 0.0 || (o - 2.0 * i).abs() < 1e-15);
        }
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    fn shape_strategy() -> impl Strategy<Value = (usize, usize)> {
        (1usize..=8, 1usize..=8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn randomized_shapes_pass_grad_check((r, c) in shape_strategy(), k in 1usize..=8, seed in 0u64..1000) {
            let a = filled(vec![r, c], seed);
            let b = filled(vec![r, c], seed + 1);
            let w = filled(vec![c, k], seed + 2);
            check(|t, v| t.matmul(v[0], v[1]), &[a.clone(), w]);
            check(|t, v| Ok(t.softmax(v[0])), &[a.clone()]);
            check(|t, v| t.mul(v[0], v[1]), &[a.clone(), b]);
            // finite differences break down on rows whose entries nearly
            // coincide (truncation error grows like step² / spread³)
            let spread = (0..r)
                .map(|i| {
                    let row = a.row(i);
                    row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min)
                })
                .fold(f64::MAX, f64::min);
            if c > 1 && spread >= 0.05 {
                check(|t, v| t.layer_norm(v[0], v[1], v[2]),
                      &[a.clone(), filled(vec![c], seed + 3), filled(vec![c], seed + 4)]);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant((r, c) in shape_strategy(), shift in -50.0f64..50.0, seed in 0u64..1000) {
            let x = filled(vec![r, c], seed);
            let shifted = Tensor::new(vec![r, c], x.data().iter().map(|v| v + shift).collect()).unwrap();
            let mut tape = Tape::new();
            let a = tape.constant(x);
            let b = tape.constant(shifted);
            let sa = tape.softmax(a);
            let sb = tape.softmax(b);
            for i in 0..r {
                let s: f64 = tape.value(sa).row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
            prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) <= 1e-12);
        }

        #[test]
        fn layer_norm_standardizes_rows(r in 1usize..=8, c in 2usize..=8, scale in 0.1f64..100.0, seed in 0u64..1000) {
            let x = filled(vec![r, c], seed);
            let x = Tensor::new(vec![r, c], x.data().iter().map(|v| v * scale).collect()).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let g = tape.constant(Tensor::full(vec![c], 1.0));
            let b = tape.constant(Tensor::zeros(vec![c]));
            let y = tape.layer_norm(xv, g, b).unwrap();
            for i in 0..r {
                let row = tape.value(y).row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                // the epsilon shifts the variance by eps/var, so nearly
                // constant rows cannot meet the bound
                let src = x.row(i);
                let m = src.iter().sum::<f64>() / c as f64;
                let src_var = src.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
                prop_assume!(src_var > 1e-2);
                prop_assert!(mean.abs() <= 1e-10);
                prop_assert!((var - 1.0).abs() <= 1e-8);
            }
        }

        #[test]
        fn spmm_matches_dense(n in 1usize..=64, d in 1usize..=6, density in 0.0f64..0.5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dense: Vec<f64> = (0..n * n)
                .map(|_| if rng.random::<f64>() < density { rng.random_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let h = filled(vec![n, d], seed + 7);
            let mut want = vec![0.0; n * d];
            for i in 0..n {
                for k in 0..n {
                    for j in 0..d {
                        want[i * d + j] += dense[i * n + k] * h.data()[k * d + j];
                    }
                }
            }
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let out = tape.spmm(Arc::new(CsrMatrix::from_dense(n, n, &dense)), hv).unwrap();
            for (g, w) in tape.value(out).data().iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
            }
        }
    }
}
