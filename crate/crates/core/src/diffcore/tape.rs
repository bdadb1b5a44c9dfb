//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and enough saved
//! state to run its vector-Jacobian product. Nodes are appended in execution
//! order, so walking the tape backwards from the loss is a valid reverse
//! topological order and visits every node once. Gradients accumulate
//! additively wherever a value fans out.

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalisation uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Float> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul {
        a: Var,
        b: Var,
        scale: F,
    },
    Scale(Var, F),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    MeanOf(Vec<Var>),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Softmax2d {
        x: Var,
        temperature: F,
    },
    SpatialExpect {
        p: Var,
        rows: Vec<F>,
        cols: Vec<F>,
    },
    SoftmaxExpect {
        x: Var,
        temperature: F,
        probs: Vec<F>,
        rows: Vec<F>,
        cols: Vec<F>,
    },
}

/// The computation tape: an ordered record of executed primitives.
pub struct Tape<F: Float> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// LSTM weights bound on a tape. Gate rows are ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    /// Optional projection applied to the emitted hidden state.
    pub proj: Option<Var>,
}

fn planes_of(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    let hw = shape[n - 2] * shape[n - 1];
    (shape[..n - 2].iter().product(), hw)
}

fn as_bchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, c, h, w] => Ok([b, c, h, w]),
        [c, h, w] => Ok([1, c, h, w]),
        _ => Err(Error::shape(
            op,
            format!("expected [B,C,H,W] or [C,H,W], got {shape:?}"),
        )),
    }
}

const LANES: usize = 8;

/// Sum with eight interleaved accumulators, so the reduction vectorises while
/// its order stays fixed.
fn lane_sum<F: Float>(xs: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    let mut s = acc.iter().fold(F::zero(), |a, &b| a + b);
    for &v in tail {
        s += v;
    }
    s
}

fn lane_dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(F::zero(), |a, &b| a + b);
    for (&x, &y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

fn lane_sum_sq_dev<F: Float>(xs: &[F], mean: F) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let d = c[l] - mean;
            acc[l] += d * d;
        }
    }
    let mut s = acc.iter().fold(F::zero(), |a, &b| a + b);
    for &v in tail {
        s += (v - mean) * (v - mean);
    }
    s
}

fn im2col<F: Float>(x: &[F], c_in: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [F]) {
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].fill(F::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0).min(w)..].fill(F::zero());
                }
            }
        }
    }
}

fn col2im_add<F: Float>(cols: &[F], c_in: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [F]) {
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let ox = kx as isize - pad as isize;
                let oy = ky as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + ox) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    for (d, &g) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let src = &self.values[x.0];
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("unary preserves shape");
        let req = self.requires[x.0];
        self.push(value, op, req)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(value, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mul_scaled(a, b, F::one())
    }

    /// Elementwise `scale * a * b`.
    pub fn mul_scaled(&mut self, a: Var, b: Var, scale: F) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul { a, b, scale }, |x, y| x * y * scale)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Elementwise `max(0, x)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| F::one() / (F::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.values[x.0].data().iter().copied().sum();
        let req = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let s: F = t.data().iter().copied().sum();
        let m = s / F::from_usize(t.numel()).unwrap();
        let req = self.requires[x.0];
        self.push(Tensor::scalar(m), Op::Mean(x), req)
    }

    /// Mean squared difference, reduced over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Elementwise mean of equally shaped values.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean_of needs at least one input".into()))?;
        for &x in &xs[1..] {
            self.same_shape("mean_of", first, x)?;
        }
        let inv = F::one() / F::from_usize(xs.len()).unwrap();
        let mut acc = self.values[first.0].data().to_vec();
        for &x in &xs[1..] {
            for (a, &v) in acc.iter_mut().zip(self.values[x.0].data()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a *= inv;
        }
        let value = Tensor::new(self.shape(first), acc)?;
        let req = xs.iter().any(|x| self.requires[x.0]);
        Ok(self.push(value, Op::MeanOf(xs.to_vec()), req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[x.0].clone().reshape(shape)?;
        let req = self.requires[x.0];
        Ok(self.push(value, Op::Reshape(x), req))
    }

    /// Concatenates `[B, D_i]` matrices along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = match xs.first() {
            Some(&x) => self.rows_cols("concat_cols", x)?.0,
            None => return Err(Error::InvalidArgument("concat_cols needs inputs".into())),
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.rows_cols("concat_cols", x)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row count {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.values[x.0].data()[r * c..(r + 1) * c]);
            }
        }
        let req = xs.iter().any(|x| self.requires[x.0]);
        Ok(self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(xs.to_vec()), req))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols("slice_cols", x)?;
        if start + len > cols || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {cols}", start + len),
            ));
        }
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let req = self.requires[x.0];
        Ok(self.push(Tensor::new(&[rows, len], data)?, Op::SliceCols { x, start }, req))
    }

    /// Gathers entries along the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::shape("select_rows", format!("row {bad} of {}", shape[0])));
        }
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let req = self.requires[x.0];
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::SelectRows { x, rows: rows.to_vec() },
            req,
        ))
    }

    fn rows_cols(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            [c] => Ok((1, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `x W^T + b` for `x` of shape `[B, D_in]` (or `[D_in]`) and `W` of shape `[D_out, D_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vector_in = self.shape(x).len() == 1;
        let (rows, d_in) = self.rows_cols("linear", x)?;
        let (d_out, w_in) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape("linear", format!("weight must be 2-D, got {s:?}"))),
        };
        if w_in != d_in {
            return Err(Error::shape("linear", format!("input width {d_in} vs weight {w_in}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear", format!("bias {:?} vs {d_out}", self.shape(b))));
            }
        }
        let mut out = vec![F::zero(); rows * d_out];
        if let Some(b) = b {
            let bias = self.values[b.0].data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        F::gemm(
            rows,
            d_in,
            d_out,
            F::one(),
            self.values[x.0].data(),
            (d_in, 1),
            self.values[w.0].data(),
            (1, d_in),
            F::one(),
            &mut out,
            (d_out, 1),
        );
        let shape: Vec<usize> = if vector_in { vec![d_out] } else { vec![rows, d_out] };
        let req = self.requires[x.0] || self.requires[w.0] || b.is_some_and(|b| self.requires[b.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, req))
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    ///
    /// `x` is `[B, C_in, H, W]` (or `[C_in, H, W]`), `w` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let x_shape = self.shape(x).to_vec();
        let [batch, c_in, h, wd] = as_bchw("conv2d", &x_shape)?;
        let [c_out, w_in, k, k2] = match *self.shape(w) {
            [a, b, c, d] => [a, b, c, d],
            ref s => return Err(Error::shape("conv2d", format!("weight must be 4-D, got {s:?}"))),
        };
        if w_in != c_in || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c_in}, weight {:?}", self.shape(w)),
            ));
        }
        if 2 * pad + 1 != k {
            return Err(Error::shape(
                "conv2d",
                format!("padding {pad} does not preserve size for k={k}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs {c_out}", self.shape(b))));
            }
        }
        let hw = h * wd;
        let kk = c_in * k * k;
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let mut out = vec![F::zero(); batch * c_out * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![F::zero(); kk * hw] };
        for f in 0..batch {
            let xf = &xv[f * c_in * hw..(f + 1) * c_in * hw];
            let yf = &mut out[f * c_out * hw..(f + 1) * c_out * hw];
            if let Some(b) = b {
                for (co, &bv) in self.values[b.0].data().iter().enumerate() {
                    yf[co * hw..(co + 1) * hw].fill(bv);
                }
            }
            let src: &[F] = if k == 1 {
                xf
            } else {
                im2col(xf, c_in, h, wd, k, pad, &mut cols);
                &cols
            };
            F::gemm(
                c_out,
                kk,
                hw,
                F::one(),
                wv,
                (kk, 1),
                src,
                (hw, 1),
                F::one(),
                yf,
                (hw, 1),
            );
        }
        let mut shape = x_shape;
        let n = shape.len();
        shape[n - 3] = c_out;
        let req = self.requires[x.0] || self.requires[w.0] || b.is_some_and(|b| self.requires[b.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, k, pad }, req))
    }

    /// Per-channel batch normalisation over `(B, H, W)` followed by the affine `gamma`, `beta`.
    ///
    /// In [`NormMode::Train`] batch statistics are used and `stats` is updated
    /// with momentum 0.1 (unbiased variance); in [`NormMode::Eval`] `stats` is used as is.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<F>,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [batch, c, h, w] = as_bchw("batchnorm2d", &shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("affine/stat sizes must equal {c} channels"),
            ));
        }
        let hw = h * w;
        let count = batch * hw;
        if mode == NormMode::Train && count < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm2d in train mode needs at least two values per channel".into(),
            ));
        }
        let eps = F::lit(BN_EPS);
        let xv = self.values[x.0].data();
        let gv = self.values[gamma.0].data();
        let bv = self.values[beta.0].data();
        let mut inv_std = vec![F::zero(); c];
        let mut means = vec![F::zero(); c];
        if mode == NormMode::Train {
            let n = F::from_usize(count).unwrap();
            let momentum = F::lit(BN_MOMENTUM);
            for ch in 0..c {
                let planes = || (0..batch).map(move |f| &xv[(f * c + ch) * hw..][..hw]);
                let mean = planes().map(lane_sum).fold(F::zero(), |a, b| a + b) / n;
                let ss = planes().map(|p| lane_sum_sq_dev(p, mean)).fold(F::zero(), |a, b| a + b);
                let var = ss / n;
                means[ch] = mean;
                inv_std[ch] = F::one() / (var + eps).sqrt();
                let unbiased = ss / (n - F::one());
                stats.mean[ch] = (F::one() - momentum) * stats.mean[ch] + momentum * mean;
                stats.var[ch] = (F::one() - momentum) * stats.var[ch] + momentum * unbiased;
            }
        } else {
            for ch in 0..c {
                means[ch] = stats.mean[ch];
                inv_std[ch] = F::one() / (stats.var[ch] + eps).sqrt();
            }
        }
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for (i, ((xp, hp), op)) in xv
            .chunks_exact(hw)
            .zip(xhat.chunks_exact_mut(hw))
            .zip(out.chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = i % c;
            let (m, s, g, b) = (means[ch], inv_std[ch], gv[ch], bv[ch]);
            for ((&xi, h), o) in xp.iter().zip(hp.iter_mut()).zip(op.iter_mut()) {
                let xh = (xi - m) * s;
                *h = xh;
                *o = g * xh + b;
            }
        }
        let req = self.requires[x.0] || self.requires[gamma.0] || self.requires[beta.0];
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
            req,
        ))
    }

    /// Softmax over the two trailing (spatial) axes of every plane.
    pub fn softmax2d(&mut self, x: Var) -> Result<Var> {
        self.softmax2d_tempered(x, F::one())
    }

    /// `softmax2d(x / temperature)`, max-subtracted for stability.
    pub fn softmax2d_tempered(&mut self, x: Var, temperature: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("softmax2d", format!("needs spatial axes, got {shape:?}")));
        }
        let (planes, hw) = planes_of(&shape);
        let xv = self.values[x.0].data();
        let mut out = vec![F::zero(); xv.len()];
        for p in 0..planes {
            let src = &xv[p * hw..(p + 1) * hw];
            let dst = &mut out[p * hw..(p + 1) * hw];
            let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut z = F::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = ((v - max) / temperature).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / z;
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax2d { x, temperature }, req))
    }

    /// Expected `(row, col)` coordinate of each spatial distribution in `p`.
    ///
    /// `rows` and `cols` give the coordinate of every cell of one plane. The
    /// output replaces the two spatial axes of `p` with a trailing axis of 2.
    pub fn spatial_expect(&mut self, p: Var, rows: &[F], cols: &[F]) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "spatial_expect",
                format!("needs spatial axes, got {shape:?}"),
            ));
        }
        let (planes, hw) = planes_of(&shape);
        if rows.len() != hw || cols.len() != hw {
            return Err(Error::shape(
                "spatial_expect",
                format!("embedding size {} vs {hw}", rows.len()),
            ));
        }
        let pv = self.values[p.0].data();
        let mut out = Vec::with_capacity(planes * 2);
        for pl in 0..planes {
            let src = &pv[pl * hw..(pl + 1) * hw];
            let mut ey = F::zero();
            let mut ex = F::zero();
            for i in 0..hw {
                ey += src[i] * rows[i];
                ex += src[i] * cols[i];
            }
            out.push(ey);
            out.push(ex);
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(2);
        let req = self.requires[p.0];
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::SpatialExpect {
                p,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            req,
        ))
    }

    /// `spatial_expect(softmax2d_tempered(x, temperature))` fused.
    ///
    /// Each coordinate is computed as `sum(e * r) / sum(e)` over the unnormalised
    /// weights `e`, which keeps it inside the hull of `rows` and `cols` under
    /// rounding whenever the coordinates lie in `[0, 1]`.
    pub fn softmax_expect(&mut self, x: Var, temperature: F, rows: &[F], cols: &[F]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "softmax_expect",
                format!("needs spatial axes, got {shape:?}"),
            ));
        }
        let (planes, hw) = planes_of(&shape);
        if rows.len() != hw || cols.len() != hw {
            return Err(Error::shape(
                "softmax_expect",
                format!("embedding size {} vs {hw}", rows.len()),
            ));
        }
        let xv = self.values[x.0].data();
        let mut probs = vec![F::zero(); xv.len()];
        let mut out = Vec::with_capacity(planes * 2);
        for pl in 0..planes {
            let src = &xv[pl * hw..(pl + 1) * hw];
            let e = &mut probs[pl * hw..(pl + 1) * hw];
            let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let (mut z, mut ey, mut ex) = (F::zero(), F::zero(), F::zero());
            for i in 0..hw {
                e[i] = ((src[i] - max) / temperature).exp();
                z += e[i];
                ey += e[i] * rows[i];
                ex += e[i] * cols[i];
            }
            out.push(ey / z);
            out.push(ex / z);
            e.iter_mut().for_each(|v| *v = *v / z);
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(2);
        let req = self.requires[x.0];
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::SoftmaxExpect {
                x,
                temperature,
                probs,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            req,
        ))
    }

    /// One LSTM step. Returns `(h', c')` with `c' = f*c + i*g` and `h' = o*tanh(c')`,
    /// optionally followed by a hidden-state projection.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
        let (_, cell) = self.rows_cols("lstm_cell", c)?;
        let gx = self.linear(x, p.w_ih, Some(p.bias))?;
        let gh = self.linear(h, p.w_hh, None)?;
        if self.shape(gx) != self.shape(gh) || self.rows_cols("lstm_cell", gx)?.1 != 4 * cell {
            return Err(Error::shape(
                "lstm_cell",
                format!("gate widths {:?}/{:?} for cell {cell}", self.shape(gx), self.shape(gh)),
            ));
        }
        let gates = self.add(gx, gh)?;
        let gates = self.as_matrix(gates)?;
        let c = self.as_matrix(c)?;
        let i = self.slice_cols(gates, 0, cell)?;
        let f = self.slice_cols(gates, cell, cell)?;
        let g = self.slice_cols(gates, 2 * cell, cell)?;
        let o = self.slice_cols(gates, 3 * cell, cell)?;
        let i = self.sigmoid(i);
        let f = self.sigmoid(f);
        let g = self.tanh(g);
        let o = self.sigmoid(o);
        let keep = self.mul(f, c)?;
        let write = self.mul(i, g)?;
        let c_next = self.add(keep, write)?;
        let squashed = self.tanh(c_next);
        let mut h_next = self.mul(o, squashed)?;
        if let Some(proj) = p.proj {
            h_next = self.linear(h_next, proj, None)?;
        }
        Ok((h_next, c_next))
    }

    fn as_matrix(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() == 1 {
            let n = self.shape(x)[0];
            self.reshape(x, &[1, n])
        } else {
            Ok(x)
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<F>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Leaves keep their gradients, and repeated calls accumulate into them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.accumulate(loss, vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) || !self.requires[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gout: Vec<F>) {
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*b, gout.clone());
                self.accumulate(*a, gout);
            }
            Op::Sub(a, b) => {
                self.accumulate(*b, gout.iter().map(|&g| -g).collect());
                self.accumulate(*a, gout);
            }
            Op::Mul { a, b, scale } => {
                let (a, b, s) = (*a, *b, *scale);
                if self.requires[a.0] {
                    let ga = gout
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(&g, &y)| g * y * s)
                        .collect();
                    self.accumulate(a, ga);
                }
                if self.requires[b.0] {
                    let gb = gout
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(&g, &x)| g * x * s)
                        .collect();
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(*x, gout.into_iter().map(|g| g * s).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(*x, gout),
            Op::Square(x) => {
                let two = F::lit(2.0);
                let g = gout
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&g, &v)| two * v * g)
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Relu(x) => {
                let g = gout
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Sigmoid(x) => {
                let g = gout
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&g, &y)| g * y * (F::one() - y))
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Tanh(x) => {
                let g = gout
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&g, &y)| g * (F::one() - y * y))
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Sum(x) => {
                let n = self.values[x.0].numel();
                self.accumulate(*x, vec![gout[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.values[x.0].numel();
                let g = gout[0] / F::from_usize(n).unwrap();
                self.accumulate(*x, vec![g; n]);
            }
            Op::MeanOf(xs) => {
                let inv = F::one() / F::from_usize(xs.len()).unwrap();
                let g: Vec<F> = gout.iter().map(|&v| v * inv).collect();
                for &x in xs {
                    self.accumulate(x, g.clone());
                }
            }
            Op::ConcatCols(xs) => {
                let total = self.values[i].shape()[1];
                let rows = self.values[i].shape()[0];
                let mut offset = 0;
                for &x in xs {
                    let width = self.values[x.0].numel() / rows;
                    if self.requires[x.0] {
                        let mut g = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            g.extend_from_slice(&gout[r * total + offset..r * total + offset + width]);
                        }
                        self.accumulate(x, g);
                    }
                    offset += width;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (self.values[i].shape()[0], self.values[i].shape()[1]);
                let cols = self.values[x.0].numel() / rows;
                let mut g = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + len].copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, g);
            }
            Op::SelectRows { x, rows } => {
                let n = self.values[x.0].numel();
                let inner = n / self.values[x.0].shape()[0];
                let mut g = vec![F::zero(); n];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &s) in g[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&gout[k * inner..(k + 1) * inner])
                    {
                        *d += s;
                    }
                }
                self.accumulate(*x, g);
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, &gout),
            Op::Conv2d { x, w, b, k, pad } => self.backprop_conv(*x, *w, *b, *k, *pad, &gout),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.values[x.0].shape().to_vec();
                let [batch, c, h, w] = as_bchw("batchnorm2d", &shape).expect("checked in forward");
                let hw = h * w;
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for (i, (gp, hp)) in gout.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                    let ch = i % c;
                    dgamma[ch] += lane_dot(gp, hp);
                    dbeta[ch] += lane_sum(gp);
                }
                if self.requires[x.0] {
                    let gv = self.values[gamma.0].data();
                    let mut dx = vec![F::zero(); gout.len()];
                    let n = F::from_usize(batch * hw).unwrap();
                    for (i, ((dp, gp), hp)) in dx
                        .chunks_exact_mut(hw)
                        .zip(gout.chunks_exact(hw))
                        .zip(xhat.chunks_exact(hw))
                        .enumerate()
                    {
                        let ch = i % c;
                        let k = gv[ch] * inv_std[ch];
                        if *batch_stats {
                            let mdb = dbeta[ch] / n;
                            let mdg = dgamma[ch] / n;
                            for ((d, &g), &xh) in dp.iter_mut().zip(gp).zip(hp) {
                                *d = k * (g - mdb - xh * mdg);
                            }
                        } else {
                            for (d, &g) in dp.iter_mut().zip(gp) {
                                *d = k * g;
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Softmax2d { x, temperature } => {
                let (planes, hw) = planes_of(self.values[i].shape());
                let y = self.values[i].data();
                let mut g = vec![F::zero(); y.len()];
                for p in 0..planes {
                    let r = p * hw..(p + 1) * hw;
                    let dot: F = gout[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in r {
                        g[j] = y[j] * (gout[j] - dot) / *temperature;
                    }
                }
                self.accumulate(*x, g);
            }
            Op::SoftmaxExpect {
                x,
                temperature,
                probs,
                rows,
                cols,
            } => {
                let (planes, hw) = planes_of(self.values[x.0].shape());
                let y = self.values[i].data();
                let mut g = vec![F::zero(); planes * hw];
                for pl in 0..planes {
                    let (gy, gx) = (gout[2 * pl], gout[2 * pl + 1]);
                    let (ey, ex) = (y[2 * pl], y[2 * pl + 1]);
                    for j in 0..hw {
                        let k = pl * hw + j;
                        g[k] = probs[k] * (gy * (rows[j] - ey) + gx * (cols[j] - ex)) / *temperature;
                    }
                }
                self.accumulate(*x, g);
            }
            Op::SpatialExpect { p, rows, cols } => {
                let (planes, hw) = planes_of(self.values[p.0].shape());
                let mut g = vec![F::zero(); planes * hw];
                for pl in 0..planes {
                    let (gy, gx) = (gout[2 * pl], gout[2 * pl + 1]);
                    for j in 0..hw {
                        g[pl * hw + j] = gy * rows[j] + gx * cols[j];
                    }
                }
                self.accumulate(*p, g);
            }
        }
        self.ops[i] = op;
    }

    fn backprop_linear(&mut self, x: Var, w: Var, b: Option<Var>, gout: &[F]) {
        let (rows, d_in) = self.rows_cols("linear", x).expect("checked in forward");
        let d_out = self.values[w.0].shape()[0];
        if self.requires[x.0] {
            let mut gx = vec![F::zero(); rows * d_in];
            F::gemm(
                rows,
                d_out,
                d_in,
                F::one(),
                gout,
                (d_out, 1),
                self.values[w.0].data(),
                (d_in, 1),
                F::zero(),
                &mut gx,
                (d_in, 1),
            );
            self.accumulate(x, gx);
        }
        if self.requires[w.0] {
            let mut gw = vec![F::zero(); d_out * d_in];
            F::gemm(
                d_out,
                rows,
                d_in,
                F::one(),
                gout,
                (1, d_out),
                self.values[x.0].data(),
                (d_in, 1),
                F::zero(),
                &mut gw,
                (d_in, 1),
            );
            self.accumulate(w, gw);
        }
        if let Some(b) = b {
            if self.requires[b.0] {
                let mut gb = vec![F::zero(); d_out];
                for row in gout.chunks(d_out) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                self.accumulate(b, gb);
            }
        }
    }

    fn backprop_conv(&mut self, x: Var, w: Var, b: Option<Var>, k: usize, pad: usize, gout: &[F]) {
        let [batch, c_in, h, wd] = as_bchw("conv2d", self.values[x.0].shape()).expect("checked in forward");
        let c_out = self.values[w.0].shape()[0];
        let hw = h * wd;
        let kk = c_in * k * k;
        let need_x = self.requires[x.0];
        let need_w = self.requires[w.0];
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let mut gx = if need_x {
            vec![F::zero(); batch * c_in * hw]
        } else {
            Vec::new()
        };
        let mut gw = vec![F::zero(); c_out * kk];
        let mut cols = if k == 1 { Vec::new() } else { vec![F::zero(); kk * hw] };
        let mut dcols = if need_x && k != 1 {
            vec![F::zero(); kk * hw]
        } else {
            Vec::new()
        };
        for f in 0..batch {
            let gy = &gout[f * c_out * hw..(f + 1) * c_out * hw];
            let xf = &xv[f * c_in * hw..(f + 1) * c_in * hw];
            if need_w {
                let src: &[F] = if k == 1 {
                    xf
                } else {
                    im2col(xf, c_in, h, wd, k, pad, &mut cols);
                    &cols
                };
                F::gemm(
                    c_out,
                    hw,
                    kk,
                    F::one(),
                    gy,
                    (hw, 1),
                    src,
                    (1, hw),
                    F::one(),
                    &mut gw,
                    (kk, 1),
                );
            }
            if need_x {
                let gxf = &mut gx[f * c_in * hw..(f + 1) * c_in * hw];
                if k == 1 {
                    F::gemm(
                        kk,
                        c_out,
                        hw,
                        F::one(),
                        wv,
                        (1, kk),
                        gy,
                        (hw, 1),
                        F::zero(),
                        gxf,
                        (hw, 1),
                    );
                } else {
                    F::gemm(
                        kk,
                        c_out,
                        hw,
                        F::one(),
                        wv,
                        (1, kk),
                        gy,
                        (hw, 1),
                        F::zero(),
                        &mut dcols,
                        (hw, 1),
                    );
                    col2im_add(&dcols, c_in, h, wd, k, pad, gxf);
                }
            }
        }
        if let Some(b) = b {
            if self.requires[b.0] {
                let mut gb = vec![F::zero(); c_out];
                for f in 0..batch {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        *acc += lane_sum(&gout[(f * c_out + co) * hw..][..hw]);
                    }
                }
                self.accumulate(b, gb);
            }
        }
        if need_w {
            self.accumulate(w, gw);
        }
        if need_x {
            self.accumulate(x, gx);
        }
    }
}
