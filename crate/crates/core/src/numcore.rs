//! Dense numeric kernel.
//!
//! Row-major `f64` matrices, the handful of layers the encoder is built
//! from (layer normalization, affine maps, softmax), the two losses, plain
//! SGD and a central-difference gradient checker. Every layer exposes an
//! explicit forward and backward function; there is no autodiff graph.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n row vector.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_assign", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Copy of the rows at `indices` (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::invalid(format!(
        "{op}: shape mismatch {}x{} vs {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b`, accumulated into `out`.
pub fn matmul_tn_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) -> Result<()> {
    if a.rows != b.rows || out.rows != a.cols || out.cols != b.cols {
        return Err(shape_err("matmul_tn", a, b));
    }
    for r in 0..a.rows {
        let b_row = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(())
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Values cached by [`layer_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub x_hat: Matrix,
    pub inv_std: Vec<f64>,
}

fn check_ln(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<()> {
    if x.rows == 0 || x.cols == 0 {
        return Err(Error::invalid("layer_norm: empty input"));
    }
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(Error::invalid(format!(
            "layer_norm: gain/bias length {}/{} does not match {} features",
            gain.len(),
            bias.len(),
            x.cols
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm: eps must be positive"));
    }
    Ok(())
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    layer_norm_forward(x, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    check_ln(x, gain, bias, eps)?;
    let f = x.cols as f64;
    let mut x_hat = Matrix::zeros(x.rows, x.cols);
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / f;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = x_hat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = &mut y.data[i * x.cols..(i + 1) * x.cols];
        for j in 0..x.cols {
            yr[j] = gain[j] * x_hat.data[i * x.cols + j] + bias[j];
        }
    }
    Ok((y, LayerNormCache { x_hat, inv_std }))
}

/// Returns `(dx, dgain, dbias)` given the upstream gradient `dy`.
pub fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    gain: &[f64],
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, f) = dy.shape();
    let mut dx = Matrix::zeros(n, f);
    let mut dgain = vec![0.0; f];
    let mut dbias = vec![0.0; f];
    let mut dxh = vec![0.0; f];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.x_hat.row(i);
        for j in 0..f {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxh[j] = dyr[j] * gain[j];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / f as f64;
        let mean_dxh_xh = dot(&dxh, xh) / f as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dgain, dbias)
}

/// `x · w + b` with `b` broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols {
        return Err(Error::invalid(format!(
            "linear: bias length {} does not match output dim {}",
            b.len(),
            w.cols
        )));
    }
    let mut out = matmul(x, w)?;
    for i in 0..out.rows {
        for (o, bv) in out.row_mut(i).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Matrix, w: &Matrix, dout: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let mut dw = Matrix::zeros(w.rows, w.cols);
    matmul_tn_acc(x, dout, &mut dw)?;
    let mut db = vec![0.0; w.cols];
    for i in 0..dout.rows {
        for (d, g) in db.iter_mut().zip(dout.row(i)) {
            *d += g;
        }
    }
    let dx = matmul_nt(dout, w)?;
    Ok((dx, dw, db))
}

/// Stabilized softmax (max logit subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax: empty logits"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a probability. Returns `(loss, dloss/dscore)`,
/// both evaluated at the clamped score.
pub fn bce_loss(score: f64, label: u8) -> Result<(f64, f64)> {
    if label > 1 {
        return Err(Error::invalid(format!("bce_loss: label {label} not in {{0,1}}")));
    }
    let s = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let y = label as f64;
    let loss = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
    let ds = -y / s + (1.0 - y) / (1.0 - s);
    Ok((loss, ds))
}

/// BCE of `sigmoid(logit)`. Returns `(loss, dloss/dlogit)`; the gradient is
/// zero where the probability clamp is active, matching the flat loss there.
pub fn bce_logit_loss(logit: f64, label: u8) -> Result<(f64, f64)> {
    let s = sigmoid(logit);
    let (loss, ds) = bce_loss(s, label)?;
    let clamped = s < BCE_EPS || s > 1.0 - BCE_EPS;
    Ok((loss, if clamped { 0.0 } else { ds * s * (1.0 - s) }))
}

/// Softmax cross-entropy. Returns `(loss, dloss/dlogits)`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "ce_loss: label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad = softmax(logits)?;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// A learnable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    #[serde(skip)]
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        ParamTensor {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows, self.value.cols);
        } else {
            self.grad.fill(0.0);
        }
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.data.len());
        for (a, b) in self.grad.data.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Anything that owns an ordered set of [`ParamTensor`]s.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&ParamTensor>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }
}

impl ParamSet for Vec<ParamTensor> {
    fn tensors(&self) -> Vec<&ParamTensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.iter_mut().collect()
    }
}

/// `value -= lr * grad` for every tensor, then zero the gradients.
pub fn sgd_step<P: ParamSet + ?Sized>(params: &mut P, lr: f64) {
    for t in params.tensors_mut() {
        for (v, g) in t.value.data.iter_mut().zip(&t.grad.data) {
            *v -= lr * g;
        }
        t.zero_grad();
    }
}

/// Central-difference gradient check.
///
/// The analytic gradient must already sit in each tensor's `grad` buffer.
/// Returns the max over all entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<P, F>(params: &mut P, mut f: F, h: f64) -> Result<f64>
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> f64,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("grad_check: step {h} outside [1e-6, 1e-4]")));
    }
    let n_tensors = params.tensors().len();
    let mut worst = 0.0f64;
    for t in 0..n_tensors {
        let len = params.tensors()[t].value.data.len();
        for i in 0..len {
            let (orig, analytic) = {
                let p = &params.tensors()[t];
                (p.value.data[i], p.grad.data[i])
            };
            params.tensors_mut()[t].value.data[i] = orig + h;
            let fp = f(params);
            params.tensors_mut()[t].value.data[i] = orig - h;
            let fm = f(params);
            params.tensors_mut()[t].value.data[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                let name = params.tensors()[t].name.clone();
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite objective perturbing {name}[{i}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let denom = 1.0f64.max(analytic.abs()).max(numeric.abs());
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Seeded generator: xoshiro256++ whose state is expanded from the `u64`
/// seed with splitmix64.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from the base seed and a label.
    pub fn derive(&self, stream: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
