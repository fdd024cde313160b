//! Compositional primitive encoding.
//!
//! A variable-length stack of per-frame features `S` (N×F) is layer-normed
//! and projected to `R` (N×D). Each row is softly assigned to K learnable
//! primitives `C` (K×D) with weights
//!
//! ```text
//! z_jk = softmax_k( -beta * |R_j - C_k|^2 ),   beta = 1/sqrt(D)
//! ```
//!
//! and the pair is described by a fixed-size K×D encoding:
//!
//! * `Literal`:   `E_k = (sum_j z_jk) * C_k`  (weighted primitive locations)
//! * `Aggregate`: `E_k = sum_j z_jk * R_j`    (assignment-weighted descriptors)
//! * `AvgPool`:   `e   = mean_j R_j`          (single-mode baseline, 1×D)
//!
//! A linear head maps the flattened encoding to H logits. Forward and
//! backward are hand-written; `beta` is a constant and never receives a
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, softmax_in_place, sq_dist,
    LayerNormCache, Matrix, ParamSet, ParamTensor, RngState, LN_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Literal,
    Aggregate,
    #[serde(rename = "avgpool")]
    AvgPool,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::AvgPool, Variant::Literal, Variant::Aggregate];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Literal => "literal",
            Variant::Aggregate => "aggregate",
            Variant::AvgPool => "avgpool",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Variant::Literal),
            "aggregate" => Ok(Variant::Aggregate),
            "avgpool" => Ok(Variant::AvgPool),
            other => Err(Error::invalid(format!("unknown variant {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Per-frame feature width F.
    pub input: usize,
    /// Embedding width D.
    pub embed: usize,
    /// Number of primitives K.
    pub primitives: usize,
    /// Head outputs H.
    pub head: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub variant: Variant,
    pub beta: f64,
    pub ln_gain: ParamTensor,
    pub ln_bias: ParamTensor,
    pub w: ParamTensor,
    pub b: ParamTensor,
    pub primitives: ParamTensor,
    pub head_w: ParamTensor,
    pub head_b: ParamTensor,
}

impl EncoderParams {
    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            input: self.w.value.rows,
            embed: self.w.value.cols,
            primitives: self.primitives.value.rows,
            head: self.head_b.value.cols,
        }
    }

    pub fn head_input_dim(&self) -> usize {
        head_input_dim(self.variant, self.w.value.cols, self.primitives.value.rows)
    }

    /// Fresh head with `h` outputs, drawn from `rng`. The trunk is untouched.
    pub fn reset_head(&mut self, h: usize, rng: &mut RngState) {
        let fan_in = self.head_input_dim();
        self.head_w = ParamTensor::new("head_w", normal_matrix(fan_in, h, 1.0 / (fan_in as f64).sqrt(), rng));
        self.head_b = ParamTensor::new("head_b", Matrix::zeros(1, h));
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d.input == 0 || d.embed == 0 || d.primitives == 0 || d.head == 0 {
            return Err(Error::invalid("encoder dims must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        let checks = [
            (self.ln_gain.value.shape(), (1, d.input), "ln_gain"),
            (self.ln_bias.value.shape(), (1, d.input), "ln_bias"),
            (self.b.value.shape(), (1, d.embed), "b"),
            (self.primitives.value.shape(), (d.primitives, d.embed), "primitives"),
            (self.head_w.value.shape(), (self.head_input_dim(), d.head), "head_w"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::invalid(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.value.is_finite())
    }

    /// Adds `scale * grads` into the gradient buffers.
    pub fn accumulate(&mut self, g: &EncoderGrads, scale: f64) {
        let add = |t: &mut ParamTensor, src: &[f64]| {
            for (a, b) in t.grad.data.iter_mut().zip(src) {
                *a += scale * b;
            }
        };
        add(&mut self.ln_gain, &g.ln_gain);
        add(&mut self.ln_bias, &g.ln_bias);
        add(&mut self.w, &g.w.data);
        add(&mut self.b, &g.b);
        add(&mut self.primitives, &g.primitives.data);
        add(&mut self.head_w, &g.head_w.data);
        add(&mut self.head_b, &g.head_b);
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![
            &self.ln_gain,
            &self.ln_bias,
            &self.w,
            &self.b,
            &self.primitives,
            &self.head_w,
            &self.head_b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.w,
            &mut self.b,
            &mut self.primitives,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }
}

pub fn head_input_dim(variant: Variant, embed: usize, primitives: usize) -> usize {
    match variant {
        Variant::AvgPool => embed,
        Variant::Literal | Variant::Aggregate => primitives * embed,
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngState) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| std * rng.normal()).collect(),
    }
}

/// `W, head_W ~ N(0, 1/sqrt(fan_in))`, `C ~ N(0, 1)`, unit gain, zero biases.
pub fn init_params(dims: EncoderDims, variant: Variant, rng: &mut RngState) -> Result<EncoderParams> {
    if dims.input == 0 || dims.embed == 0 || dims.primitives == 0 || dims.head == 0 {
        return Err(Error::invalid(format!("encoder dims must be positive: {dims:?}")));
    }
    let w = normal_matrix(dims.input, dims.embed, 1.0 / (dims.input as f64).sqrt(), rng);
    let c = normal_matrix(dims.primitives, dims.embed, 1.0, rng);
    let mut p = EncoderParams {
        variant,
        beta: 1.0 / (dims.embed as f64).sqrt(),
        ln_gain: ParamTensor::new("ln_gain", Matrix::filled(1, dims.input, 1.0)),
        ln_bias: ParamTensor::new("ln_bias", Matrix::zeros(1, dims.input)),
        w: ParamTensor::new("w", w),
        b: ParamTensor::new("b", Matrix::zeros(1, dims.embed)),
        primitives: ParamTensor::new("primitives", c),
        head_w: ParamTensor::new("head_w", Matrix::zeros(0, 0)),
        head_b: ParamTensor::new("head_b", Matrix::zeros(0, 0)),
    };
    p.reset_head(dims.head, rng);
    Ok(p)
}

/// `R = linear(layer_norm(S))`.
pub fn embed(s: &Matrix, p: &EncoderParams) -> Result<Matrix> {
    embed_forward(s, p).map(|(r, _, _)| r)
}

fn embed_forward(s: &Matrix, p: &EncoderParams) -> Result<(Matrix, Matrix, LayerNormCache)> {
    if s.cols != p.w.value.rows {
        return Err(Error::invalid(format!(
            "embed: input has {} features, encoder expects {}",
            s.cols, p.w.value.rows
        )));
    }
    let (y, cache) = layer_norm_forward(s, &p.ln_gain.value.data, &p.ln_bias.value.data, LN_EPS)?;
    let r = linear_forward(&y, &p.w.value, &p.b.value.data)?;
    Ok((r, y, cache))
}

/// Soft assignment weights, one simplex row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub z: Matrix,
}

pub fn soft_assign(r: &Matrix, c: &Matrix, beta: f64) -> Assignment {
    let (n, k) = (r.rows, c.rows);
    let mut z = Matrix::zeros(n, k);
    for j in 0..n {
        let rj = r.row(j);
        let row = z.row_mut(j);
        for (kk, zk) in row.iter_mut().enumerate() {
            *zk = -beta * sq_dist(rj, c.row(kk));
        }
        softmax_in_place(row);
    }
    Assignment { z }
}

/// Fixed-size pooled representation.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveEncoding {
    /// K×D for literal/aggregate, 1×D for avgpool.
    pub values: Matrix,
    /// `mass_k = sum_j z_jk`.
    pub mass: Vec<f64>,
}

/// Pools the frames listed in `rows` (repeats allowed) given per-frame
/// embeddings and assignments.
pub fn encode_rows(r: &Matrix, z: &Matrix, rows: &[usize], p: &EncoderParams) -> PrimitiveEncoding {
    let (d, k) = (r.cols, z.cols);
    let mut mass = vec![0.0; k];
    for &j in rows {
        for (m, zv) in mass.iter_mut().zip(z.row(j)) {
            *m += zv;
        }
    }
    let values = match p.variant {
        Variant::Literal => {
            let c = &p.primitives.value;
            let mut e = Matrix::zeros(k, d);
            for kk in 0..k {
                for (o, cv) in e.row_mut(kk).iter_mut().zip(c.row(kk)) {
                    *o = mass[kk] * cv;
                }
            }
            e
        }
        Variant::Aggregate => {
            let mut e = Matrix::zeros(k, d);
            for &j in rows {
                let rj = r.row(j);
                for kk in 0..k {
                    let w = z.get(j, kk);
                    for (o, rv) in e.row_mut(kk).iter_mut().zip(rj) {
                        *o += w * rv;
                    }
                }
            }
            e
        }
        Variant::AvgPool => {
            let mut e = Matrix::zeros(1, d);
            for &j in rows {
                for (o, rv) in e.data.iter_mut().zip(r.row(j)) {
                    *o += rv;
                }
            }
            e.scale(1.0 / rows.len().max(1) as f64);
            e
        }
    };
    PrimitiveEncoding { values, mass }
}

/// Encodes every row of `R`.
pub fn encode(r: &Matrix, p: &EncoderParams) -> PrimitiveEncoding {
    let a = soft_assign(r, &p.primitives.value, p.beta);
    let rows: Vec<usize> = (0..r.rows).collect();
    encode_rows(r, &a.z, &rows, p)
}

pub fn head_forward(enc: &PrimitiveEncoding, p: &EncoderParams) -> Result<Vec<f64>> {
    let hw = &p.head_w.value;
    if enc.values.len() != hw.rows {
        return Err(Error::invalid(format!(
            "head: encoding has {} values, head expects {}",
            enc.values.len(),
            hw.rows
        )));
    }
    let mut logits = p.head_b.value.data.clone();
    for (i, &e) in enc.values.data.iter().enumerate() {
        if e == 0.0 {
            continue;
        }
        for (l, wv) in logits.iter_mut().zip(hw.row(i)) {
            *l += e * wv;
        }
    }
    Ok(logits)
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    ln: LayerNormCache,
    y: Matrix,
    pub r: Matrix,
    pub z: Matrix,
    pub encoding: PrimitiveEncoding,
}

/// `S -> logits`, keeping intermediates.
pub fn forward(s: &Matrix, p: &EncoderParams) -> Result<(Vec<f64>, ForwardCache)> {
    let (r, y, ln) = embed_forward(s, p)?;
    let a = soft_assign(&r, &p.primitives.value, p.beta);
    let rows: Vec<usize> = (0..r.rows).collect();
    let encoding = encode_rows(&r, &a.z, &rows, p);
    let logits = head_forward(&encoding, p)?;
    Ok((
        logits,
        ForwardCache {
            ln,
            y,
            r,
            z: a.z,
            encoding,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub w: Matrix,
    pub b: Vec<f64>,
    pub primitives: Matrix,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    /// dL/dS, when requested.
    pub input: Option<Matrix>,
}

/// Analytic gradients of all parameters (and optionally the input) given
/// `dL/dlogits`.
pub fn backward(dlogits: &[f64], cache: &ForwardCache, p: &EncoderParams, want_input: bool) -> Result<EncoderGrads> {
    let hw = &p.head_w.value;
    if dlogits.len() != hw.cols {
        return Err(Error::invalid(format!(
            "backward: {} logit grads for a head with {} outputs",
            dlogits.len(),
            hw.cols
        )));
    }
    let enc = &cache.encoding;
    let r = &cache.r;
    let z = &cache.z;
    let c = &p.primitives.value;
    let (n, d) = r.shape();
    let k = c.rows;

    // Head.
    let mut head_w = Matrix::zeros(hw.rows, hw.cols);
    let mut de = Matrix::zeros(enc.values.rows, enc.values.cols);
    for (i, &e) in enc.values.data.iter().enumerate() {
        let gw = head_w.row_mut(i);
        for (g, dl) in gw.iter_mut().zip(dlogits) {
            *g = e * dl;
        }
        de.data[i] = crate::numcore::dot(hw.row(i), dlogits);
    }
    let head_b = dlogits.to_vec();

    let mut dc = Matrix::zeros(k, d);
    let mut dr = Matrix::zeros(n, d);
    let mut dz = Matrix::zeros(n, k);

    match p.variant {
        Variant::Literal => {
            for kk in 0..k {
                let dek = de.row(kk);
                let dmass = crate::numcore::dot(dek, c.row(kk));
                for (g, dv) in dc.row_mut(kk).iter_mut().zip(dek) {
                    *g += enc.mass[kk] * dv;
                }
                for j in 0..n {
                    dz.set(j, kk, dmass);
                }
            }
        }
        Variant::Aggregate => {
            for j in 0..n {
                let rj = r.row(j);
                for kk in 0..k {
                    let dek = de.row(kk);
                    dz.set(j, kk, crate::numcore::dot(dek, rj));
                    let w = z.get(j, kk);
                    for (g, dv) in dr.row_mut(j).iter_mut().zip(dek) {
                        *g += w * dv;
                    }
                }
            }
        }
        Variant::AvgPool => {
            let inv = 1.0 / n as f64;
            for j in 0..n {
                for (g, dv) in dr.row_mut(j).iter_mut().zip(&de.data) {
                    *g = inv * dv;
                }
            }
        }
    }

    // Assignment path: z_j = softmax(a_j), a_jk = -beta |R_j - C_k|^2.
    if p.variant != Variant::AvgPool {
        let two_beta = 2.0 * p.beta;
        let mut da = vec![0.0; k];
        for j in 0..n {
            let zj = z.row(j);
            let dzj = dz.row(j);
            let inner = crate::numcore::dot(zj, dzj);
            for kk in 0..k {
                da[kk] = zj[kk] * (dzj[kk] - inner);
            }
            let rj = r.row(j).to_vec();
            for (kk, &dak) in da.iter().enumerate() {
                if dak == 0.0 {
                    continue;
                }
                let ck = c.row(kk);
                let drj = dr.row_mut(j);
                for t in 0..d {
                    drj[t] -= two_beta * dak * (rj[t] - ck[t]);
                }
                let dck = dc.row_mut(kk);
                for t in 0..d {
                    dck[t] += two_beta * dak * (rj[t] - ck[t]);
                }
            }
        }
    }

    let (dy, dw, db) = linear_backward(&cache.y, &p.w.value, &dr)?;
    let (dx, dgain, dbias) = layer_norm_backward(&dy, &cache.ln, &p.ln_gain.value.data);
    Ok(EncoderGrads {
        ln_gain: dgain,
        ln_bias: dbias,
        w: dw,
        b: db,
        primitives: dc,
        head_w,
        head_b,
        input: want_input.then_some(dx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{ce_loss, grad_check, sigmoid, bce_loss, Matrix};

    fn dims(f: usize, d: usize, k: usize, h: usize) -> EncoderDims {
        EncoderDims {
            input: f,
            embed: d,
            primitives: k,
            head: h,
        }
    }

    fn random_input(n: usize, f: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_vec(n, f, (0..n * f).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn embed_examples() {
        let mut rng = RngState::new(1);
        let p = init_params(dims(4, 3, 2, 1), Variant::Literal, &mut rng).unwrap();
        let s = random_input(1, 4, &mut rng);
        assert_eq!(embed(&s, &p).unwrap().shape(), (1, 3));

        let mut dup = Matrix::zeros(2, 4);
        dup.row_mut(0).copy_from_slice(s.row(0));
        dup.row_mut(1).copy_from_slice(s.row(0));
        let r = embed(&dup, &p).unwrap();
        assert_eq!(r.row(0), r.row(1));

        let mut q = init_params(dims(3, 3, 2, 1), Variant::Literal, &mut rng).unwrap();
        q.w.value = Matrix::identity(3);
        let s = Matrix::from_rows(&[vec![1.0, 2.0, 6.0]]).unwrap();
        let r = embed(&s, &q).unwrap();
        let normed = crate::numcore::layer_norm(&s, &[1.0; 3], &[0.0; 3], LN_EPS).unwrap();
        assert_eq!(r, normed);

        assert!(embed(&Matrix::zeros(2, 5), &p).is_err());
    }

    #[test]
    fn soft_assign_examples() {
        let r = Matrix::from_rows(&[vec![0.3, 0.1], vec![-2.0, 4.0]]).unwrap();
        let one = Matrix::from_rows(&[vec![5.0, 5.0]]).unwrap();
        assert_eq!(soft_assign(&r, &one, 0.7).z.data, vec![1.0, 1.0]);

        let eq = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let z = soft_assign(&Matrix::zeros(1, 2), &eq, 0.5).z;
        for v in z.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let r = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let z = soft_assign(&r, &c, 1.0).z;
        assert!((z.data[0] - 0.7311).abs() < 1e-4);
        assert!((z.data[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn encode_literal_hand_case() {
        let mut rng = RngState::new(2);
        let mut p = init_params(dims(1, 1, 2, 1), Variant::Literal, &mut rng).unwrap();
        p.primitives.value = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let a = 1.0 / (1.0 + (-1f64).exp());
        let z = Matrix::from_rows(&[vec![a, 1.0 - a], vec![0.5, 0.5]]).unwrap();
        let r = Matrix::zeros(2, 1);
        let e = encode_rows(&r, &z, &[0, 1], &p);
        assert_eq!(e.values.data[0], 0.0);
        assert!((e.values.data[1] - 0.7689).abs() < 1e-4);
    }

    #[test]
    fn aggregate_single_primitive_is_sum() {
        let mut rng = RngState::new(3);
        let p = init_params(dims(5, 4, 1, 1), Variant::Aggregate, &mut rng).unwrap();
        let r = random_input(7, 4, &mut rng);
        let e = encode(&r, &p);
        for t in 0..4 {
            let s: f64 = (0..7).map(|j| r.get(j, t)).sum();
            assert!((e.values.get(0, t) - s).abs() < 1e-12);
        }
        assert_eq!(e.mass, vec![7.0]);
    }

    #[test]
    fn hard_assignment_limit_counts_frames() {
        let mut rng = RngState::new(4);
        let mut p = init_params(dims(2, 2, 2, 1), Variant::Literal, &mut rng).unwrap();
        p.primitives.value = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap();
        p.beta = 1e4;
        let r = Matrix::from_rows(&[vec![0.1, 0.0], vec![2.9, 0.1], vec![3.2, -0.1], vec![-0.3, 0.2]]).unwrap();
        let e = encode(&r, &p);
        assert!((e.mass[0] - 2.0).abs() < 1e-9);
        assert!((e.values.get(1, 0) - 6.0).abs() < 1e-9);
    }

    #[test]
    fn head_examples() {
        let mut rng = RngState::new(5);
        let mut p = init_params(dims(3, 2, 2, 3), Variant::Literal, &mut rng).unwrap();
        p.head_b.value.data = vec![0.1, -0.2, 0.3];
        let r = random_input(4, 2, &mut rng);
        let e = encode(&r, &p);
        let l1 = head_forward(&e, &p).unwrap();
        let mut e2 = e.clone();
        e2.values.scale(2.0);
        let l2 = head_forward(&e2, &p).unwrap();
        for h in 0..3 {
            let b = p.head_b.value.data[h];
            assert!(((l2[h] - b) - 2.0 * (l1[h] - b)).abs() < 1e-12);
        }
        p.head_w.value.fill(0.0);
        assert_eq!(head_forward(&e, &p).unwrap(), vec![0.1, -0.2, 0.3]);

        let bad = PrimitiveEncoding {
            values: Matrix::zeros(1, 3),
            mass: vec![1.0],
        };
        assert!(head_forward(&bad, &p).is_err());
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_params(dims(20, 512, 64, 1), Variant::Literal, &mut RngState::new(9)).unwrap();
        assert_eq!(a.primitives.value.shape(), (64, 512));
        assert_eq!(a.head_w.value.shape(), (64 * 512, 1));
        let b = init_params(dims(20, 512, 64, 1), Variant::Literal, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
        let c = init_params(dims(20, 512, 64, 1), Variant::Literal, &mut RngState::new(10)).unwrap();
        assert_ne!(a.primitives.value, c.primitives.value);
        let avg = init_params(dims(20, 8, 4, 2), Variant::AvgPool, &mut RngState::new(9)).unwrap();
        assert_eq!(avg.head_w.value.shape(), (8, 2));
        assert!((a.beta - 1.0 / 512f64.sqrt()).abs() < 1e-15);
        assert!(avg.validate().is_ok());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = RngState::new(6);
        for v in Variant::ALL {
            let p = init_params(dims(5, 4, 3, 2), v, &mut rng).unwrap();
            let s = random_input(6, 5, &mut rng);
            let (_, cache) = forward(&s, &p).unwrap();
            let g = backward(&[0.0, 0.0], &cache, &p, true).unwrap();
            let all_zero = g.ln_gain.iter().chain(&g.ln_bias).chain(&g.w.data).chain(&g.b)
                .chain(&g.primitives.data).chain(&g.head_w.data).chain(&g.head_b)
                .chain(&g.input.unwrap().data).all(|v| *v == 0.0);
            assert!(all_zero, "{v:?}");
        }
    }

    fn check_variant(v: Variant, h: usize, seed: u64) -> f64 {
        let mut rng = RngState::new(seed);
        let mut p = init_params(dims(7, 4, 3, h), v, &mut rng).unwrap();
        for t in p.tensors_mut() {
            for x in t.value.data.iter_mut() {
                *x += 0.1 * rng.normal();
            }
        }
        let s = random_input(5, 7, &mut rng);
        let loss_of = |p: &EncoderParams| -> f64 {
            let (logits, _) = forward(&s, p).unwrap();
            if h == 1 {
                bce_loss(sigmoid(logits[0]), 1).unwrap().0
            } else {
                ce_loss(&logits, 1).unwrap().0
            }
        };
        let (logits, cache) = forward(&s, &p).unwrap();
        let dl = if h == 1 {
            vec![sigmoid(logits[0]) - 1.0]
        } else {
            ce_loss(&logits, 1).unwrap().1
        };
        let g = backward(&dl, &cache, &p, false).unwrap();
        p.zero_grads();
        p.accumulate(&g, 1.0);
        grad_check(&mut p, loss_of, 1e-5).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences() {
        for v in Variant::ALL {
            for h in [1, 2] {
                let err = check_variant(v, h, 42);
                assert!(err < 1e-4, "{v:?} h={h}: {err}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = RngState::new(8);
        for v in Variant::ALL {
            let p = init_params(dims(6, 4, 3, 2), v, &mut rng).unwrap();
            let s = random_input(4, 6, &mut rng);
            let (logits, cache) = forward(&s, &p).unwrap();
            let (_, dl) = ce_loss(&logits, 0).unwrap();
            let g = backward(&dl, &cache, &p, true).unwrap();
            let mut holder = vec![ParamTensor::new("s", s)];
            holder[0].grad = g.input.unwrap();
            let err = grad_check(
                &mut holder,
                |h: &Vec<ParamTensor>| ce_loss(&forward(&h[0].value, &p).unwrap().0, 0).unwrap().0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{v:?}: {err}");
        }
    }

    #[test]
    fn literal_input_gradient_only_through_assignment() {
        // With a single primitive z is constant, so dL/dS must vanish.
        let mut rng = RngState::new(12);
        let p = init_params(dims(5, 3, 1, 2), Variant::Literal, &mut rng).unwrap();
        let s = random_input(4, 5, &mut rng);
        let (logits, cache) = forward(&s, &p).unwrap();
        let (_, dl) = ce_loss(&logits, 1).unwrap();
        let g = backward(&dl, &cache, &p, true).unwrap();
        assert!(g.input.unwrap().data.iter().all(|v| v.abs() < 1e-15));
        assert!(g.w.data.iter().all(|v| v.abs() < 1e-15));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn case() -> impl Strategy<Value = (usize, usize, usize, usize, u64, usize)> {
            (1usize..30, 1usize..10, 1usize..8, 1usize..8, any::<u64>(), 0usize..3)
        }

        fn build(n: usize, f: usize, d: usize, k: usize, seed: u64, v: usize) -> (Matrix, EncoderParams) {
            let mut rng = RngState::new(seed);
            let p = init_params(
                EncoderDims {
                    input: f,
                    embed: d,
                    primitives: k,
                    head: 2,
                },
                Variant::ALL[v],
                &mut rng,
            )
            .unwrap();
            let s = Matrix::from_vec(n, f, (0..n * f).map(|_| 3.0 * rng.normal()).collect()).unwrap();
            (embed(&s, &p).unwrap(), p)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn rows_on_simplex_and_mass_conserved((n, f, d, k, seed, v) in case()) {
                let (r, p) = build(n, f, d, k, seed, v);
                let a = soft_assign(&r, &p.primitives.value, p.beta);
                for j in 0..n {
                    prop_assert!(a.z.row(j).iter().all(|&z| z >= 0.0));
                    prop_assert!((a.z.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                }
                let enc = encode(&r, &p);
                prop_assert!((enc.mass.iter().sum::<f64>() - n as f64).abs() < 1e-8);
            }

            #[test]
            fn frame_order_is_irrelevant((n, f, d, k, seed, v) in case(), shuffle in any::<u64>()) {
                let (r, p) = build(n, f, d, k, seed, v);
                let mut order: Vec<usize> = (0..n).collect();
                RngState::new(shuffle).shuffle(&mut order);
                let a = encode(&r, &p);
                let b = encode(&r.gather_rows(&order), &p);
                prop_assert!(a.values.max_abs_diff(&b.values) < 1e-9);
                let (la, lb) = (head_forward(&a, &p).unwrap(), head_forward(&b, &p).unwrap());
                prop_assert!(la.iter().zip(&lb).all(|(x, y)| (x - y).abs() < 1e-9));
            }

            #[test]
            fn literal_rows_are_scaled_primitives((n, f, d, k, seed, _v) in case()) {
                let (r, mut p) = build(n, f, d, k, seed, 0);
                p.variant = Variant::Literal;
                let e = encode(&r, &p);
                let c = &p.primitives.value;
                for kk in 0..k {
                    for (x, ck) in e.values.row(kk).iter().zip(c.row(kk)) {
                        prop_assert_eq!(*x, e.mass[kk] * ck);
                    }
                }
            }

            #[test]
            fn large_beta_assigns_to_nearest((n, _f, d, k, seed, _v) in case()) {
                let mut rng = RngState::new(seed);
                let d = d.max(2);
                let c = Matrix::from_vec(k, d, (0..k * d).map(|_| 4.0 * rng.normal()).collect()).unwrap();
                let r = Matrix::from_vec(n, d, (0..n * d).map(|_| 4.0 * rng.normal()).collect()).unwrap();
                let z = soft_assign(&r, &c, 1e3).z;
                for j in 0..n {
                    let mut dist: Vec<(f64, usize)> = (0..k).map(|kk| (sq_dist(r.row(j), c.row(kk)), kk)).collect();
                    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
                    // Skip near ties, where the limit is not reached at this beta.
                    if k > 1 && dist[1].0 - dist[0].0 < 0.05 {
                        continue;
                    }
                    prop_assert!(z.get(j, dist[0].1) > 1.0 - 1e-12);
                }
            }
        }
    }
}
