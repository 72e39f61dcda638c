//! Dense row-major kernels used by the forward pass. Every output row is
//! computed by one thread in a fixed order, so results do not depend on the
//! size of the rayon pool.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn check_same(&self, other: &Matrix, what: &str) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Stacks matrices with equal width vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(m) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::Shape(format!("vstack width {} vs {cols}", m.cols)));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (k, &a) in x.iter().enumerate() {
            let w = &self.weight[k * self.d_out..(k + 1) * self.d_out];
            for (o, &wv) in out.iter_mut().zip(w) {
                *o += a * wv;
            }
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.d_in {
            return Err(Error::Shape(format!(
                "linear expects width {}, got {}",
                self.d_in, x.cols
            )));
        }
        let mut out = Matrix::zeros(x.rows, self.d_out);
        out.data
            .par_chunks_mut(self.d_out.max(1))
            .enumerate()
            .for_each(|(i, o)| self.apply_row(x.row(i), o));
        Ok(out)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, x.cols);
        let c = x.cols as f64;
        out.data
            .par_chunks_mut(x.cols.max(1))
            .enumerate()
            .for_each(|(i, o)| {
                let r = x.row(i);
                let mean = r.iter().sum::<f64>() / c;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (j, oj) in o.iter_mut().enumerate() {
                    *oj = (r[j] - mean) * inv * self.gamma[j] + self.beta[j];
                }
            });
        out
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.fc1.forward(x)?;
        h.data.par_iter_mut().for_each(|v| *v = gelu(*v));
        self.fc2.forward(&h)
    }
}

/// Multi-head (cross-)attention with output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub n_heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl Attention {
    pub fn zeros(dim: usize, n_heads: usize) -> Self {
        Self {
            n_heads,
            q: Linear::zeros(dim, dim),
            k: Linear::zeros(dim, dim),
            v: Linear::zeros(dim, dim),
            proj: Linear::zeros(dim, dim),
        }
    }

    fn head_dim(&self) -> usize {
        self.q.d_out / self.n_heads
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(&self, xq: &Matrix, xkv: &Matrix) -> Result<Matrix> {
        let (q, k, v) = (
            self.q.forward(xq)?,
            self.k.forward(xkv)?,
            self.v.forward(xkv)?,
        );
        let dim = q.cols;
        let dk = self.head_dim();
        let skv = k.rows;
        let scale = 1.0 / (dk as f64).sqrt();
        // keys transposed to `dim x skv` so score accumulation runs along rows
        let mut kt = vec![0.0; dim * skv];
        for j in 0..skv {
            for (c, &val) in k.row(j).iter().enumerate() {
                kt[c * skv + j] = val;
            }
        }
        let mut ctx = Matrix::zeros(q.rows, dim);
        ctx.data
            .par_chunks_mut(dim.max(1))
            .enumerate()
            .for_each(|(i, out)| {
                let qi = q.row(i);
                let mut scores = vec![0.0; skv];
                for h in 0..self.n_heads {
                    scores.iter_mut().for_each(|s| *s = 0.0);
                    for c in h * dk..(h + 1) * dk {
                        let a = qi[c] * scale;
                        for (s, &kv) in scores.iter_mut().zip(&kt[c * skv..(c + 1) * skv]) {
                            *s += a * kv;
                        }
                    }
                    softmax_in_place(&mut scores);
                    let oh = &mut out[h * dk..(h + 1) * dk];
                    for (j, &a) in scores.iter().enumerate() {
                        for (o, &vv) in oh.iter_mut().zip(&v.row(j)[h * dk..(h + 1) * dk]) {
                            *o += a * vv;
                        }
                    }
                }
            });
        self.proj.forward(&ctx)
    }

    /// Attention probabilities per head (`n_heads` matrices of `Sq x Skv`).
    pub fn weights(&self, xq: &Matrix, xkv: &Matrix) -> Result<Vec<Matrix>> {
        let (q, k) = (self.q.forward(xq)?, self.k.forward(xkv)?);
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        Ok((0..self.n_heads)
            .map(|h| {
                let mut m = Matrix::zeros(q.rows, k.rows);
                for i in 0..q.rows {
                    let row = m.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = (0..dk)
                            .map(|d| q.get(i, h * dk + d) * k.get(j, h * dk + d))
                            .sum::<f64>()
                            * scale;
                    }
                    softmax_in_place(row);
                }
                m
            })
            .collect())
    }
}

/// 2-D convolution over an HWC feature map, stride 1, "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// Layout `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// `input` is `side x side x in_ch`; returns `side x side x out_ch`.
    pub fn forward(&self, input: &[f64], side: usize) -> Result<Vec<f64>> {
        if input.len() != side * side * self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {side}x{side}x{}, got {} values",
                self.in_ch,
                input.len()
            )));
        }
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; side * side * self.out_ch];
        out.par_chunks_mut(self.out_ch)
            .enumerate()
            .for_each(|(pix, o)| {
                let (y, x) = ((pix / side) as isize, (pix % side) as isize);
                o.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let sy = y + ky as isize - pad;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x + kx as isize - pad;
                        if sx < 0 || sx >= side as isize {
                            continue;
                        }
                        let src =
                            &input[(sy as usize * side + sx as usize) * self.in_ch..][..self.in_ch];
                        for (oc, ov) in o.iter_mut().enumerate() {
                            let wbase = oc * self.in_ch * k * k + ky * k + kx;
                            let mut acc = 0.0;
                            for (ic, &s) in src.iter().enumerate() {
                                acc += s * self.weight[wbase + ic * k * k];
                            }
                            *ov += acc;
                        }
                    }
                }
            });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut v = vec![1000.0, 999.0, -5.0, 0.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut one = vec![3.7];
        softmax_in_place(&mut one);
        assert_eq!(one, vec![1.0]);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn linear_shape_error() {
        let l = Linear::zeros(3, 2);
        assert!(l.forward(&Matrix::zeros(4, 2)).is_err());
        assert_eq!(l.forward(&Matrix::zeros(4, 3)).unwrap().cols, 2);
    }
}
