//! Dense f64 kernels shared by the engine, the pruner and the probes.
//!
//! Everything here is a pure function of its inputs. The only mutable
//! state is the optional [`MacCounter`] a caller threads through
//! [`matmul`] and friends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `start..end` of every row.
    pub fn column_block(&self, start: usize, end: usize) -> Self {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Tally of multiply-accumulate operations.
///
/// Only ever grows during a run; [`MacCounter::reset`] takes `&mut self`
/// so it cannot race with kernels borrowing the counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    mac_count: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, macs: u64) {
        self.mac_count += macs;
    }

    pub fn count(&self) -> u64 {
        self.mac_count
    }

    pub fn reset(&mut self) {
        self.mac_count = 0;
    }
}

fn charge(counter: Option<&mut MacCounter>, macs: usize) {
    if let Some(c) = counter {
        c.add(macs as u64);
    }
}

/// Dense product `a · b`.
///
/// Each output entry accumulates `a[i,k] * b[k,j]` for `k = 0, 1, ...`
/// starting from `0.0`, so results are reproducible bit for bit.
pub fn matmul(a: &RealMatrix, b: &RealMatrix, counter: Option<&mut MacCounter>) -> Result<RealMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!("matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = RealMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    charge(counter, a.rows * a.cols * b.cols);
    Ok(out)
}

/// Row vector times matrix, same accumulation order as [`matmul`].
pub fn vec_mat(x: &[f64], m: &RealMatrix, counter: Option<&mut MacCounter>) -> Result<Vec<f64>> {
    if x.len() != m.rows {
        return Err(Error::shape(format!(
            "vector of length {} by {}x{} matrix",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &mkj) in out.iter_mut().zip(m.row(k)) {
            *o += xk * mkj;
        }
    }
    charge(counter, m.rows * m.cols);
    Ok(out)
}

/// `m · x` for a column vector `x`; one dot product per row of `m`.
pub fn mat_vec(m: &RealMatrix, x: &[f64], counter: Option<&mut MacCounter>) -> Result<Vec<f64>> {
    if x.len() != m.cols {
        return Err(Error::shape(format!(
            "{}x{} matrix by vector of length {}",
            m.rows,
            m.cols,
            x.len()
        )));
    }
    let out = (0..m.rows).map(|r| dot(m.row(r), x)).collect();
    charge(counter, m.rows * m.cols);
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Softmax over the entries whose mask bit is `true`; masked entries are
/// exactly zero in the output.
pub fn masked_softmax_row(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::shape(format!("{} scores with {} mask bits", scores.len(), mask.len())));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow { len: scores.len() });
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &keep)| if keep { (s - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Cosine similarity and Euclidean distance between `u` and `v`.
///
/// When either vector has zero norm the cosine is 0: masking a token that
/// carried the whole output leaves a zero vector, which must read as
/// maximal influence.
pub fn cosine_and_l2(u: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of vectors with lengths {} and {}", u.len(), v.len())));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    let cosine = if nu > 0.0 && nv > 0.0 {
        (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let l2 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok((cosine, l2))
}

pub const RMS_EPS: f64 = 1e-6;

/// `x / rms(x) * scale`.
pub fn rms_norm(x: &[f64], scale: &[f64]) -> Vec<f64> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Indices of the `n` largest entries, larger first, ties to the lower index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}
