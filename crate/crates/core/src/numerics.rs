// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense floating-point primitives shared by the model and the effect metric.
//!
//! Storage is `f32`; every reduction (dot products, means, variances, softmax
//! normalizers, KL sums) accumulates in `f64` with a fixed loop order so that
//! results are bitwise reproducible for a given input.

use thiserror::Error;

/// Errors raised by the numeric primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    /// `p[i] > 0` where `q[i] = 0`; the divergence is `+inf`.
    #[error("KL divergence is infinite at index {index}")]
    DivergenceInfinite { index: usize },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major 2-D `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::InvalidShape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
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
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NumericsError::InvalidShape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor2) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(NumericsError::InvalidShape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Matrix product with `f64` accumulation in a fixed i-k-j order.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(NumericsError::InvalidShape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = a.row(i);
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let a_ik = f64::from(a_ik);
            for (slot, &b_kj) in acc.iter_mut().zip(b.row(k)) {
                *slot += a_ik * f64::from(b_kj);
            }
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Ok(out)
}

/// Adds `bias` to every row of `t` in place.
pub fn add_row_bias(t: &mut Tensor2, bias: &[f32]) -> Result<()> {
    if bias.len() != t.cols {
        return Err(NumericsError::InvalidShape(format!(
            "bias of length {} for {} columns",
            bias.len(),
            t.cols
        )));
    }
    for r in 0..t.rows {
        for (v, b) in t.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Layer normalization of a single row, population variance.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(NumericsError::InvalidShape(format!(
            "layer_norm row {} with gain {} and bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(NumericsError::InvalidShape("empty row".into()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumericsError::InvalidShape(format!("eps must be > 0, got {eps}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + f64::from(eps)).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| ((f64::from(v) - mean) * inv * f64::from(g) + f64::from(b)) as f32)
        .collect())
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

/// GELU, exact form `x * Phi(x)`.
pub fn gelu_exact(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

/// A probability distribution over the vocabulary.
///
/// Distributions produced by [`softmax`] also carry `f64` log-probabilities,
/// which [`kl_divergence`] prefers over re-taking logs of the `f32` masses.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    p: Vec<f32>,
    log_p: Option<Vec<f64>>,
}

impl ProbDist {
    /// Validates and wraps raw probabilities.
    pub fn new(p: Vec<f32>) -> Result<Self> {
        if p.is_empty() {
            return Err(NumericsError::InvalidShape("empty distribution".into()));
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(NumericsError::InvalidDistribution(format!(
                "entry {i} is {}",
                p[i]
            )));
        }
        let total: f64 = p.iter().map(|&v| f64::from(v)).sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(NumericsError::InvalidDistribution(format!(
                "entries sum to {total}"
            )));
        }
        Ok(Self { p, log_p: None })
    }

    pub fn probs(&self) -> &[f32] {
        &self.p
    }

    pub fn log_probs(&self) -> Option<&[f64]> {
        self.log_p.as_deref()
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }

    fn ln(&self, i: usize) -> f64 {
        match &self.log_p {
            Some(lp) => lp[i],
            None => f64::from(self.p[i]).ln(),
        }
    }
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `log(sum(exp(x)))` with max subtraction, accumulated in `f64`.
fn log_sum_exp(logits: &[f32]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let s: f64 = logits.iter().map(|&v| (f64::from(v) - max).exp()).sum();
    max + s.ln()
}

pub fn softmax(logits: &[f32]) -> Result<ProbDist> {
    if logits.is_empty() {
        return Err(NumericsError::InvalidShape("softmax of empty input".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(NumericsError::NonFiniteInput(format!(
            "logit {i} is {}",
            logits[i]
        )));
    }
    let lse = log_sum_exp(logits);
    let log_p: Vec<f64> = logits.iter().map(|&v| f64::from(v) - lse).collect();
    let p = log_p.iter().map(|&l| l.exp() as f32).collect();
    Ok(ProbDist {
        p,
        log_p: Some(log_p),
    })
}

/// `KL(p || q) = sum p_i (ln p_i - ln q_i)` in nats, with `0 ln 0 = 0`.
///
/// Results within `1e-7` below zero are clamped to zero.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(NumericsError::InvalidShape(format!(
            "KL over distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0f64;
    for i in 0..p.len() {
        let (weight, lp) = match &p.log_p {
            Some(lp) => (lp[i].exp(), lp[i]),
            None => (f64::from(p.p[i]), f64::from(p.p[i]).ln()),
        };
        if weight == 0.0 {
            continue;
        }
        let lq = q.ln(i);
        if lq == f64::NEG_INFINITY {
            return Err(NumericsError::DivergenceInfinite { index: i });
        }
        acc += weight * (lp - lq);
    }
    if (-1e-7..0.0).contains(&acc) {
        acc = 0.0;
    }
    Ok(acc)
}
