//! Dense row-major f32 tensors and the op set transformer inference needs.
//!
//! Storage and accumulation are 32-bit; layout is row-major with no strided
//! views. Any op that would produce NaN or Inf reports an error instead of
//! letting the value propagate. Statistics (Pearson) run in f64.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("pearson: vectors must have equal length >= 2 (got {x_len} and {y_len})")]
    BadCorrelationInput { x_len: usize, y_len: usize },
    #[error("pearson: {which} input is constant, correlation is undefined")]
    ConstantVector { which: &'static str },
}

/// Dense row-major tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    /// Build a tensor, checking that `shape` accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                detail: format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected 2-D tensor, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn check_finite(self, op: &'static str) -> Result<Self, TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Matrix product of `a` `[m x k]` and `b` `[k x n]`, f32 accumulation.
pub fn matmul(a: &TensorF32, b: &TensorF32) -> Result<TensorF32, TensorError> {
    let (m, ka) = a.require_2d("matmul")?;
    let (kb, n) = b.require_2d("matmul")?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dimensions disagree: {m}x{ka} vs {kb}x{n}"),
        });
    }
    let mut out = vec![0.0f32; m * n];
    // i-k-j order: the inner loop walks contiguous rows of b and out.
    for i in 0..m {
        for k in 0..ka {
            let aik = a.data[i * ka + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    TensorF32::new(vec![m, n], out)?.check_finite("matmul")
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &TensorF32) -> Result<TensorF32, TensorError> {
    let (m, n) = x.require_2d("softmax_rows")?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0f32;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    TensorF32::new(vec![m, n], out)?.check_finite("softmax_rows")
}

/// Per-row layer normalization followed by the affine `gain * x + bias`.
pub fn layer_norm(
    x: &TensorF32,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
) -> Result<TensorF32, TensorError> {
    let (m, n) = x.require_2d("layer_norm")?;
    if gain.len() != n || bias.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            detail: format!("gain/bias lengths {}/{} do not match width {n}", gain.len(), bias.len()),
        });
    }
    assert!(eps > 0.0, "layer_norm eps must be positive");
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / (var + eps).sqrt();
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            out_row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    TensorF32::new(vec![m, n], out)?.check_finite("layer_norm")
}

/// Element-wise GELU (tanh approximation, as used by the GPT-2 family).
pub fn gelu(x: &TensorF32) -> Result<TensorF32, TensorError> {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    let data = x
        .data
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    TensorF32::new(x.shape.clone(), data)?.check_finite("gelu")
}

/// Sample Pearson correlation coefficient, computed in f64.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, TensorError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(TensorError::BadCorrelationInput { x_len: x.len(), y_len: y.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(TensorError::ConstantVector { which: "first" });
    }
    if syy == 0.0 {
        return Err(TensorError::ConstantVector { which: "second" });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Collapse the two IEEE zeros so ranking never depends on the sign of zero.
fn rank_key(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// Indices that sort `values` ascending; numerically equal values (including
/// -0.0 vs +0.0) keep index order.
pub fn argsort_asc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| rank_key(values[a]).total_cmp(&rank_key(values[b])));
    idx
}

/// Indices that sort `values` descending; numerically equal values (including
/// -0.0 vs +0.0) keep index order.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| rank_key(values[b]).total_cmp(&rank_key(values[a])));
    idx
}
