//! Per-vector building blocks of the decoder block.

use super::{Mat, TinyLmError};

/// xᵢ·gᵢ / sqrt(mean(x²) + eps), over one token vector.
pub fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Result<Vec<f64>, TinyLmError> {
    if x.is_empty() || x.len() != g.len() {
        return Err(TinyLmError::Shape(format!(
            "rmsnorm over {} values with {} gains",
            x.len(),
            g.len()
        )));
    }
    if !(eps >= 0.0) || x.iter().any(|v| !v.is_finite()) {
        return Err(TinyLmError::NonFinite("rmsnorm input".into()));
    }
    let r = rms(x, eps);
    Ok(x.iter().zip(g).map(|(a, b)| a * b / r).collect())
}

#[inline]
pub(crate) fn rms(x: &[f64], eps: f64) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + eps).sqrt()
}

pub(crate) fn rmsnorm_rows(x: &Mat, g: &[f64], eps: f64) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        let s = rms(x.row(r), eps);
        for (o, gi) in out.row_mut(r).iter_mut().zip(g) {
            *o = *o * gi / s;
        }
    }
    out
}

/// Rotates consecutive pairs (v₂ⱼ, v₂ⱼ₊₁) by position·base^(−2j/len).
pub fn rope(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>, TinyLmError> {
    if !v.len().is_multiple_of(2) {
        return Err(TinyLmError::InvalidConfig(format!("RoPE needs an even head dim, got {}", v.len())));
    }
    let mut out = v.to_vec();
    rotate_in_place(&mut out, position as f64, base, 1.0);
    Ok(out)
}

fn rotate_in_place(v: &mut [f64], position: f64, base: f64, sign: f64) {
    let hd = v.len() as f64;
    for j in 0..v.len() / 2 {
        let theta = sign * position * base.powf(-2.0 * j as f64 / hd);
        let (s, c) = theta.sin_cos();
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = a * c - b * s;
        v[2 * j + 1] = a * s + b * c;
    }
}

/// RoPE on every head of every row, row index = position. `sign = -1`
/// applies the inverse rotation (used by the backward pass).
pub(crate) fn rope_rows(x: &Mat, head_dim: usize, base: f64, sign: f64) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        for head in out.row_mut(r).chunks_mut(head_dim) {
            rotate_in_place(head, r as f64, base, sign);
        }
    }
    out
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// z·sigmoid(z)
#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Row softmax; with `causal`, entries right of the diagonal are 0.
pub(crate) fn softmax_rows(x: &Mat, causal: bool) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let visible = if causal { (r + 1).min(x.cols) } else { x.cols };
        let p = softmax(&x.row(r)[..visible]);
        out.row_mut(r)[..visible].copy_from_slice(&p);
    }
    out
}
