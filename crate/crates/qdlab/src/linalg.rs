//! Small dense linear-algebra helpers shared by the engine and recipes.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::MatF;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not skew-symmetric (max |P + P^T| entry = {asymmetry:e})")]
    NotSkew { asymmetry: f64 },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Maximum entry of |P + P^T|, zero for exactly skew-symmetric matrices.
pub fn skew_defect(p: &MatF) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            worst = worst.max((p[(i, j)] + p[(j, i)]).abs());
        }
    }
    worst
}

/// Exponential `exp(s P)` of a skew-symmetric matrix, an orthogonal rotation.
///
/// Scaling-and-squaring on a truncated Taylor series with term tolerance
/// 1e-14. Rejects inputs whose skew defect exceeds 1e-12 (relative to the
/// matrix scale).
pub fn skew_exp(p: &MatF, s: f64) -> Result<MatF, LinalgError> {
    if p.nrows() != p.ncols() {
        return Err(LinalgError::NotSquare {
            rows: p.nrows(),
            cols: p.ncols(),
        });
    }
    let scale = p.amax().max(1.0);
    let defect = skew_defect(p);
    if defect > 1e-12 * scale {
        return Err(LinalgError::NotSkew { asymmetry: defect });
    }
    let n = p.nrows();
    let a = p * s;
    let norm = a.amax() * n as f64;
    if norm == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    // Halve until the scaled norm is comfortably inside the series radius.
    let mut k = 0u32;
    let mut target = norm;
    while target > 0.5 {
        target *= 0.5;
        k += 1;
    }
    let b = &a * 0.5f64.powi(k as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    let mut m = 1u32;
    loop {
        term = (&term * &b) / m as f64;
        result += &term;
        if term.amax() < 1e-14 {
            break;
        }
        m += 1;
        if m > 60 {
            break;
        }
    }
    for _ in 0..k {
        result = &result * &result;
    }
    Ok(result)
}

/// `max |R R^T - I|` entry, the orthogonality defect of a rotation.
pub fn orthogonality_defect(r: &MatF) -> f64 {
    let n = r.nrows();
    let gram = r * r.transpose();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}
