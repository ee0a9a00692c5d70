//! Dense kernels shared by the tape and the plain-value APIs.

use super::Array;
use crate::error::{Error, Result};

/// First jitter, relative to the mean of the diagonal.
pub const JITTER_START: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-2;

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!("matmul {n}×{k} by {k2}×{m}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Array::matrix(n, m, out))
}

pub fn transpose(a: &Array) -> Array {
    let (n, m) = (a.rows(), a.cols());
    let d = a.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    Array::matrix(m, n, out)
}

fn try_cholesky(a: &[f64], n: usize, jitter: f64, floor: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > floor) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            // symmetrized input
            let mut s = 0.5 * (a[i * n + j] + a[j * n + i]);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Lower Cholesky factor of the symmetric part of `a`, with the jitter policy.
///
/// The plain matrix is tried first. On failure a jitter of
/// `1e-6 · mean(diag)` is added and multiplied by ten until it reaches
/// `1e-2 · mean(diag)`. Returns the factor and the jitter actually used.
pub fn cholesky(a: &Array) -> Result<(Array, f64)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("cholesky of {}×{}", n, a.cols())));
    }
    if n == 0 {
        return Ok((Array::zeros(&[0, 0]), 0.0));
    }
    let d = a.data();
    let mean_diag = (0..n).map(|i| d[i * n + i]).sum::<f64>() / n as f64;
    if !mean_diag.is_finite() {
        return Err(Error::NonFinite("cholesky input".into()));
    }
    let scale = mean_diag.abs();
    let floor = f64::EPSILON * scale;
    if let Some(l) = try_cholesky(d, n, 0.0, floor) {
        return Ok((Array::matrix(n, n, l), 0.0));
    }
    let mut rel = JITTER_START;
    let mut last = 0.0;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        last = rel * scale;
        if let Some(l) = try_cholesky(d, n, last, floor) {
            return Ok((Array::matrix(n, n, l), last));
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// Solves `L X = B` (or `Lᵀ X = B` when `transpose`) for lower-triangular `L`.
pub fn solve_lower(l: &Array, b: &Array, transpose: bool) -> Result<Array> {
    let n = l.rows();
    if l.cols() != n || b.rows() != n {
        return Err(Error::Shape(format!(
            "triangular solve {}×{} with rhs {}×{}",
            n,
            l.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let m = b.cols();
    let ld = l.data();
    let mut x = b.data().to_vec();
    if !transpose {
        for i in 0..n {
            for k in 0..i {
                let lik = ld[i * n + k];
                if lik != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= lik * x[k * m + j];
                    }
                }
            }
            let lii = ld[i * n + i];
            for j in 0..m {
                x[i * m + j] /= lii;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = ld[k * n + i];
                if lki != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= lki * x[k * m + j];
                    }
                }
            }
            let lii = ld[i * n + i];
            for j in 0..m {
                x[i * m + j] /= lii;
            }
        }
    }
    Ok(Array::matrix(n, m, x))
}

/// `A⁻¹ B` through the Cholesky factor of `A`; the inverse is never formed.
pub fn cholesky_solve(a: &Array, b: &Array) -> Result<Array> {
    let (l, _) = cholesky(a)?;
    let y = solve_lower(&l, b, false)?;
    solve_lower(&l, &y, true)
}

/// `log det A` for symmetric positive-definite `A`.
pub fn logdet(a: &Array) -> Result<f64> {
    let (l, _) = cholesky(a)?;
    let n = l.rows();
    Ok((0..n).map(|i| 2.0 * l.at(i, i).ln()).sum())
}
