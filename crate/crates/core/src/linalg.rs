//! Small dense linear algebra on row-major slices.
//!
//! Matrices here are tiny (state dimension, basis size), so everything is
//! written directly against flat buffers without a matrix type.

use crate::scalar::Scalar;

/// `out = a * b` with `a` of shape `p x q` and `b` of shape `q x r`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], p: usize, q: usize, r: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    for i in 0..p {
        for j in 0..r {
            let mut acc = S::zero();
            for m in 0..q {
                acc += a[i * q + m] * b[m * r + j];
            }
            out[i * r + j] = acc;
        }
    }
}

/// `out = a * v` for `a` of shape `p x q`.
pub fn matvec<S: Scalar>(a: &[S], v: &[S], p: usize, q: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), p * q);
    for i in 0..p {
        let mut acc = S::zero();
        for m in 0..q {
            acc += a[i * q + m] * v[m];
        }
        out[i] = acc;
    }
}

pub fn identity<S: Scalar>(n: usize) -> Vec<S> {
    let mut m = vec![S::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = S::one();
    }
    m
}

fn norm_1<S: Scalar>(a: &[S], n: usize) -> S {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<S>())
        .fold(S::zero(), S::max)
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial
/// pivoting, together with its 1-norm condition number.
///
/// Returns `None` when a pivot vanishes exactly.
pub fn invert<S: Scalar>(a: &[S], n: usize) -> Option<(Vec<S>, S)> {
    debug_assert_eq!(a.len(), n * n);
    let mut work = a.to_vec();
    let mut inv = identity::<S>(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                work[i * n + col]
                    .abs()
                    .partial_cmp(&work[j * n + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        let pivot = work[pivot_row * n + col];
        if pivot == S::zero() || !pivot.is_finite() {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                work.swap(col * n + j, pivot_row * n + j);
                inv.swap(col * n + j, pivot_row * n + j);
            }
        }
        let scale = S::one() / pivot;
        for j in 0..n {
            work[col * n + j] *= scale;
            inv[col * n + j] *= scale;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = work[i * n + col];
            if factor == S::zero() {
                continue;
            }
            for j in 0..n {
                let w = work[col * n + j];
                let v = inv[col * n + j];
                work[i * n + j] -= factor * w;
                inv[i * n + j] -= factor * v;
            }
        }
    }
    let cond = norm_1(a, n) * norm_1(&inv, n);
    Some((inv, cond))
}

/// Cholesky factorization `a = L L^T` of a symmetric positive definite
/// matrix. Returns the lower factor, or the index of the first non-positive
/// pivot.
pub fn cholesky<S: Scalar>(a: &[S], n: usize) -> Result<Vec<S>, usize> {
    let mut l = vec![S::zero(); n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for m in 0..j {
            diag -= l[j * n + m] * l[j * n + m];
        }
        if !(diag > S::zero()) {
            return Err(j);
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut acc = a[i * n + j];
            for m in 0..j {
                acc -= l[i * n + m] * l[j * n + m];
            }
            l[i * n + j] = acc / ljj;
        }
    }
    Ok(l)
}

/// Solves `L L^T x = b` in place given the lower Cholesky factor.
pub fn cholesky_solve<S: Scalar>(l: &[S], n: usize, b: &mut [S]) {
    for i in 0..n {
        let mut acc = b[i];
        for m in 0..i {
            acc -= l[i * n + m] * b[m];
        }
        b[i] = acc / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut acc = b[i];
        for m in (i + 1)..n {
            acc -= l[m * n + i] * b[m];
        }
        b[i] = acc / l[i * n + i];
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<S: Scalar>(a: &[S], n: usize) -> Vec<S> {
    let mut m = a.to_vec();
    let eps = S::epsilon();
    for _sweep in 0..64 {
        let mut off = S::zero();
        let mut total = S::zero();
        for i in 0..n {
            for j in 0..n {
                let v = m[i * n + j] * m[i * n + j];
                total += v;
                if i != j {
                    off += v;
                }
            }
        }
        if off <= eps * eps * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}
