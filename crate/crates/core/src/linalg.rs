//! Small dense helpers: null spaces, ranks, pseudo-inverse solves and NNLS.

use nalgebra::{DMatrix, DVector};

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-11;

/// One-sided Jacobi SVD of `a` (rows >= cols): `a = U diag(s) Vᵀ` with U
/// rows×cols, V cols×cols orthogonal and `s` sorted in decreasing order.
///
/// nalgebra's bidiagonal SVD can return wrong factors when some entries are
/// at rounding level, so the dense helpers here use this instead.
fn jacobi_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (r, k) = a.shape();
    debug_assert!(r >= k);
    let mut u = a.clone();
    let mut v = DMatrix::identity(k, k);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k).map(|j| u.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sv: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u_sorted = DMatrix::from_fn(r, k, |i, c| {
        let j = order[c];
        if norms[j] > 0.0 {
            u[(i, j)] / norms[j]
        } else {
            0.0
        }
    });
    let v_sorted = DMatrix::from_fn(k, k, |i, c| v[(i, order[c])]);
    (sv, u_sorted, v_sorted)
}

/// Thin SVD for any shape: `(s, U, V)` with `a = U diag(s) Vᵀ` and
/// `min(rows, cols)` singular triplets.
fn thin_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    if a.nrows() >= a.ncols() {
        jacobi_svd(a)
    } else {
        let (s, u, v) = jacobi_svd(&a.transpose());
        (s, v, u)
    }
}

/// Full SVD of `a` (padded with zero rows so that all right singular vectors
/// are available), returning `(singular values, V)` with V k×k.
fn full_right_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (r, k) = a.shape();
    let padded = if r < k {
        let mut p = DMatrix::zeros(k, k);
        p.rows_mut(0, r).copy_from(a);
        p
    } else {
        a.clone()
    };
    let (sv, _, v) = jacobi_svd(&padded);
    (sv, v)
}

/// Orthonormal basis (as columns) of `{u : a u = 0}`.
pub fn null_space(a: &DMatrix<f64>, cols: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    let (sv, v) = full_right_svd(a);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let thr = RANK_TOL * smax.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..cols).filter(|&j| sv[j] <= thr).collect();
    DMatrix::from_fn(cols, keep.len(), |i, j| v[(i, keep[j])])
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    thin_svd(a).0
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    let sv = singular_values(a);
    let smax = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > RANK_TOL * smax && s > 0.0).count()
}

/// Minimum-norm least-squares solution of `a x ≈ b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    lstsq_scaled(a, b, 0.0)
}

/// Like [`lstsq`], but singular values below `RANK_TOL * max(smax, scale)`
/// count as zero. Used when `a` is a product that may vanish numerically.
pub fn lstsq_scaled(a: &DMatrix<f64>, b: &DVector<f64>, scale: f64) -> DVector<f64> {
    let cols = a.ncols();
    let mut x = DVector::zeros(cols);
    if cols == 0 || a.nrows() == 0 {
        return x;
    }
    let (sv, u, v) = thin_svd(a);
    let smax = sv.first().copied().unwrap_or(0.0).max(scale);
    let eps = RANK_TOL * smax.max(f64::MIN_POSITIVE);
    for (j, &s) in sv.iter().enumerate() {
        if s > eps {
            x += v.column(j) * (u.column(j).dot(b) / s);
        }
    }
    x
}

/// Lawson–Hanson non-negative least squares: `min ||a x - b||` over `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE) * b.amax().max(1.0);
    let tol = 10.0 * f64::EPSILON * scale * (a.nrows().max(n) as f64);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(&idx);
            let s_sub = lstsq(&sub, b);
            if s_sub.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (p, &k) in idx.iter().enumerate() {
                    x[k] = s_sub[p];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (p, &k) in idx.iter().enumerate() {
                if s_sub[p] <= 0.0 {
                    let denom = x[k] - s_sub[p];
                    if denom > 0.0 {
                        alpha = alpha.min(x[k] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = if alpha.is_finite() { alpha } else { 0.0 };
            let xmax = x.amax();
            for (p, &k) in idx.iter().enumerate() {
                x[k] += alpha * (s_sub[p] - x[k]);
                if s_sub[p] <= 0.0 && x[k] <= 1e-14 * (1.0 + xmax) {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
            if idx.iter().all(|&k| !passive[k]) {
                break;
            }
        }
    }
    x
}
