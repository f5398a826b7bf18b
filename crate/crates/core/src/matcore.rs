//! Small dense matrix utilities: pseudoinverse, definiteness and range tests.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`; the matrices in this
//! crate are at most a handful of rows, so no attempt is made at blocking or
//! reuse of factorizations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &Matrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Moore–Penrose pseudoinverse by SVD.
///
/// Singular values below `tol * σ_max` are treated as zero. With `tol == 0`
/// the cutoff is `max(rows, cols) * f64::EPSILON * σ_max`.
pub fn pinv(m: &Matrix, tol: f64) -> Result<Matrix> {
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::InvalidArgument(format!("pinv tolerance {tol}")));
    }
    ensure_finite(m, "pinv input")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Matrix::zeros(cols, rows));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(Matrix::zeros(cols, rows));
    }
    let cutoff = if tol == 0.0 {
        rows.max(cols) as f64 * f64::EPSILON * smax
    } else {
        tol * smax
    };
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut out = Matrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            // out += v_k * u_kᵀ / s
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out += (vk * uk.transpose()) / s;
        }
    }
    // The SVD result carries a forward error of order cond·eps, which the
    // products `MX` and `XM` amplify once more. Refinement steps
    // `X ← X + X(I − MX)` with a compensated residual bring it down to eps;
    // they leave the truncated directions at zero.
    for _ in 0..2 {
        let residual = identity_minus_product(m, &out);
        out += &out * residual;
    }
    Ok(out)
}

/// `I − MX` with every entry evaluated in doubled precision.
fn identity_minus_product(m: &Matrix, x: &Matrix) -> Matrix {
    let r = m.nrows();
    Matrix::from_fn(r, r, |i, j| {
        let (mut s, mut c) = (if i == j { 1.0 } else { 0.0 }, 0.0);
        for k in 0..m.ncols() {
            let p = -m[(i, k)] * x[(k, j)];
            let pe = (-m[(i, k)]).mul_add(x[(k, j)], -p);
            let t = s + p;
            let z = t - s;
            c += (s - (t - z)) + (p - z) + pe;
            s = t;
        }
        s + c
    })
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "eigenvalue input")?;
    if m.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    if m.nrows() == 1 {
        return Ok(m[(0, 0)]);
    }
    let eig = symmetrize(m).symmetric_eigen();
    Ok(eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min))
}

/// True iff the smallest eigenvalue of `(m + mᵀ)/2` is at least `margin`.
pub fn is_psd(m: &Matrix, margin: f64) -> Result<bool> {
    Ok(min_eigenvalue(m)? >= margin)
}

/// True iff the columns of `b` lie in the range of `a`, i.e.
/// `‖a a† b − b‖_F ≤ tol (1 + ‖b‖_F)`.
pub fn range_condition(a: &Matrix, b: &Matrix, tol: f64) -> Result<bool> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "range condition: a is {}x{}, b is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    ensure_finite(b, "range condition rhs")?;
    let proj = a * pinv(a, 0.0)? * b;
    Ok((proj - b).norm() <= tol * (1.0 + b.norm()))
}

/// Solve `sigma * x = rhs` for symmetric positive definite `sigma`.
pub(crate) fn spd_solve(sigma: &Matrix, rhs: &Matrix) -> Option<Matrix> {
    let chol = symmetrize(sigma).cholesky()?;
    Some(chol.solve(rhs))
}

// Row-major kernels used in the per-path loops, where allocating a DMatrix per
// step would dominate the run time.

/// Copy a matrix into row-major storage.
pub(crate) fn row_major(m: &Matrix) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `y += alpha * a * x` with `a` row-major `rows x cols`.
#[inline]
pub(crate) fn gemv_acc(y: &mut [f64], a: &[f64], x: &[f64], alpha: f64) {
    let cols = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let row = &a[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (aij, xj) in row.iter().zip(x) {
            acc += aij * xj;
        }
        *yi += alpha * acc;
    }
}
