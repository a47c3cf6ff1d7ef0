//! Dense least squares and symmetric inverses used across the pipeline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use tracing::warn;

/// Smallest ratio `min |R_jj| / max |R_jj|` of the QR factor treated as
/// full column rank; below it the eigenvalue pseudo-inverse takes over.
const RANK_RATIO: f64 = 1e-9;

/// Result of a least-squares solve.
#[derive(Clone, Debug)]
pub struct LsSolution {
    pub coef: DVector<f64>,
    /// Condition number of the column-scaled Gram matrix.
    pub cond: f64,
    /// Numerical rank of the design.
    pub rank: usize,
}

/// Column scaling `1 / ||x_j||`, with unit scale for zero columns.
fn col_scales(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        x.ncols(),
        x.column_iter().map(|c| {
            let n = c.norm();
            if n > 0.0 {
                1.0 / n
            } else {
                1.0
            }
        }),
    )
}

/// Least squares `min ||y - X b||` on column-scaled data: Householder QR
/// with one round of iterative refinement when the design has full column
/// rank, a minimum-norm eigen pseudo-inverse otherwise.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> LsSolution {
    let s = col_scales(x);
    let mut xs = x.clone();
    for (j, mut c) in xs.column_iter_mut().enumerate() {
        c *= s[j];
    }
    let eig = SymmetricEigen::new(xs.tr_mul(&xs));
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let qr = (x.nrows() >= x.ncols()).then(|| xs.clone().qr());
    let factors = qr.map(|qr| (qr.q(), qr.r())).filter(|(_, r)| {
        let d = r.diagonal().abs();
        d.min() > RANK_RATIO * d.max()
    });
    let mut coef;
    let rank;
    if let Some((q, r)) = factors {
        let solve = |rhs: &DVector<f64>| r.solve_upper_triangular(&q.tr_mul(rhs)).expect("nonsingular R");
        coef = solve(y);
        let resid = y - &xs * &coef;
        coef += solve(&resid);
        rank = x.ncols();
    } else {
        let (pinv, rk) = eig_pinv(&eig, 1e-12);
        coef = &pinv * xs.tr_mul(y);
        let r = y - &xs * &coef;
        coef += &pinv * xs.tr_mul(&r);
        rank = rk;
        warn!(cond, rank, cols = x.ncols(), "rank-deficient design, using minimum-norm solution");
    }
    coef.component_mul_assign(&s);
    LsSolution { coef, cond, rank }
}

/// Pseudo-inverse from an eigen-decomposition, zeroing eigenvalues below
/// `rel * max eigenvalue`. Returns the inverse and the retained rank.
pub fn eig_pinv(eig: &SymmetricEigen<f64, nalgebra::Dyn>, rel: f64) -> (DMatrix<f64>, usize) {
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let thresh = rel * lmax;
    let n = eig.eigenvalues.len();
    let mut inv_vals = DVector::zeros(n);
    let mut rank = 0;
    for j in 0..n {
        let l = eig.eigenvalues[j];
        if l > thresh && l > 0.0 {
            inv_vals[j] = 1.0 / l;
            rank += 1;
        }
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut c) in scaled.column_iter_mut().enumerate() {
        c *= inv_vals[j];
    }
    (scaled * eig.eigenvectors.transpose(), rank)
}

/// Symmetric pseudo-inverse with relative eigenvalue threshold.
#[derive(Clone, Debug)]
pub struct SymInverse {
    pub inv: DMatrix<f64>,
    pub rank: usize,
    pub cond: f64,
    pub min_eig: f64,
}

pub fn sym_pinv(a: &DMatrix<f64>, rel: f64) -> SymInverse {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let (inv, rank) = eig_pinv(&eig, rel);
    SymInverse {
        inv,
        rank,
        cond: if lmin > 0.0 { lmax / lmin } else { f64::INFINITY },
        min_eig: lmin,
    }
}

/// Inverse of a symmetric positive semi-definite matrix, ridge-regularized
/// by `1e-10 * trace / dim` when it is numerically singular.
pub fn spd_inverse_ridge(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if lmin > 1e-13 * lmax {
        if let Some(ch) = nalgebra::Cholesky::new(sym.clone()) {
            return (ch.inverse(), false);
        }
    }
    let n = a.nrows();
    let ridge = 1e-10 * sym.trace() / n as f64;
    warn!(lmin, lmax, ridge, "near-singular covariance, adding ridge before inversion");
    let reg = sym + DMatrix::identity(n, n) * ridge;
    let inv = match nalgebra::Cholesky::new(reg.clone()) {
        Some(ch) => ch.inverse(),
        None => sym_pinv(&reg, 1e-14).inv,
    };
    (inv, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_and_orthogonality() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0, 9.5]);
        let s = least_squares(&x, &y);
        let r = &y - &x * &s.coef;
        assert!(x.tr_mul(&r).amax() < 1e-12);
        // hand-computed slope and intercept
        assert!((s.coef[1] - 2.1).abs() < 1e-12);
        assert!((s.coef[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_gives_min_norm() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let s = least_squares(&x, &y);
        assert_eq!(s.rank, 1);
        assert!((s.coef[0] - 1.0).abs() < 1e-10 && (s.coef[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ridge_inverse_flags_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, ridged) = spd_inverse_ridge(&a);
        assert!(ridged);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (inv, ridged) = spd_inverse_ridge(&b);
        assert!(!ridged);
        assert!((&b * inv - DMatrix::identity(2, 2)).amax() < 1e-14);
    }
}
