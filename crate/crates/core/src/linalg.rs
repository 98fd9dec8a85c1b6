//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest absolute entry, zero for an empty matrix.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_vec(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn max_abs_diff_vec(a: &Vector, b: &Vector) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// `max |M - Mᵀ|`.
pub fn symmetry_residual(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut r = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            r = r.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    r
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Largest real part among the eigenvalues of `m`.
pub fn spectral_abscissa(m: &Mat) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Rough 2-norm condition estimate from a Cholesky factor: `(max Lii / min Lii)²`.
pub fn cholesky_condition_estimate(l: &Mat) -> f64 {
    let d = l.diagonal();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), x| (lo.min(x.abs()), hi.max(x.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Build an `n×n` matrix from a row-major slice.
pub fn from_row_major(n_rows: usize, n_cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(n_rows, n_cols, data)
}

pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetry_and_eigen() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_eq!(symmetry_residual(&m), 0.0);
        assert!((min_sym_eigenvalue(&m) - 1.0).abs() < 1e-14);
        let a = Mat::from_row_slice(2, 2, &[-1.0, 5.0, -5.0, -1.0]);
        assert!((spectral_abscissa(&a) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_major_round_trip() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(to_row_major(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_row_major(2, 3, &to_row_major(&m)), m);
    }
}
