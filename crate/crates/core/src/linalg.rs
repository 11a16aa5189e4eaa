//! Small dense linear-algebra and order-statistic helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Solve `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Moore-Penrose inverse of a symmetric matrix; eigenvalues below
/// `rel_tol * max|eigenvalue|` are treated as zero. Returns the inverse and
/// whether any eigenvalue was dropped.
pub fn sym_pinv(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = rel_tol * max;
    let mut dropped = false;
    let inv_vals = eig.eigenvalues.map(|v| {
        if v.abs() > cut && v.abs() > 0.0 {
            1.0 / v
        } else {
            dropped = true;
            0.0
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&inv_vals) * q.transpose(), dropped)
}

/// Quantile of sorted data by linear interpolation between order statistics
/// (Hyndman-Fan type 7, the R default).
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 quantile of unsorted data.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, prob)
}

/// `n` points log-spaced on `[lo, hi]`.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Default smoothing-parameter grid: 25 points log-spaced on [1e-4, 1e4].
pub fn default_lambda_grid() -> Vec<f64> {
    logspace(1e-4, 1e4, 25)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with divisor n - 1.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_matches_r() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile_sorted(&v, 0.5), 5.5);
        assert!((quantile_sorted(&v, 0.25) - 3.25).abs() < 1e-15);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 10.0);
    }

    #[test]
    fn logspace_endpoints() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 25);
        assert!((g[0] - 1e-4).abs() < 1e-16);
        assert!((g[24] - 1e4).abs() < 1e-8);
        assert!((g[12] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_of_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, dropped) = sym_pinv(&a, 1e-12);
        assert!(dropped);
        let apa = &a * &p * &a;
        assert!((apa - a).abs().max() < 1e-12);
    }
}
