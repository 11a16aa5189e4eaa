use nalgebra::{DMatrix, DVector};

use super::TrendError;

/// Local polynomial regression with tricube weights.
///
/// For span `f <= 1` each query uses the `floor(f n)` nearest points and the
/// distance to the farthest of them as bandwidth; for `f > 1` all points are
/// used and the maximum distance is inflated by `f`.
pub fn loess_smooth(x: &[f64], y: &[f64], query: &[f64], span: f64, degree: usize) -> Result<Vec<f64>, TrendError> {
    let n = x.len();
    if n != y.len() {
        return Err(TrendError::Invalid(format!("loess: {n} x values but {} y values", y.len())));
    }
    if !(span.is_finite() && span > 0.0) {
        return Err(TrendError::Invalid(format!("loess span must be positive, got {span}")));
    }
    if degree > 2 {
        return Err(TrendError::Invalid(format!("loess degree must be 0, 1 or 2, got {degree}")));
    }
    if x.iter().chain(y).chain(query).any(|v| !v.is_finite()) {
        return Err(TrendError::Invalid("loess: non-finite input".into()));
    }
    let q = ((span * n as f64).floor() as usize).min(n);
    let mut dist = vec![0.0; n];
    query
        .iter()
        .map(|&x0| {
            for (d, xi) in dist.iter_mut().zip(x) {
                *d = (xi - x0).abs();
            }
            let mut sorted = dist.clone();
            sorted.sort_by(f64::total_cmp);
            let h = if span > 1.0 {
                sorted[n - 1] * span
            } else if q == 0 {
                0.0
            } else {
                sorted[q - 1]
            };
            // Slight inflation keeps the q-th neighbour in the window.
            let h = h * (1.0 + 1e-10);
            let w: Vec<f64> = dist
                .iter()
                .map(|&d| if h > 0.0 && d < h { (1.0 - (d / h).powi(3)).powi(3) } else { 0.0 })
                .collect();
            let used = w.iter().filter(|v| **v > 0.0).count();
            if used < degree + 2 {
                return Err(TrendError::EmptyWindow { at: x0, points: used });
            }
            let cols = degree + 1;
            let mut a = DMatrix::zeros(cols, cols);
            let mut b = DVector::zeros(cols);
            for i in 0..n {
                if w[i] == 0.0 {
                    continue;
                }
                let u = x[i] - x0;
                let pw = [1.0, u, u * u];
                for j in 0..cols {
                    b[j] += w[i] * pw[j] * y[i];
                    for k in 0..cols {
                        a[(j, k)] += w[i] * pw[j] * pw[k];
                    }
                }
            }
            let c = a.lu().solve(&b).ok_or(TrendError::EmptyWindow { at: x0, points: used })?;
            Ok(c[0])
        })
        .collect()
}
