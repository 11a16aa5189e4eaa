//! Two-dimensional Gaussian product-kernel density estimate on a grid.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::quantile_sorted;
use crate::{Error, Result};

/// Density values on the product of two axis grids; `density[i * ny + j]`
/// is the value at `(x[i], y[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: (f64, f64),
}

impl DensityGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.density[i * self.y.len() + j]
    }

    /// Riemann sum over the grid cells.
    pub fn mass(&self) -> f64 {
        let dx = (self.x[self.x.len() - 1] - self.x[0]) / (self.x.len() - 1) as f64;
        let dy = (self.y[self.y.len() - 1] - self.y[0]) / (self.y.len() - 1) as f64;
        self.density.iter().sum::<f64>() * dx * dy
    }
}

/// Normal-reference kernel sd `1.06 min(sd, IQR/1.34) n^(-1/5)`.
pub fn reference_bandwidth(v: &[f64]) -> Result<f64> {
    let n = v.len();
    if n < 2 {
        return Err(Error::InvalidInput("bandwidth needs at least 2 samples".into()));
    }
    let sd = crate::linalg::variance(v).sqrt();
    if !(sd > 0.0) {
        return Err(Error::InvalidInput("samples have zero spread".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(1.06 * spread * (n as f64).powf(-0.2))
}

fn axis(v: &[f64], h: f64, n: usize) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn kernel_matrix(grid: &[f64], v: &[f64], h: f64) -> DMatrix<f64> {
    let c = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    DMatrix::from_fn(grid.len(), v.len(), |i, k| {
        let u = (grid[i] - v[k]) / h;
        c * (-0.5 * u * u).exp()
    })
}

/// KDE of the pairs `(x_k, y_k)` on an `n x n` grid spanning the sample
/// range extended by three bandwidths on each side.
pub fn kde2d(x: &[f64], y: &[f64], n: usize, bandwidth: Option<(f64, f64)>) -> Result<DensityGrid> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput("kde2d: coordinate vectors differ in length".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput("kde2d grid needs at least 2 points per axis".into()));
    }
    let (hx, hy) = match bandwidth {
        Some(b) => b,
        None => (reference_bandwidth(x)?, reference_bandwidth(y)?),
    };
    if !(hx > 0.0 && hy > 0.0) {
        return Err(Error::InvalidInput("kde2d bandwidths must be positive".into()));
    }
    let gx = axis(x, hx, n);
    let gy = axis(y, hy, n);
    let kx = kernel_matrix(&gx, x, hx);
    let ky = kernel_matrix(&gy, y, hy);
    let d = (kx * ky.transpose()) / x.len() as f64;
    let density = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| d[(i, j)]).collect();
    Ok(DensityGrid { x: gx, y: gy, density, bandwidth: (hx, hy) })
}

/// Mean over grid points of the squared difference from `truth(x, y)`.
pub fn mise<F: Fn(f64, f64) -> f64>(est: &DensityGrid, truth: F) -> f64 {
    let ny = est.y.len();
    let total: f64 = est
        .density
        .iter()
        .enumerate()
        .map(|(k, d)| (d - truth(est.x[k / ny], est.y[k % ny])).powi(2))
        .sum();
    total / est.density.len() as f64
}

/// Same as [`mise`] against precomputed truth values on the same grid.
pub fn mise_values(est: &DensityGrid, truth: &[f64]) -> Result<f64> {
    if truth.len() != est.density.len() {
        return Err(Error::InvalidInput("truth grid does not match the estimate".into()));
    }
    Ok(est.density.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{std_normal, substream};

    fn normal_pairs(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = substream(2, 0);
        ((0..n).map(|_| std_normal(&mut rng)).collect(), (0..n).map(|_| std_normal(&mut rng)).collect())
    }

    #[test]
    fn zero_spread_is_rejected() {
        assert!(kde2d(&[1.0; 10], &[2.0; 10], 25, None).is_err());
    }

    #[test]
    fn standard_normal_peak() {
        let (x, y) = normal_pairs(100_000);
        // Odd grid size on a nearly symmetric range puts a node near 0.
        let g = kde2d(&x, &y, 41, None).unwrap();
        let (i, j) = (20, 20);
        assert!(g.x[i].abs() < 0.15 && g.y[j].abs() < 0.15);
        let target = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((g.at(i, j) / target - 1.0).abs() < 0.1);
        assert!((g.mass() - 1.0).abs() < 0.02);
    }

    #[test]
    fn wider_bandwidth_lowers_peak() {
        let (x, y) = normal_pairs(5000);
        let g = kde2d(&x, &y, 25, None).unwrap();
        let g2 = kde2d(&x, &y, 25, Some((2.0 * g.bandwidth.0, 2.0 * g.bandwidth.1))).unwrap();
        let m1 = g.density.iter().copied().fold(0.0, f64::max);
        let m2 = g2.density.iter().copied().fold(0.0, f64::max);
        assert!(m2 <= m1);
    }

    #[test]
    fn mise_identities() {
        let (x, y) = normal_pairs(2000);
        let g = kde2d(&x, &y, 25, None).unwrap();
        let truth = g.density.clone();
        assert_eq!(mise_values(&g, &truth).unwrap(), 0.0);
        let shifted: Vec<f64> = truth.iter().map(|v| v + 0.01).collect();
        let shifted2: Vec<f64> = truth.iter().map(|v| v + 0.02).collect();
        let a = mise_values(&g, &shifted).unwrap();
        let b = mise_values(&g, &shifted2).unwrap();
        assert!((b / a - 4.0).abs() < 1e-9);
        assert!(mise_values(&g, &truth[1..]).is_err());
    }
}
