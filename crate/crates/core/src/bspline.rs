//! B-spline bases on a closed interval and finite-difference penalties.
//!
//! Knot vectors follow the usual clamped layout: `degree` copies of each
//! boundary knot are appended outside `[lower, upper]`, giving `K_n + 2r + 1`
//! knots and `r + K_n` basis functions. Interior knot quantiles use the
//! type-7 convention (linear interpolation between order statistics).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::quantile;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("no observed values supplied for knot placement")]
    EmptyInput,
    #[error("interior knot count must be at least 1, got {0}")]
    BadKnotCount(usize),
    #[error("invalid support [{lower}, {upper}]")]
    BadSupport { lower: f64, upper: f64 },
    #[error("value {value} lies outside the support [{lower}, {upper}]")]
    OutsideSupport { value: f64, lower: f64, upper: f64 },
    #[error("knot vector is not non-decreasing at position {0}")]
    UnsortedKnots(usize),
    #[error("knot vector of length {len} is too short for degree {degree}")]
    ShortKnots { len: usize, degree: usize },
    #[error("difference order {order} requires more than {order} coefficients, got {count}")]
    BadDifference { order: usize, count: usize },
    #[error("expected {expected} covariates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite covariate value")]
    NonFinite,
}

/// Where the interior knots go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnotPlacement {
    /// At the k/K_n quantiles of the observed values.
    Quantile,
    /// Evenly spaced on the support.
    EquallySpaced,
    /// Evenly spaced, with the outer knots continuing the same spacing
    /// beyond the support instead of being replicated. Under this layout the
    /// second-difference penalty annihilates exactly the linear functions.
    UniformExtended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    interior_count: usize,
    knots: Vec<f64>,
    lower: f64,
    upper: f64,
}

/// Full knot vector for degree `degree`, `k_n` intervals on `support`.
pub fn make_knots(
    observed: &[f64],
    k_n: usize,
    degree: usize,
    support: (f64, f64),
    placement: KnotPlacement,
) -> Result<Vec<f64>, BasisError> {
    let (lower, upper) = support;
    if !(lower.is_finite() && upper.is_finite() && lower < upper) {
        return Err(BasisError::BadSupport { lower, upper });
    }
    if observed.is_empty() {
        return Err(BasisError::EmptyInput);
    }
    if k_n < 1 {
        return Err(BasisError::BadKnotCount(k_n));
    }
    for &v in observed {
        if !v.is_finite() {
            return Err(BasisError::NonFinite);
        }
        if v < lower || v > upper {
            return Err(BasisError::OutsideSupport { value: v, lower, upper });
        }
    }
    let width = upper - lower;
    let interior: Vec<f64> = (1..k_n)
        .map(|k| match placement {
            KnotPlacement::Quantile => quantile(observed, k as f64 / k_n as f64),
            KnotPlacement::EquallySpaced | KnotPlacement::UniformExtended => {
                lower + width * k as f64 / k_n as f64
            }
        })
        .collect();
    let mut knots = Vec::with_capacity(k_n + 2 * degree + 1);
    match placement {
        KnotPlacement::UniformExtended => {
            let h = width / k_n as f64;
            for j in (0..=degree).rev() {
                knots.push(lower - h * j as f64);
            }
            knots.extend_from_slice(&interior);
            for j in 0..=degree {
                knots.push(upper + h * j as f64);
            }
        }
        _ => {
            knots.extend(std::iter::repeat_n(lower, degree + 1));
            knots.extend_from_slice(&interior);
            knots.extend(std::iter::repeat_n(upper, degree + 1));
        }
    }
    Ok(knots)
}

impl BSplineBasis {
    /// Basis from a full knot vector. `knots[degree]` and
    /// `knots[len - degree - 1]` are taken as the support bounds.
    pub fn from_knots(degree: usize, knots: Vec<f64>) -> Result<Self, BasisError> {
        if knots.len() < 2 * degree + 2 {
            return Err(BasisError::ShortKnots { len: knots.len(), degree });
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(BasisError::NonFinite);
        }
        if let Some(i) = knots.windows(2).position(|w| w[1] < w[0]) {
            return Err(BasisError::UnsortedKnots(i + 1));
        }
        let lower = knots[degree];
        let upper = knots[knots.len() - degree - 1];
        if lower >= upper {
            return Err(BasisError::BadSupport { lower, upper });
        }
        let interior_count = knots.len() - 2 * degree - 1;
        Ok(Self { degree, interior_count, knots, lower, upper })
    }

    /// Construct knots from data and build the basis in one step.
    pub fn new(
        observed: &[f64],
        k_n: usize,
        degree: usize,
        support: (f64, f64),
        placement: KnotPlacement,
    ) -> Result<Self, BasisError> {
        Self::from_knots(degree, make_knots(observed, k_n, degree, support, placement)?)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of intervals K_n between the support bounds.
    pub fn interior_count(&self) -> usize {
        self.interior_count
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// Number of basis functions, r + K_n.
    pub fn dim(&self) -> usize {
        self.interior_count + self.degree
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    fn check(&self, x: f64, clamp: bool) -> Result<f64, BasisError> {
        if !x.is_finite() {
            return Err(BasisError::NonFinite);
        }
        if clamp {
            return Ok(x.clamp(self.lower, self.upper));
        }
        if !self.contains(x) {
            return Err(BasisError::OutsideSupport { value: x, lower: self.lower, upper: self.upper });
        }
        Ok(x)
    }

    /// Index `i` of the knot span with `knots[i] <= x < knots[i+1]`; the upper
    /// bound is assigned to the last nonempty span.
    fn span(&self, x: f64) -> usize {
        let n = self.dim();
        let t = &self.knots;
        if x >= self.upper {
            let mut i = n - 1;
            while i > self.degree && t[i] >= t[i + 1] {
                i -= 1;
            }
            return i;
        }
        // last i in [degree, n-1] with t[i] <= x
        let (mut lo, mut hi) = (self.degree, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// The r + 1 possibly nonzero basis values at `x` and the index of the
    /// first one. `out` must have length at least `degree + 1`.
    pub fn eval_local(&self, x: f64, clamp: bool, out: &mut [f64]) -> Result<usize, BasisError> {
        let x = self.check(x, clamp)?;
        let r = self.degree;
        let i = self.span(x);
        let t = &self.knots;
        let mut left = [0.0_f64; 16];
        let mut right = [0.0_f64; 16];
        let mut heap_l;
        let mut heap_r;
        let (left, right): (&mut [f64], &mut [f64]) = if r < 16 {
            (&mut left[..], &mut right[..])
        } else {
            heap_l = vec![0.0; r + 1];
            heap_r = vec![0.0; r + 1];
            (&mut heap_l[..], &mut heap_r[..])
        };
        out[0] = 1.0;
        for j in 1..=r {
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = 0.0;
            for k in 0..j {
                let denom = right[k + 1] + left[j - k];
                let temp = if denom == 0.0 { 0.0 } else { out[k] / denom };
                out[k] = saved + right[k + 1] * temp;
                saved = left[j - k] * temp;
            }
            out[j] = saved;
        }
        Ok(i - r)
    }

    /// Dense evaluation, length r + K_n.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        let mut v = vec![0.0; self.dim()];
        self.eval_into(x, false, &mut v)?;
        Ok(v)
    }

    /// Dense evaluation with out-of-support inputs moved to the nearest bound.
    pub fn eval_clamped(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        let mut v = vec![0.0; self.dim()];
        self.eval_into(x, true, &mut v)?;
        Ok(v)
    }

    /// Write the dense evaluation into `out[..dim]`.
    pub fn eval_into(&self, x: f64, clamp: bool, out: &mut [f64]) -> Result<(), BasisError> {
        let mut local = vec![0.0; self.degree + 1];
        let first = self.eval_local(x, clamp, &mut local)?;
        out[..self.dim()].iter_mut().for_each(|v| *v = 0.0);
        out[first..first + self.degree + 1].copy_from_slice(&local);
        Ok(())
    }

    /// Value and first derivative of the spline `sum_k coef[k] B_k` at `x`.
    pub fn spline_value_and_slope(&self, coef: &[f64], x: f64) -> Result<(f64, f64), BasisError> {
        let b = self.eval(x)?;
        let value = b.iter().zip(coef).map(|(a, c)| a * c).sum();
        if self.degree == 0 {
            return Ok((value, 0.0));
        }
        let r = self.degree;
        let t = &self.knots;
        let lower = Self::from_knots(r - 1, t[1..t.len() - 1].to_vec())?;
        let db = lower.eval(x)?;
        let slope = (0..self.dim() - 1)
            .map(|k| {
                let h = t[k + r + 1] - t[k + 1];
                if h == 0.0 { 0.0 } else { r as f64 * (coef[k + 1] - coef[k]) / h * db[k] }
            })
            .sum();
        Ok((value, slope))
    }
}

/// Concatenated evaluation of several bases, one covariate each.
pub fn build_design(bases: &[&BSplineBasis], covariates: &[f64], clamp: bool) -> Result<Vec<f64>, BasisError> {
    if bases.len() != covariates.len() {
        return Err(BasisError::DimensionMismatch { expected: bases.len(), got: covariates.len() });
    }
    let width: usize = bases.iter().map(|b| b.dim()).sum();
    let mut row = vec![0.0; width];
    let mut offset = 0;
    for (b, &x) in bases.iter().zip(covariates) {
        b.eval_into(x, clamp, &mut row[offset..])?;
        offset += b.dim();
    }
    Ok(row)
}

/// m-th order difference matrix D_m with `count` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    order: usize,
    entries: DMatrix<f64>,
}

impl DifferenceMatrix {
    pub fn new(order: usize, count: usize) -> Result<Self, BasisError> {
        if order < 1 || count <= order {
            return Err(BasisError::BadDifference { order, count });
        }
        let stencil: Vec<f64> = (0..=order)
            .map(|j| {
                let sign = if (order - j) % 2 == 0 { 1.0 } else { -1.0 };
                sign * binomial(order, j)
            })
            .collect();
        let mut entries = DMatrix::zeros(count - order, count);
        for k in 0..count - order {
            for (j, s) in stencil.iter().enumerate() {
                entries[(k, k + j)] = *s;
            }
        }
        Ok(Self { order, entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coefficient_count(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// D'D.
    pub fn penalty(&self) -> DMatrix<f64> {
        self.entries.transpose() * &self.entries
    }
}

/// Block-diagonal D_m'D_m penalty for concatenated bases; differences are
/// never taken across block boundaries.
pub fn block_penalty(order: usize, block_sizes: &[usize]) -> Result<DMatrix<f64>, BasisError> {
    let p: usize = block_sizes.iter().sum();
    let mut out = DMatrix::zeros(p, p);
    let mut off = 0;
    for &size in block_sizes {
        let pen = DifferenceMatrix::new(order, size)?.penalty();
        out.view_mut((off, off), (size, size)).copy_from(&pen);
        off += size;
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
