//! Tensor-product B-splines with analytic derivatives and the linear
//! coefficient conditions that make a surface monotone or concave along a
//! lever.
//!
//! Coefficient tensors are flattened row-major: the last lever's index
//! varies fastest. Constraint rows index into that flat vector.
//!
//! For one lever with knots `t` and degree `r`, the surface is
//! non-decreasing on `[t_r, t_n]` whenever adjacent coefficients along that
//! lever are non-decreasing, and concave there whenever the divided
//! differences `(a_i - a_{i-1}) / (t_{i+r} - t_i)` are non-increasing. For
//! quadratic splines both conditions are also necessary in one dimension.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::Response;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("invalid knot vector: {0}")]
    Knots(String),
    #[error("basis index {index} out of range for {count} basis functions")]
    Index { index: usize, count: usize },
    #[error("point has {got} coordinates, surface has {expected} levers")]
    Dimension { expected: usize, got: usize },
    #[error("lever {lever} out of range for {count} levers")]
    Lever { lever: usize, count: usize },
    #[error("derivative of order {order} needs degree >= {order}, lever has degree {degree}")]
    Degree { order: usize, degree: usize },
    #[error("coefficient tensor has {got} entries, knot vectors imply {expected}")]
    Shape { expected: usize, got: usize },
}

/// Clamped knot sequence `t_0 ≤ … ≤ t_{n+r}` for `n` basis functions of
/// degree `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

/// Sparse linear form over flattened coefficients: `(index, weight)` pairs.
pub type LinearRow = Vec<(usize, f64)>;

pub fn row_dot(row: &[(usize, f64)], a: &[f64]) -> f64 {
    row.iter().map(|&(j, w)| w * a[j]).sum()
}

impl KnotVector {
    /// Validates a clamped, non-decreasing knot sequence.
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self, SplineError> {
        if knots.len() < 2 * (degree + 1) {
            return Err(SplineError::Knots(format!(
                "{} knots cannot hold {} basis functions of degree {degree}",
                knots.len(),
                degree + 1
            )));
        }
        if knots.iter().any(|t| !t.is_finite()) {
            return Err(SplineError::Knots("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(SplineError::Knots("knots must be non-decreasing".into()));
        }
        let m = knots.len();
        if knots[..=degree].iter().any(|&t| t != knots[0])
            || knots[m - degree - 1..].iter().any(|&t| t != knots[m - 1])
        {
            return Err(SplineError::Knots(format!(
                "first and last {} knots must repeat (clamped)",
                degree + 1
            )));
        }
        if knots[0] >= knots[m - 1] {
            return Err(SplineError::Knots("empty knot range".into()));
        }
        Ok(Self { degree, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn basis_count(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// `[t_r, t_n]`, where the shape guarantees hold.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.basis_count()])
    }

    /// Knot span `k` with `t_k ≤ x < t_{k+1}`, `r ≤ k < n`, after clamping `x`
    /// into the domain. The right endpoint belongs to the last nonempty span.
    fn span(&self, x: f64) -> usize {
        let (lo, hi) = self.domain();
        let x = x.clamp(lo, hi);
        let n = self.basis_count();
        let r = self.degree;
        if x >= hi {
            let mut k = n - 1;
            while k > r && self.knots[k] == self.knots[k + 1] {
                k -= 1;
            }
            return k;
        }
        // largest k in [r, n-1] with t_k <= x
        let slice = &self.knots[r..n];
        r + slice.partition_point(|&t| t <= x) - 1
    }

    /// Values of the `r+1` basis functions of degree `p ≤ r` that can be
    /// nonzero on span `k`: entries for indices `k-p ..= k`.
    fn local_basis(&self, k: usize, x: f64, p: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut vals = vec![0.0; p + 1];
        vals[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = x - t[k + 1 - j];
            right[j] = t[k + j] - x;
            let mut saved = 0.0;
            for q in 0..j {
                let denom = right[q + 1] + left[j - q];
                let temp = if denom == 0.0 { 0.0 } else { vals[q] / denom };
                vals[q] = saved + right[q + 1] * temp;
                saved = left[j - q] * temp;
            }
            vals[j] = saved;
        }
        vals
    }

    /// Returns `(first, values)` where `values[j]` is the `order`-th
    /// derivative of basis function `first + j` at `x` (clamped into the
    /// domain). At most `degree + 1` functions are nonzero at any point.
    pub fn local_derivatives(&self, x: f64, order: usize) -> (usize, Vec<f64>) {
        let r = self.degree;
        let (lo, hi) = self.domain();
        let x = x.clamp(lo, hi);
        let k = self.span(x);
        if order > r {
            return (k - r, vec![0.0; r + 1]);
        }
        let t = &self.knots;
        // Derivative chain D^m B_j^q for q = r-order .. r; values indexed by
        // j - (k - q).
        let mut vals = self.local_basis(k, x, r - order);
        for q in (r - order + 1)..=r {
            let mut next = vec![0.0; q + 1];
            let qf = q as f64;
            for (jj, out) in next.iter_mut().enumerate() {
                let j = k - q + jj;
                // prev index for B_j^{q-1} is j - (k - q + 1) = jj - 1
                let prev_j = if jj >= 1 { vals[jj - 1] } else { 0.0 };
                let prev_j1 = if jj < q { vals[jj] } else { 0.0 };
                let d0 = t[j + q] - t[j];
                let d1 = t[j + q + 1] - t[j + 1];
                let a = if d0 > 0.0 { qf * prev_j / d0 } else { 0.0 };
                let b = if d1 > 0.0 { qf * prev_j1 / d1 } else { 0.0 };
                *out = a - b;
            }
            vals = next;
        }
        (k - r, vals)
    }

    /// `t_{i+r} - t_i`, the divided-difference spacing for coefficient `i`.
    pub fn delta(&self, i: usize) -> f64 {
        self.knots[i + self.degree] - self.knots[i]
    }

    /// Greville abscissae: coefficients equal to these reproduce `f(x) = x`.
    pub fn greville(&self) -> Vec<f64> {
        let r = self.degree.max(1) as f64;
        (0..self.basis_count())
            .map(|i| {
                if self.degree == 0 {
                    0.5 * (self.knots[i] + self.knots[i + 1])
                } else {
                    self.knots[i + 1..=i + self.degree].iter().sum::<f64>() / r
                }
            })
            .collect()
    }
}

/// Clamped uniform knots on `[low, high]` for `basis_count` functions of
/// `degree`: `n - r + 1` equally spaced breakpoints, ends repeated.
pub fn make_knots(
    low: f64,
    high: f64,
    basis_count: usize,
    degree: usize,
) -> Result<KnotVector, SplineError> {
    if !(low < high) || !low.is_finite() || !high.is_finite() {
        return Err(SplineError::Knots(format!("need low < high, got [{low}, {high}]")));
    }
    if basis_count < degree + 1 {
        return Err(SplineError::Knots(format!(
            "basis count {basis_count} below degree + 1 = {}",
            degree + 1
        )));
    }
    let intervals = basis_count - degree;
    let mut knots = vec![low; degree];
    for j in 0..=intervals {
        let x = if j == intervals {
            high
        } else {
            low + (high - low) * j as f64 / intervals as f64
        };
        knots.push(x);
    }
    knots.extend(std::iter::repeat_n(high, degree));
    KnotVector::new(degree, knots)
}

/// Single basis function by the Cox–de Boor recursion, with `0/0 = 0`.
/// The right end of the domain is included in the last nonempty span.
pub fn basis_eval(kv: &KnotVector, i: usize, x: f64) -> Result<f64, SplineError> {
    let n = kv.basis_count();
    if i >= n {
        return Err(SplineError::Index { index: i, count: n });
    }
    Ok(cox_de_boor(kv.knots(), i, kv.degree(), x, kv.domain().1))
}

fn cox_de_boor(t: &[f64], i: usize, r: usize, x: f64, right_end: f64) -> f64 {
    if r == 0 {
        let inside = t[i] <= x && x < t[i + 1];
        let closes_right = x == right_end && t[i] < t[i + 1] && t[i + 1] == right_end;
        return if inside || closes_right { 1.0 } else { 0.0 };
    }
    let d0 = t[i + r] - t[i];
    let d1 = t[i + r + 1] - t[i + 1];
    let a = if d0 == 0.0 {
        0.0
    } else {
        (x - t[i]) / d0 * cox_de_boor(t, i, r - 1, x, right_end)
    };
    let b = if d1 == 0.0 {
        0.0
    } else {
        (t[i + r + 1] - x) / d1 * cox_de_boor(t, i + 1, r - 1, x, right_end)
    };
    a + b
}

/// Tensor-product spline over lever budgets.
///
/// Each lever may carry an offset: the spline is evaluated at
/// `x_l - offset_l`, which lets levers with negative budgets use a
/// nonnegative internal coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSurface {
    knots: Vec<KnotVector>,
    offsets: Vec<f64>,
    coefficients: Vec<f64>,
}

/// On-disk layout of a fitted surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFile {
    pub degrees: Vec<usize>,
    pub knots: Vec<Vec<f64>>,
    pub domain: Vec<[f64; 2]>,
    pub offsets: Vec<f64>,
    /// Row-major (last lever fastest).
    pub coefficients: Vec<f64>,
}

impl SplineSurface {
    pub fn new(
        knots: Vec<KnotVector>,
        offsets: Vec<f64>,
        coefficients: Vec<f64>,
    ) -> Result<Self, SplineError> {
        if offsets.len() != knots.len() {
            return Err(SplineError::Dimension {
                expected: knots.len(),
                got: offsets.len(),
            });
        }
        let expected: usize = knots.iter().map(|k| k.basis_count()).product();
        if coefficients.len() != expected {
            return Err(SplineError::Shape {
                expected,
                got: coefficients.len(),
            });
        }
        Ok(Self {
            knots,
            offsets,
            coefficients,
        })
    }

    /// Zero surface with uniform clamped knots on each `domain` box. Levers
    /// whose box starts below zero are shifted to start at zero internally.
    pub fn uniform(
        domain: &[(f64, f64)],
        basis_counts: &[usize],
        degrees: &[usize],
    ) -> Result<Self, SplineError> {
        if basis_counts.len() != domain.len() || degrees.len() != domain.len() {
            return Err(SplineError::Dimension {
                expected: domain.len(),
                got: basis_counts.len().min(degrees.len()),
            });
        }
        let mut knots = Vec::with_capacity(domain.len());
        let mut offsets = Vec::with_capacity(domain.len());
        for ((&(lo, hi), &n), &r) in domain.iter().zip(basis_counts).zip(degrees) {
            let offset = if lo < 0.0 { lo } else { 0.0 };
            knots.push(make_knots(lo - offset, hi - offset, n, r)?);
            offsets.push(offset);
        }
        let total = knots.iter().map(|k| k.basis_count()).product();
        Self::new(knots, offsets, vec![0.0; total])
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    pub fn knot_vectors(&self) -> &[KnotVector] {
        &self.knots
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficient_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn with_coefficients(&self, coefficients: Vec<f64>) -> Result<Self, SplineError> {
        Self::new(self.knots.clone(), self.offsets.clone(), coefficients)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.knots.iter().map(|k| k.basis_count()).collect()
    }

    fn strides(&self) -> Vec<usize> {
        let shape = self.shape();
        let mut strides = vec![1; shape.len()];
        for l in (0..shape.len().saturating_sub(1)).rev() {
            strides[l] = strides[l + 1] * shape[l + 1];
        }
        strides
    }

    /// Domain box per lever in budget units.
    pub fn domain(&self) -> Vec<(f64, f64)> {
        self.knots
            .iter()
            .zip(&self.offsets)
            .map(|(k, o)| {
                let (lo, hi) = k.domain();
                (lo + o, hi + o)
            })
            .collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<(), SplineError> {
        if x.len() != self.dim() {
            return Err(SplineError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_lever(&self, l: usize, order: usize) -> Result<(), SplineError> {
        if l >= self.dim() {
            return Err(SplineError::Lever {
                lever: l,
                count: self.dim(),
            });
        }
        let degree = self.knots[l].degree();
        if degree < order {
            return Err(SplineError::Degree { order, degree });
        }
        Ok(())
    }

    /// Per-axis local weights for derivative orders `orders[l]`.
    fn axis_weights(&self, x: &[f64], orders: &[usize]) -> Vec<(usize, Vec<f64>)> {
        self.knots
            .iter()
            .zip(&self.offsets)
            .zip(x)
            .zip(orders)
            .map(|(((kv, o), &xi), &ord)| kv.local_derivatives(xi - o, ord))
            .collect()
    }

    /// Row of the design matrix: `(flat index, weight)` for every
    /// coefficient that is nonzero at `x` under the given derivative orders.
    pub fn design_row(&self, x: &[f64], orders: &[usize]) -> LinearRow {
        let weights = self.axis_weights(x, orders);
        let strides = self.strides();
        let mut row = Vec::new();
        let d = weights.len();
        let mut idx = vec![0usize; d];
        loop {
            let mut w = 1.0;
            let mut flat = 0;
            for l in 0..d {
                let (first, ref vals) = weights[l];
                w *= vals[idx[l]];
                flat += (first + idx[l]) * strides[l];
            }
            if w != 0.0 {
                row.push((flat, w));
            }
            // odometer, last axis fastest
            let mut l = d;
            loop {
                if l == 0 {
                    return row;
                }
                l -= 1;
                idx[l] += 1;
                if idx[l] < weights[l].1.len() {
                    break;
                }
                idx[l] = 0;
            }
        }
    }

    fn contract(&self, x: &[f64], orders: &[usize]) -> f64 {
        row_dot(&self.design_row(x, orders), &self.coefficients)
    }

    /// Surface value; points outside the domain are clamped onto it.
    pub fn surface_eval(&self, x: &[f64]) -> Result<f64, SplineError> {
        self.check_point(x)?;
        Ok(self.contract(x, &vec![0; self.dim()]))
    }

    /// Analytic partial derivative along lever `l` (the model-implied IOB).
    pub fn surface_partial(&self, x: &[f64], l: usize) -> Result<f64, SplineError> {
        self.check_point(x)?;
        self.check_lever(l, 1)?;
        let mut orders = vec![0; self.dim()];
        orders[l] = 1;
        Ok(self.contract(x, &orders))
    }

    pub fn surface_second_partial(&self, x: &[f64], l: usize) -> Result<f64, SplineError> {
        self.check_point(x)?;
        self.check_lever(l, 2)?;
        let mut orders = vec![0; self.dim()];
        orders[l] = 2;
        Ok(self.contract(x, &orders))
    }

    /// Mixed partial `∂²S / ∂x_l ∂x_m`.
    pub fn surface_mixed_partial(&self, x: &[f64], l: usize, m: usize) -> Result<f64, SplineError> {
        if l == m {
            return self.surface_second_partial(x, l);
        }
        self.check_point(x)?;
        self.check_lever(l, 1)?;
        self.check_lever(m, 1)?;
        let mut orders = vec![0; self.dim()];
        orders[l] = 1;
        orders[m] = 1;
        Ok(self.contract(x, &orders))
    }

    /// The derivative along lever `l` as its own spline: degree `r - 1`,
    /// knots `t[1..len-1]`, coefficients `r / Δ_i · (a_i - a_{i-1})`.
    pub fn derivative_surface(&self, l: usize) -> Result<SplineSurface, SplineError> {
        self.check_lever(l, 1)?;
        let kv = &self.knots[l];
        let r = kv.degree();
        let n = kv.basis_count();
        let new_kv = KnotVector::new(r - 1, kv.knots()[1..kv.knots().len() - 1].to_vec())?;
        let mut shape = self.shape();
        shape[l] = n - 1;
        let total: usize = shape.iter().product();
        let strides = self.strides();
        let mut new_strides = vec![1; shape.len()];
        for m in (0..shape.len().saturating_sub(1)).rev() {
            new_strides[m] = new_strides[m + 1] * shape[m + 1];
        }
        let mut coeffs = vec![0.0; total];
        for (flat_new, c) in coeffs.iter_mut().enumerate() {
            let mut rem = flat_new;
            let mut old = 0;
            let mut il = 0;
            for m in 0..shape.len() {
                let i = rem / new_strides[m];
                rem %= new_strides[m];
                if m == l {
                    il = i + 1;
                    old += il * strides[m];
                } else {
                    old += i * strides[m];
                }
            }
            let delta = kv.delta(il);
            *c = if delta > 0.0 {
                r as f64 / delta * (self.coefficients[old] - self.coefficients[old - strides[l]])
            } else {
                0.0
            };
        }
        let mut knots = self.knots.clone();
        knots[l] = new_kv;
        SplineSurface::new(knots, self.offsets.clone(), coeffs)
    }

    /// Rows `a[..i..] - a[..i-1..]` along lever `l`; `row · a ≥ 0` for every
    /// row makes the surface non-decreasing in that lever.
    pub fn monotonicity_rows(&self, l: usize) -> Vec<LinearRow> {
        let shape = self.shape();
        let strides = self.strides();
        let mut rows = Vec::new();
        for flat in 0..self.coefficients.len() {
            let i = (flat / strides[l]) % shape[l];
            if i >= 1 {
                rows.push(vec![(flat - strides[l], -1.0), (flat, 1.0)]);
            }
        }
        rows
    }

    /// Rows `(a_i - a_{i-1})/Δ_i - (a_{i-1} - a_{i-2})/Δ_{i-1}` along lever
    /// `l` with `Δ_i = t_{i+r} - t_i`; `row · a ≤ 0` for every row makes the
    /// surface concave in that lever.
    pub fn concavity_rows(&self, l: usize) -> Vec<LinearRow> {
        let shape = self.shape();
        let strides = self.strides();
        let kv = &self.knots[l];
        let mut rows = Vec::new();
        for flat in 0..self.coefficients.len() {
            let i = (flat / strides[l]) % shape[l];
            if i >= 2 {
                let d1 = kv.delta(i);
                let d0 = kv.delta(i - 1);
                let s = strides[l];
                rows.push(vec![
                    (flat - 2 * s, 1.0 / d0),
                    (flat - s, -1.0 / d1 - 1.0 / d0),
                    (flat, 1.0 / d1),
                ]);
            }
        }
        rows
    }

    pub fn to_file(&self) -> SurfaceFile {
        SurfaceFile {
            degrees: self.knots.iter().map(|k| k.degree()).collect(),
            knots: self.knots.iter().map(|k| k.knots().to_vec()).collect(),
            domain: self.domain().into_iter().map(|(a, b)| [a, b]).collect(),
            offsets: self.offsets.clone(),
            coefficients: self.coefficients.clone(),
        }
    }

    pub fn from_file(file: SurfaceFile) -> Result<Self, SplineError> {
        if file.knots.len() != file.degrees.len() {
            return Err(SplineError::Dimension {
                expected: file.degrees.len(),
                got: file.knots.len(),
            });
        }
        let knots = file
            .degrees
            .iter()
            .zip(file.knots)
            .map(|(&r, t)| KnotVector::new(r, t))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(knots, file.offsets, file.coefficients)
    }
}

impl Response for SplineSurface {
    fn dim(&self) -> usize {
        self.knots.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.contract(x, &vec![0; self.dim()])
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let d = self.dim();
        DVector::from_iterator(
            d,
            (0..d).map(|l| {
                let mut o = vec![0; d];
                o[l] = 1;
                self.contract(x, &o)
            }),
        )
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for l in 0..d {
            for m in l..d {
                let mut o = vec![0; d];
                o[l] += 1;
                o[m] += 1;
                let v = self.contract(x, &o);
                h[(l, m)] = v;
                h[(m, l)] = v;
            }
        }
        h
    }
}
