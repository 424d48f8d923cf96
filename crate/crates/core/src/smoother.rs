//! Shape-constrained least-squares fitting of tensor B-spline surfaces.
//!
//! A city's surface is fitted to teacher samples `(x_j, y_j)` and to
//! experimental IOB measurements by minimizing
//!
//! ```text
//! ‖Φa − y‖² + λ Σ_k (Ψ_k a − iob_k)² / σ²_k
//! ```
//!
//! where `Φ` holds basis values at the sample points and `Ψ_k` the
//! derivative-basis row of the measured lever at the measurement point.
//! Monotonicity and concavity of the coefficients enter as linear
//! inequality rows, so each fit is one convex QP.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bspline::{row_dot, LinearRow, SplineError, SplineSurface};
use crate::oracle::IobMeasurement;
use crate::qp::{solve_qp, QpError, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Error)]
pub enum SmootherError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("no samples to fit")]
    EmptySamples,
    #[error("expected points of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point {point:?} lies outside the fitting domain")]
    OutOfDomain { point: Vec<f64> },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("fit QP did not converge ({status:?}, max KKT residual {residual:e})")]
    NotConverged { status: QpStatus, residual: f64 },
}

/// Shape flags for one lever.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub monotone: bool,
    pub concave: bool,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            monotone: true,
            concave: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Per-lever fitting box in budget units.
    pub domain: Vec<(f64, f64)>,
    pub basis_counts: Vec<usize>,
    pub degrees: Vec<usize>,
    /// IOB trade-off; `None` selects it by 5-fold cross-validation.
    pub lambda: Option<f64>,
    pub shapes: Vec<Shape>,
    pub qp: QpSettings,
}

impl FitConfig {
    /// Quadratic splines with `basis_count` functions per lever, monotone and
    /// concave in every lever.
    pub fn new(domain: Vec<(f64, f64)>, basis_count: usize, lambda: Option<f64>) -> Self {
        let d = domain.len();
        Self {
            domain,
            basis_counts: vec![basis_count; d],
            degrees: vec![2; d],
            lambda,
            shapes: vec![Shape::default(); d],
            qp: QpSettings {
                tol: 1e-9,
                max_iter: 200,
                polish: true,
            },
        }
    }

    pub fn unconstrained(mut self) -> Self {
        for s in &mut self.shapes {
            *s = Shape {
                monotone: false,
                concave: false,
            };
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn validate(&self) -> Result<(), SmootherError> {
        let d = self.dim();
        if d == 0 {
            return Err(SmootherError::Config("no levers".into()));
        }
        if self.basis_counts.len() != d || self.degrees.len() != d || self.shapes.len() != d {
            return Err(SmootherError::Config(format!(
                "per-lever settings must have {d} entries"
            )));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(SmootherError::Config(format!("lambda must be >= 0, got {l}")));
            }
        }
        for (l, (&n, &r)) in self.basis_counts.iter().zip(&self.degrees).enumerate() {
            if n < r + 1 {
                return Err(SmootherError::Config(format!(
                    "lever {l}: {n} basis functions cannot carry degree {r}"
                )));
            }
            if self.shapes[l].concave && r < 2 {
                return Err(SmootherError::Config(format!(
                    "lever {l}: concavity rows need degree >= 2"
                )));
            }
        }
        for (l, &(lo, hi)) in self.domain.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(SmootherError::Config(format!(
                    "lever {l}: empty domain [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn template(&self) -> Result<SplineSurface, SmootherError> {
        Ok(SplineSurface::uniform(&self.domain, &self.basis_counts, &self.degrees)?)
    }
}

/// Widens each `[floor, ceiling]` box by `fraction` of its width on both
/// sides. Degenerate boxes get `max(fraction·|v|, 1)`.
pub fn padded_domain(bounds: &[(f64, f64)], fraction: f64) -> Vec<(f64, f64)> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            let width = hi - lo;
            let pad = if width > 0.0 {
                fraction * width
            } else {
                (fraction * lo.abs()).max(1.0)
            };
            (lo - pad, hi + pad)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub surface: SplineSurface,
    /// `‖Φa − y‖²`, recomputed from the fitted surface.
    pub rss: f64,
    /// `Σ (Ψ_k a − iob_k)² / σ²_k`, recomputed from the fitted surface.
    pub iob_penalty: f64,
    pub lambda: f64,
    pub active_constraints: usize,
    pub status: QpStatus,
}

impl FitReport {
    /// The fitted value of the least-squares objective.
    pub fn objective(&self) -> f64 {
        self.rss + self.lambda * self.iob_penalty
    }
}

/// Surface slope along lever `l`: the model-implied IOB.
pub fn model_iob(surface: &SplineSurface, x: &[f64], l: usize) -> Result<f64, SplineError> {
    surface.surface_partial(x, l)
}

struct Design {
    phi: Vec<LinearRow>,
    y: Vec<f64>,
    psi: Vec<LinearRow>,
    iob: Vec<f64>,
    weight: Vec<f64>,
}

fn check_inside(domain: &[(f64, f64)], x: &[f64]) -> Result<(), SmootherError> {
    if x.len() != domain.len() {
        return Err(SmootherError::Dimension {
            expected: domain.len(),
            got: x.len(),
        });
    }
    let inside = x.iter().zip(domain).all(|(&v, &(lo, hi))| {
        let slack = 1e-9 * (hi - lo).max(1.0);
        v >= lo - slack && v <= hi + slack
    });
    if inside {
        Ok(())
    } else {
        Err(SmootherError::OutOfDomain { point: x.to_vec() })
    }
}

fn design(
    template: &SplineSurface,
    samples: &[(Vec<f64>, f64)],
    iob: &[IobMeasurement],
    domain: &[(f64, f64)],
) -> Result<Design, SmootherError> {
    let d = template.dim();
    let zero = vec![0usize; d];
    let mut phi = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for (x, v) in samples {
        check_inside(domain, x)?;
        phi.push(template.design_row(x, &zero));
        y.push(*v);
    }
    let mut psi = Vec::with_capacity(iob.len());
    let mut targets = Vec::with_capacity(iob.len());
    let mut weight = Vec::with_capacity(iob.len());
    for m in iob {
        check_inside(domain, &m.budget_point)?;
        if m.lever >= d {
            return Err(SmootherError::Dimension {
                expected: d,
                got: m.lever + 1,
            });
        }
        if !(m.variance > 0.0 && m.variance.is_finite()) {
            return Err(SmootherError::Config(format!(
                "measurement variance must be positive, got {}",
                m.variance
            )));
        }
        let mut orders = zero.clone();
        orders[m.lever] = 1;
        psi.push(template.design_row(&m.budget_point, &orders));
        targets.push(m.iob);
        weight.push(1.0 / m.variance);
    }
    Ok(Design {
        phi,
        y,
        psi,
        iob: targets,
        weight,
    })
}

fn add_gram(rows: &[LinearRow], weights: impl Iterator<Item = f64>, p: &mut DMatrix<f64>) {
    for (row, w) in rows.iter().zip(weights) {
        for &(i, vi) in row {
            let wi = w * vi;
            for &(j, vj) in row {
                p[(i, j)] += wi * vj;
            }
        }
    }
}

/// Shape rows in `G a ≤ 0` form, each scaled to unit max-entry.
fn shape_rows(template: &SplineSurface, shapes: &[Shape]) -> Vec<LinearRow> {
    let mut rows = Vec::new();
    for (l, shape) in shapes.iter().enumerate() {
        if shape.monotone {
            for r in template.monotonicity_rows(l) {
                rows.push(r.into_iter().map(|(i, v)| (i, -v)).collect());
            }
        }
        if shape.concave {
            rows.extend(template.concavity_rows(l));
        }
    }
    for r in &mut rows {
        let m = r.iter().fold(0.0f64, |m, &(_, v)| m.max(v.abs()));
        if m > 0.0 {
            for e in r.iter_mut() {
                e.1 /= m;
            }
        }
    }
    rows
}

/// Builds the QP whose objective is `value_scale⁻²` times the fit
/// objective in coefficients `a / value_scale`.
fn build(
    template: &SplineSurface,
    design: &Design,
    lambda: f64,
    shapes: &[Shape],
    value_scale: f64,
) -> QpProblem {
    let n = template.coefficient_count();
    let mut p = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    add_gram(&design.phi, std::iter::repeat(1.0), &mut p);
    for (row, &y) in design.phi.iter().zip(&design.y) {
        for &(i, v) in row {
            q[i] -= v * y / value_scale;
        }
    }
    if lambda > 0.0 {
        add_gram(&design.psi, design.weight.iter().map(|w| lambda * w), &mut p);
        for ((row, &t), &w) in design.psi.iter().zip(&design.iob).zip(&design.weight) {
            for &(i, v) in row {
                q[i] -= lambda * w * v * t / value_scale;
            }
        }
    }
    let p = 2.0 * (&p + p.transpose()) * 0.5;
    let q = 2.0 * q;
    let rows = shape_rows(template, shapes);
    let mut g = DMatrix::zeros(rows.len(), n);
    for (k, r) in rows.iter().enumerate() {
        for &(i, v) in r {
            g[(k, i)] += v;
        }
    }
    let h = DVector::zeros(rows.len());
    QpProblem::new(p, q).with_inequalities(g, h)
}

/// The fit QP in coefficient units: `P = 2(ΦᵀΦ + λΨᵀWΨ)`,
/// `q = −2(Φᵀy + λΨᵀW·iob)`, and `G a ≤ 0` stacking the enabled
/// monotonicity and concavity rows (each row scaled to unit max-entry).
/// With `lambda = None` the IOB term is dropped.
pub fn assemble_fit(
    samples: &[(Vec<f64>, f64)],
    iob: &[IobMeasurement],
    cfg: &FitConfig,
) -> Result<QpProblem, SmootherError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SmootherError::EmptySamples);
    }
    let template = cfg.template()?;
    let design = design(&template, samples, iob, &cfg.domain)?;
    Ok(build(&template, &design, cfg.lambda.unwrap_or(0.0), &cfg.shapes, 1.0))
}

fn value_scale(design: &Design) -> f64 {
    let m = design.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Snaps tiny violations of the monotonicity rows left by the interior
/// point tolerance: a running maximum along each monotone axis. A running
/// maximum along one axis keeps monotonicity along the others.
fn repair_monotone(template: &SplineSurface, shapes: &[Shape], a: &mut [f64]) {
    let shape = template.shape();
    let d = shape.len();
    let mut strides = vec![1usize; d];
    for l in (0..d.saturating_sub(1)).rev() {
        strides[l] = strides[l + 1] * shape[l + 1];
    }
    for l in 0..d {
        if !shapes[l].monotone {
            continue;
        }
        for flat in 0..a.len() {
            let i = (flat / strides[l]) % shape[l];
            if i >= 1 {
                let prev = a[flat - strides[l]];
                if a[flat] < prev {
                    a[flat] = prev;
                }
            }
        }
    }
}

fn solve_fit(
    template: &SplineSurface,
    design: &Design,
    lambda: f64,
    cfg: &FitConfig,
) -> Result<FitReport, SmootherError> {
    let scale = value_scale(design);
    let problem = build(template, design, lambda, &cfg.shapes, scale);
    let sol = solve_qp(&problem, &cfg.qp)?;
    match sol.status {
        QpStatus::Optimal => {}
        status => {
            return Err(SmootherError::NotConverged {
                status,
                residual: sol.residuals.max(),
            })
        }
    }
    let mut a: Vec<f64> = sol.x.iter().map(|v| v * scale).collect();
    repair_monotone(template, &cfg.shapes, &mut a);
    let slack = &problem.h - &problem.g * &sol.x;
    let active_constraints = slack.iter().filter(|s| s.abs() <= 1e-6).count();
    let surface = template.with_coefficients(a)?;
    let rss = design
        .phi
        .iter()
        .zip(&design.y)
        .map(|(r, y)| (row_dot(r, surface.coefficients()) - y).powi(2))
        .sum();
    let iob_penalty = design
        .psi
        .iter()
        .zip(&design.iob)
        .zip(&design.weight)
        .map(|((r, t), w)| w * (row_dot(r, surface.coefficients()) - t).powi(2))
        .sum();
    Ok(FitReport {
        surface,
        rss,
        iob_penalty,
        lambda,
        active_constraints,
        status: sol.status,
    })
}

/// Candidate trade-offs scanned by cross-validation.
pub const LAMBDA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

fn cross_validate(
    template: &SplineSurface,
    full: &Design,
    cfg: &FitConfig,
) -> Result<f64, SmootherError> {
    const FOLDS: usize = 5;
    let m = full.iob.len();
    if m < FOLDS {
        log::debug!("{m} IOB measurements: too few for cross-validation, using lambda = 1");
        return Ok(1.0);
    }
    let mut best = (f64::INFINITY, LAMBDA_GRID[0]);
    for &lambda in &LAMBDA_GRID {
        let mut score = 0.0;
        for fold in 0..FOLDS {
            let keep = |k: usize| k % FOLDS != fold;
            let train = Design {
                phi: full.phi.clone(),
                y: full.y.clone(),
                psi: (0..m).filter(|&k| keep(k)).map(|k| full.psi[k].clone()).collect(),
                iob: (0..m).filter(|&k| keep(k)).map(|k| full.iob[k]).collect(),
                weight: (0..m).filter(|&k| keep(k)).map(|k| full.weight[k]).collect(),
            };
            let fit = solve_fit(template, &train, lambda, cfg)?;
            score += (0..m)
                .filter(|&k| !keep(k))
                .map(|k| full.weight[k] * (row_dot(&full.psi[k], fit.surface.coefficients()) - full.iob[k]).powi(2))
                .sum::<f64>();
        }
        if score < best.0 {
            best = (score, lambda);
        }
    }
    Ok(best.1)
}

/// Fits one surface. The reported residual terms are recomputed from the
/// fitted coefficients.
pub fn fit_surface(
    samples: &[(Vec<f64>, f64)],
    iob: &[IobMeasurement],
    cfg: &FitConfig,
) -> Result<FitReport, SmootherError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SmootherError::EmptySamples);
    }
    let template = cfg.template()?;
    if samples.len() < template.coefficient_count() {
        log::warn!(
            "{} samples for {} coefficients: the fit is rank deficient",
            samples.len(),
            template.coefficient_count()
        );
    }
    let design = design(&template, samples, iob, &cfg.domain)?;
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => cross_validate(&template, &design, cfg)?,
    };
    solve_fit(&template, &design, lambda, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
            .collect()
    }

    #[test]
    fn constant_data_gives_constant_surface() {
        let samples: Vec<_> = grid_1d(0.0, 1.0, 9).into_iter().map(|x| (x, 3.5)).collect();
        let cfg = FitConfig::new(vec![(0.0, 1.0)], 5, Some(0.0));
        let fit = fit_surface(&samples, &[], &cfg).unwrap();
        for c in fit.surface.coefficients() {
            assert!((c - 3.5).abs() < 1e-7, "{:?} {:?}", fit.surface.coefficients(), fit.status);
        }
        assert!(fit.rss < 1e-12);
        assert_eq!(fit.iob_penalty, 0.0);
        assert!(model_iob(&fit.surface, &[0.3], 0).unwrap().abs() < 1e-6);
    }

    #[test]
    fn square_design_interpolates() {
        // 4 basis functions, 4 distinct sample points
        let xs = [0.0, 0.3, 0.7, 1.0];
        let ys = [1.0, -2.0, 0.5, 4.0];
        let samples: Vec<_> = xs.iter().zip(ys).map(|(x, y)| (vec![*x], y)).collect();
        let cfg = FitConfig::new(vec![(0.0, 1.0)], 4, Some(0.0)).unconstrained();
        let fit = fit_surface(&samples, &[], &cfg).unwrap();
        assert!(fit.rss < 1e-8);
        for (x, y) in xs.iter().zip(ys) {
            assert!((fit.surface.surface_eval(&[*x]).unwrap() - y).abs() < 1e-6);
        }
    }

    #[test]
    fn constraint_row_counts() {
        let cfg = FitConfig::new(vec![(0.0, 1.0), (0.0, 2.0)], 4, Some(0.0));
        let samples = vec![(vec![0.5, 0.5], 1.0)];
        let qp = assemble_fit(&samples, &[], &cfg).unwrap();
        // per lever: 3·4 monotone rows and 2·4 concave rows
        assert_eq!(qp.g.nrows(), 2 * (12 + 8));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = FitConfig::new(vec![(0.0, 1.0)], 2, Some(0.0));
        let samples = vec![(vec![0.5], 1.0)];
        assert!(matches!(fit_surface(&samples, &[], &cfg), Err(SmootherError::Config(_))));
        cfg.basis_counts = vec![4];
        cfg.lambda = Some(-1.0);
        assert!(matches!(fit_surface(&samples, &[], &cfg), Err(SmootherError::Config(_))));
        cfg.lambda = Some(0.0);
        assert!(matches!(fit_surface(&[], &[], &cfg), Err(SmootherError::EmptySamples)));
        assert!(matches!(
            fit_surface(&[(vec![2.0], 1.0)], &[], &cfg),
            Err(SmootherError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn padding() {
        assert_eq!(padded_domain(&[(10.0, 20.0)], 0.05), vec![(9.5, 20.5)]);
        assert_eq!(padded_domain(&[(3.0, 3.0)], 0.05), vec![(2.0, 4.0)]);
    }
}
