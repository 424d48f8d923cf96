//! Dense convex quadratic programming by a primal-dual interior-point
//! method (Mehrotra predictor-corrector).
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀP x + qᵀx
//! subject to  G x ≤ h
//!             A x = b
//! ```
//!
//! with `P` symmetric positive semidefinite. Iterates start infeasible;
//! slacks `s = h - Gx` and inequality multipliers `z` are kept strictly
//! positive by a fraction-to-boundary rule. Each Newton system is reduced to
//! `(P + Gᵀ diag(z/s) G) dx + Aᵀ dy = r` and solved by Cholesky, with a
//! Schur complement for the equality block. If the Cholesky factorization
//! fails the matrix is shifted by a small multiple of the identity.
//!
//! Step lengths are additionally backtracked so that the merit
//! `‖r_primal‖∞ + ‖r_eq‖∞ + ‖r_dual‖∞ + μ` decreases monotonically.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("inconsistent QP dimensions: {0}")]
    Dimension(String),
    #[error("quadratic term is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("non-finite QP data")]
    NonFinite,
    #[error("KKT system could not be factorized")]
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained `½ xᵀPx + qᵀx`.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g = g;
        self.h = h;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    /// Adds `lower ≤ x ≤ upper` as inequality rows; infinite bounds are
    /// skipped.
    pub fn with_bounds(mut self, lower: &[f64], upper: &[f64]) -> Self {
        let n = self.q.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for j in 0..n {
            if upper[j].is_finite() {
                rows.push((j, 1.0, upper[j]));
            }
            if lower[j].is_finite() {
                rows.push((j, -1.0, -lower[j]));
            }
        }
        let m0 = self.g.nrows();
        let mut g = DMatrix::zeros(m0 + rows.len(), n);
        let mut h = DVector::zeros(m0 + rows.len());
        g.rows_mut(0, m0).copy_from(&self.g);
        h.rows_mut(0, m0).copy_from(&self.h);
        for (k, (j, sign, bound)) in rows.into_iter().enumerate() {
            g[(m0 + k, j)] = sign;
            h[m0 + k] = bound;
        }
        self.g = g;
        self.h = h;
        self
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, q has {n} entries",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.g.ncols() != n || self.g.nrows() != self.h.len() {
            return Err(QpError::Dimension(format!(
                "G is {}x{}, h has {} entries",
                self.g.nrows(),
                self.g.ncols(),
                self.h.len()
            )));
        }
        if self.a.ncols() != n || self.a.nrows() != self.b.len() {
            return Err(QpError::Dimension(format!(
                "A is {}x{}, b has {} entries",
                self.a.nrows(),
                self.a.ncols(),
                self.b.len()
            )));
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !(finite(self.p.as_slice())
            && finite(self.q.as_slice())
            && finite(self.g.as_slice())
            && finite(self.h.as_slice())
            && finite(self.a.as_slice())
            && finite(self.b.as_slice()))
        {
            return Err(QpError::NonFinite);
        }
        let scale = self.p.amax().max(1.0);
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Re-solve on the identified active set after the interior-point phase
    /// and keep the result if it lowers the KKT residuals.
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// `(primal infeasibility, dual infeasibility, complementarity gap)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.primal <= tol && self.dual <= tol && self.gap <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    pub merit: f64,
    pub mu: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Inequality multipliers, nonnegative.
    pub z: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub residuals: KktResiduals,
    pub iterations: usize,
    /// True if the Newton matrix needed a diagonal shift.
    pub regularized: bool,
    pub trace: Vec<IterationTrace>,
}

/// KKT residuals at a candidate point, with slacks taken as `h - Gx`.
///
/// * primal: largest violation of `Gx ≤ h` or `Ax = b`
/// * dual: `‖Px + q + Gᵀz + Aᵀy‖∞`, plus any negativity of `z`
/// * gap: `Σ |z_i (h_i - G_i x)|`
pub fn kkt_residuals(
    p: &QpProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> KktResiduals {
    let slack = &p.h - &p.g * x;
    let ineq = slack.iter().fold(0.0f64, |m, &s| m.max(-s));
    let eq = (&p.a * x - &p.b).amax();
    let stationarity = &p.p * x + &p.q + p.g.tr_mul(z) + p.a.tr_mul(y);
    let neg_z = z.iter().fold(0.0f64, |m, &v| m.max(-v));
    let gap = z.iter().zip(slack.iter()).map(|(z, s)| (z * s).abs()).sum();
    KktResiduals {
        primal: ineq.max(eq),
        dual: stationarity.amax().max(neg_z),
        gap,
    }
}

struct Sparse {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    fn from_dense(g: &DMatrix<f64>) -> Self {
        let rows = (0..g.nrows())
            .map(|i| {
                (0..g.ncols())
                    .filter_map(|j| {
                        let v = g[(i, j)];
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Self { rows }
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()),
        )
    }

    fn tr_mul(&self, v: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (r, &vi) in self.rows.iter().zip(v.iter()) {
            if vi != 0.0 {
                for &(j, g) in r {
                    out[j] += g * vi;
                }
            }
        }
        out
    }

    /// Adds `Gᵀ diag(w) G` into `m`.
    fn add_weighted_gram(&self, w: &DVector<f64>, m: &mut DMatrix<f64>) {
        for (r, &wi) in self.rows.iter().zip(w.iter()) {
            for &(j, gj) in r {
                let wj = wi * gj;
                for &(k, gk) in r {
                    m[(j, k)] += wj * gk;
                }
            }
        }
    }
}

/// Factorized reduced Newton matrix with optional equality Schur block.
struct NewtonSystem {
    chol: Cholesky<f64, Dyn>,
    a: DMatrix<f64>,
    schur: Option<nalgebra::LU<f64, Dyn, Dyn>>,
}

impl NewtonSystem {
    fn factor(h: DMatrix<f64>, a: &DMatrix<f64>, regularized: &mut bool) -> Result<Self, QpError> {
        let n = h.nrows();
        let mut shift = 0.0;
        let base = (h.trace().abs() / n.max(1) as f64).max(1e-12);
        let mut attempt = 0;
        let chol = loop {
            let mut m = h.clone();
            if shift > 0.0 {
                for i in 0..n {
                    m[(i, i)] += shift;
                }
                *regularized = true;
            }
            if let Some(c) = Cholesky::new(m) {
                break c;
            }
            attempt += 1;
            if attempt > 12 {
                return Err(QpError::Singular);
            }
            shift = if shift == 0.0 { 1e-9 * base } else { shift * 10.0 };
        };
        let schur = if a.nrows() > 0 {
            let hinv_at = chol.solve(&a.transpose());
            let s = a * hinv_at;
            Some(s.lu())
        } else {
            None
        };
        Ok(Self {
            chol,
            a: a.clone(),
            schur,
        })
    }

    /// Solves `H dx + Aᵀdy = rx`, `A dx = re`.
    fn solve(&self, rx: &DVector<f64>, re: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        match &self.schur {
            None => Ok((self.chol.solve(rx), DVector::zeros(0))),
            Some(lu) => {
                let hinv_rx = self.chol.solve(rx);
                let rhs = &self.a * &hinv_rx - re;
                let dy = lu.solve(&rhs).ok_or(QpError::Singular)?;
                let dx = self.chol.solve(&(rx - self.a.tr_mul(&dy)));
                Ok((dx, dy))
            }
        }
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(1.0f64 / 0.0, f64::min)
}

/// Solves a convex QP. Returns `Err` only for malformed input or an
/// unfactorizable system; non-convergence is reported through the status.
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let mut sol = interior_point(problem, settings)?;
    if settings.polish && problem.g.nrows() > 0 {
        if let Some(better) = polish(problem, &sol, settings) {
            sol = better;
        }
    }
    if sol.status == QpStatus::MaxIter && problem.g.nrows() > 0 && phase_one_infeasible(problem, settings)? {
        return Ok(QpSolution {
            status: QpStatus::Infeasible,
            ..sol
        });
    }
    Ok(sol)
}

fn equality_only(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let n = problem.n();
    let me = problem.a.nrows();
    let mut kkt = DMatrix::zeros(n + me, n + me);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.p);
    kkt.view_mut((n, 0), (me, n)).copy_from(&problem.a);
    kkt.view_mut((0, n), (n, me)).copy_from(&problem.a.transpose());
    let mut rhs = DVector::zeros(n + me);
    rhs.rows_mut(0, n).copy_from(&(-&problem.q));
    rhs.rows_mut(n, me).copy_from(&problem.b);
    let mut regularized = false;
    let sol = match kkt.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => {
            regularized = true;
            let shift = 1e-9 * (problem.p.trace().abs() / n.max(1) as f64).max(1e-12);
            for i in 0..n {
                kkt[(i, i)] += shift;
            }
            for i in n..n + me {
                kkt[(i, i)] -= shift;
            }
            kkt.lu().solve(&rhs).ok_or(QpError::Singular)?
        }
    };
    let x = sol.rows(0, n).into_owned();
    let y = sol.rows(n, me).into_owned();
    let z = DVector::zeros(0);
    let residuals = kkt_residuals(problem, &x, &z, &y);
    let status = if residuals.within(settings.tol) {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIter
    };
    Ok(QpSolution {
        x,
        z,
        y,
        status,
        residuals,
        iterations: 1,
        regularized,
        trace: Vec::new(),
    })
}

fn interior_point(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let n = problem.n();
    let m = problem.g.nrows();
    if m == 0 {
        return equality_only(problem, settings);
    }
    let g = Sparse::from_dense(&problem.g);
    let (p, q, h, a, b) = (&problem.p, &problem.q, &problem.h, &problem.a, &problem.b);
    let mut regularized = false;

    // Initial point: least-squares fit to the constraints with unit weights.
    let (mut x, mut y) = {
        let mut hm = p.clone();
        g.add_weighted_gram(&DVector::from_element(m, 1.0), &mut hm);
        let sys = NewtonSystem::factor(hm, a, &mut regularized)?;
        let rx = -q + g.tr_mul(h, n);
        sys.solve(&rx, b)?
    };
    let mut s: DVector<f64> = (h - g.mul(&x)).map(|v| v.max(1.0));
    let mut z = DVector::from_element(m, 1.0);

    let residual_vectors = |x: &DVector<f64>, s: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>| {
        let rd = p * x + q + g.tr_mul(z, n) + a.tr_mul(y);
        let rp = g.mul(x) + s - h;
        let re = a * x - b;
        (rd, rp, re)
    };
    let merit = |rd: &DVector<f64>, rp: &DVector<f64>, re: &DVector<f64>, s: &DVector<f64>, z: &DVector<f64>| {
        let re_norm = if re.is_empty() { 0.0 } else { re.amax() };
        rp.amax() + re_norm + rd.amax() + s.dot(z) / m as f64
    };

    let mut trace = Vec::new();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;

    for iter in 0..settings.max_iter {
        let zc = z.map(|v: f64| v.max(0.0));
        let res = kkt_residuals(problem, &x, &zc, &y);
        if best.as_ref().is_none_or(|(r, ..)| res.max() < *r) {
            best = Some((res.max(), x.clone(), zc.clone(), y.clone()));
        }
        if res.within(settings.tol) {
            return Ok(QpSolution {
                x,
                z: zc,
                y,
                status: QpStatus::Optimal,
                residuals: res,
                iterations: iter,
                regularized,
                trace,
            });
        }

        let (rd, rp, re) = residual_vectors(&x, &s, &z, &y);
        let mu = s.dot(&z) / m as f64;
        let current_merit = merit(&rd, &rp, &re, &s, &z);
        let w = z.component_div(&s);
        let mut hm = p.clone();
        g.add_weighted_gram(&w, &mut hm);
        let sys = NewtonSystem::factor(hm, a, &mut regularized)?;

        let direction = |rc: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
            let rc_over_s = rc.component_div(&s);
            let inner = w.component_mul(&rp) - &rc_over_s;
            let rx = -&rd - g.tr_mul(&inner, n);
            let (dx, dy) = sys.solve(&rx, &(-&re))?;
            let dz = w.component_mul(&(g.mul(&dx) + &rp)) - rc_over_s;
            let ds = -(rc + s.component_mul(&dz)).component_div(&z);
            Ok((dx, ds, dz, dy))
        };

        // predictor
        let rc_aff = s.component_mul(&z);
        let (_, ds_a, dz_a, _) = direction(&rc_aff)?;
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a)).min(1.0);
        let mu_aff = (&s + alpha_aff * &ds_a).dot(&(&z + alpha_aff * &dz_a)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // corrector, with a plain centering direction as fallback when the
        // second-order term prevents merit decrease
        let mut accepted = None;
        for use_second_order in [true, false] {
            let mut rc = &rc_aff - DVector::from_element(m, sigma * mu);
            if use_second_order {
                rc += ds_a.component_mul(&dz_a);
            }
            let (dx, ds, dz, dy) = direction(&rc)?;
            let alpha_max = max_step(&s, &ds).min(max_step(&z, &dz));
            let mut alpha = (0.995 * alpha_max).min(1.0);
            for _ in 0..40 {
                let xn = &x + alpha * &dx;
                let sn = &s + alpha * &ds;
                let zn = &z + alpha * &dz;
                let yn = &y + alpha * &dy;
                let (rdn, rpn, ren) = residual_vectors(&xn, &sn, &zn, &yn);
                let mn = merit(&rdn, &rpn, &ren, &sn, &zn);
                if mn < current_merit {
                    trace.push(IterationTrace {
                        merit: mn,
                        mu: sn.dot(&zn) / m as f64,
                        step: alpha,
                    });
                    accepted = Some((xn, sn, zn, yn));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        match accepted {
            Some((xn, sn, zn, yn)) => {
                x = xn;
                s = sn;
                z = zn;
                y = yn;
            }
            None => {
                log::debug!("qp: no merit-decreasing step at iteration {iter}");
                break;
            }
        }
    }

    let (_, x, z, y) = best.expect("at least one iterate was recorded");
    let residuals = kkt_residuals(problem, &x, &z, &y);
    let status = if residuals.within(settings.tol) {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIter
    };
    let iterations = trace.len();
    Ok(QpSolution {
        x,
        z,
        y,
        status,
        residuals,
        iterations,
        regularized,
        trace,
    })
}

/// Active-set refinement. Rows whose multiplier exceeds their slack are
/// treated as equalities; the resulting KKT system is solved through a
/// regularized reduced matrix followed by iterative refinement against the
/// exact system. Rows that come back with negative multipliers are dropped
/// and the solve repeated.
fn polish(problem: &QpProblem, sol: &QpSolution, settings: &QpSettings) -> Option<QpSolution> {
    let slack = &problem.h - &problem.g * &sol.x;
    let mut active: Vec<usize> = (0..problem.g.nrows()).filter(|&i| sol.z[i] > slack[i]).collect();
    for _ in 0..5 {
        let (x, za, y) = solve_active(problem, &active)?;
        let negative: Vec<bool> = za.iter().map(|&z| z < 0.0).collect();
        if negative.iter().any(|&n| n) && za.iter().zip(&negative).any(|(z, n)| *n && -z > settings.tol) {
            active = active
                .iter()
                .zip(&negative)
                .filter(|(_, n)| !**n)
                .map(|(i, _)| *i)
                .collect();
            continue;
        }
        let mut z = DVector::zeros(problem.g.nrows());
        for (k, &i) in active.iter().enumerate() {
            z[i] = za[k].max(0.0);
        }
        let residuals = kkt_residuals(problem, &x, &z, &y);
        return (residuals.max() < sol.residuals.max() && residuals.within(settings.tol)).then(|| QpSolution {
            x,
            z,
            y,
            status: QpStatus::Optimal,
            residuals,
            iterations: sol.iterations,
            regularized: sol.regularized,
            trace: sol.trace.clone(),
        });
    }
    None
}

fn solve_active(problem: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = problem.n();
    let na = active.len();
    let me = problem.a.nrows();
    let ga = DMatrix::from_fn(na, n, |r, c| problem.g[(active[r], c)]);
    let ha = DVector::from_fn(na, |r, _| problem.h[active[r]]);
    let a = &problem.a;

    let scale = problem.p.amax().max(ga.amax()).max(a.amax()).max(1e-12);
    let delta = 1e-7 * scale;
    let eps = 1e-12 * scale;
    let mut reduced = problem.p.clone();
    for i in 0..n {
        reduced[(i, i)] += eps;
    }
    reduced += ga.tr_mul(&ga) / delta + a.tr_mul(a) / delta;
    let chol = Cholesky::new(reduced)?;

    let mut x = DVector::zeros(n);
    let mut za = DVector::zeros(na);
    let mut y = DVector::zeros(me);
    for _ in 0..20 {
        let r1 = -&problem.q - &problem.p * &x - ga.tr_mul(&za) - a.tr_mul(&y);
        let r2 = &ga * &x - &ha;
        let r3 = a * &x - &problem.b;
        let size = r1
            .amax()
            .max(if na > 0 { r2.amax() } else { 0.0 })
            .max(if me > 0 { r3.amax() } else { 0.0 });
        if size < 1e-15 * (1.0 + scale) {
            break;
        }
        // regularized step: (P + εI) dx + Gᵀdz + Aᵀdy = r1, G dx − δ dz = −r2
        let dx = chol.solve(&(&r1 - ga.tr_mul(&r2) / delta - a.tr_mul(&r3) / delta));
        let dz = (&ga * &dx + &r2) / delta;
        let dy = (a * &dx + &r3) / delta;
        x += dx;
        za += dz;
        y += dy;
    }
    x.iter()
        .chain(za.iter())
        .chain(y.iter())
        .all(|v| v.is_finite())
        .then_some((x, za, y))
}

/// Phase-I feasibility check: minimize `t` subject to `Gx - t ≤ h`,
/// `t ≥ -1`, `Ax = b`. A strictly positive optimum certifies that no point
/// satisfies `Gx ≤ h`.
fn phase_one_infeasible(problem: &QpProblem, settings: &QpSettings) -> Result<bool, QpError> {
    let n = problem.n();
    let m = problem.g.nrows();
    let me = problem.a.nrows();
    let mut g = DMatrix::zeros(m + 1, n + 1);
    g.view_mut((0, 0), (m, n)).copy_from(&problem.g);
    for i in 0..m {
        g[(i, n)] = -1.0;
    }
    g[(m, n)] = -1.0;
    let mut h = DVector::zeros(m + 1);
    h.rows_mut(0, m).copy_from(&problem.h);
    h[m] = 1.0;
    let mut a = DMatrix::zeros(me, n + 1);
    a.view_mut((0, 0), (me, n)).copy_from(&problem.a);
    let mut q = DVector::zeros(n + 1);
    q[n] = 1.0;
    // a vanishing quadratic term keeps the free directions bounded
    let p = DMatrix::identity(n + 1, n + 1) * 1e-10;
    let phase = QpProblem::new(p, q)
        .with_inequalities(g, h)
        .with_equalities(a, problem.b.clone());
    let sol = interior_point(&phase, &QpSettings {
        max_iter: settings.max_iter.max(100),
        ..*settings
    })?;
    let scale = 1.0 + problem.h.amax();
    Ok(sol.x[n] > 1e-6 * scale)
}
