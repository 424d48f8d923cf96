//! Budget allocation by consensus ADMM.
//!
//! The global problem is
//!
//! ```text
//! maximize   Σ_c f_c(b_c) + pen(b)
//! subject to h ≤ b ≤ g,  Σ b = B
//! ```
//!
//! with `f_c` a per-city response surface and `pen` the Hellinger-type
//! distance to a reference allocation. Each outer iteration solves one
//! proximal subproblem per city (in parallel), projects onto the budget
//! hyperplane in closed form, and updates scaled duals.
//!
//! The penalty couples cities through the norms `‖b‖`; those are frozen at
//! the previous consensus iterate so the per-city subproblems stay
//! independent. Square roots are smoothed as `√(|b| + ε) − √ε` to keep
//! derivatives finite at zero budget.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpProblem, QpSettings, QpStatus};
use crate::response::Response;
use crate::scenario::{Allocation, Scenario};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("infeasible allocation problem: {0}")]
    Infeasible(String),
    #[error("expected {expected} surfaces, got {got}")]
    SurfaceCount { expected: usize, got: usize },
    #[error("surface for city {city} has {got} levers, expected {expected}")]
    SurfaceDim {
        city: String,
        expected: usize,
        got: usize,
    },
    #[error("penalty undefined: {0} has zero norm")]
    ZeroNorm(&'static str),
    #[error("allocation shapes differ")]
    Shape,
    #[error("subproblem for city {city} failed: {source}")]
    Subproblem { city: String, source: QpError },
}

/// Weights of the distance-to-reference penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyParams {
    pub reference: Allocation,
    pub city_weights: Vec<f64>,
    pub lever_weights: Vec<f64>,
}

impl PenaltyParams {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            reference: s.reference.clone(),
            city_weights: s.city_weights.clone(),
            lever_weights: s.lever_weights.clone(),
        }
    }

    fn is_active(&self) -> bool {
        self.city_weights.iter().any(|&a| a != 0.0) && self.lever_weights.iter().any(|&k| k != 0.0)
    }
}

fn prefactor(norm: f64, ref_norm: f64) -> f64 {
    -(norm / ref_norm).max(ref_norm / norm).powf(-1.0 / 3.0)
}

/// Penalty for moving away from the reference allocation; always `≤ 0`.
///
/// `−(max(‖b‖/‖b₀‖, ‖b₀‖/‖b‖))^{−1/3} · Σ_c α_c Σ_l κ_l (√(|b_cl|/‖b‖) − √(|b₀_cl|/‖b₀‖))²`
/// with `‖·‖` the sum of absolute values.
pub fn hellinger_penalty(b: &Allocation, pp: &PenaltyParams) -> Result<f64, OptimizeError> {
    if !b.same_shape(&pp.reference) {
        return Err(OptimizeError::Shape);
    }
    let nb = b.l1_norm();
    let n0 = pp.reference.l1_norm();
    if nb <= 0.0 {
        return Err(OptimizeError::ZeroNorm("allocation"));
    }
    if n0 <= 0.0 {
        return Err(OptimizeError::ZeroNorm("reference allocation"));
    }
    let mut distance = 0.0;
    for c in 0..b.city_count() {
        let mut city = 0.0;
        for l in 0..b.lever_count() {
            let d = (b.get(c, l).abs() / nb).sqrt() - (pp.reference.get(c, l).abs() / n0).sqrt();
            city += pp.lever_weights[l] * d * d;
        }
        distance += pp.city_weights[c] * city;
    }
    Ok(prefactor(nb, n0) * distance)
}

/// One city's share of the smoothed penalty with frozen norms, written as
/// a cost to minimize: `Σ_l w_l (u(b_l)/√N − t_l)²` with
/// `u(b) = √(|b| + ε) − √ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct CityPenalty {
    /// `−prefactor · α_c · κ_l`, nonnegative.
    pub weights: Vec<f64>,
    /// `u(b₀_l) / √‖b₀‖`.
    pub targets: Vec<f64>,
    /// Frozen `‖b‖`.
    pub norm: f64,
    pub eps: f64,
}

impl CityPenalty {
    fn u(&self, b: f64) -> f64 {
        (b.abs() + self.eps).sqrt() - self.eps.sqrt()
    }

    fn value(&self, b: &[f64]) -> f64 {
        let rn = self.norm.sqrt();
        b.iter()
            .zip(&self.weights)
            .zip(&self.targets)
            .map(|((&b, w), t)| w * (self.u(b) / rn - t).powi(2))
            .sum()
    }

    /// Gradient and (diagonal) Hessian.
    fn derivatives(&self, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rn = self.norm.sqrt();
        let mut g = Vec::with_capacity(b.len());
        let mut h = Vec::with_capacity(b.len());
        for ((&b, w), t) in b.iter().zip(&self.weights).zip(&self.targets) {
            let root = (b.abs() + self.eps).sqrt();
            let du = b.signum() * 0.5 / root;
            let d2u = -0.25 / (root * root * root);
            let r = self.u(b) / rn - t;
            g.push(2.0 * w * r * du / rn);
            h.push(2.0 * w * ((du / rn).powi(2) + r * d2u / rn));
        }
        (g, h)
    }
}

/// Data of one city's proximal subproblem
/// `min −f(b) + pen_c(b) + ρ/2 ‖b − target‖²` over `lower ≤ b ≤ upper`.
#[derive(Debug, Clone, Copy)]
pub struct XStepInput<'a> {
    /// `z_c − y_c`.
    pub target: &'a [f64],
    pub rho: f64,
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub penalty: Option<&'a CityPenalty>,
    /// Warm start; defaults to the target clipped into the box.
    pub start: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XStepResult {
    pub b: Vec<f64>,
    pub iterations: usize,
    /// The last step was shorter than the stopping threshold.
    pub converged: bool,
    /// The model Hessian needed its eigenvalues lifted.
    pub regularized: bool,
}

const XSTEP_MAX_ITER: usize = 30;
const XSTEP_STEP_TOL: f64 = 1e-8;

/// Surface viewed in scaled units: `b = budget_scale · b̃`, values divided
/// by `value_scale`.
struct Scaled<'a, R> {
    surface: &'a R,
    budget_scale: f64,
    value_scale: f64,
}

impl<R: Response> Scaled<'_, R> {
    fn point(&self, b: &[f64]) -> Vec<f64> {
        b.iter().map(|v| v * self.budget_scale).collect()
    }

    fn value(&self, b: &[f64]) -> f64 {
        self.surface.value(&self.point(b)) / self.value_scale
    }

    fn gradient(&self, b: &[f64]) -> DVector<f64> {
        self.surface.gradient(&self.point(b)) * (self.budget_scale / self.value_scale)
    }

    fn hessian(&self, b: &[f64]) -> DMatrix<f64> {
        self.surface.hessian(&self.point(b)) * (self.budget_scale * self.budget_scale / self.value_scale)
    }
}

/// Proximal subproblem by sequential quadratic approximation: second-order
/// Taylor model with eigenvalues floored at `ρ/10`, box-constrained QP for
/// the step, backtracking on the true local objective.
pub fn x_step<R: Response>(surface: &R, input: &XStepInput<'_>) -> Result<XStepResult, QpError> {
    x_step_scaled(
        &Scaled {
            surface,
            budget_scale: 1.0,
            value_scale: 1.0,
        },
        input,
    )
}

fn x_step_scaled<R: Response>(surface: &Scaled<'_, R>, input: &XStepInput<'_>) -> Result<XStepResult, QpError> {
    let n = input.target.len();
    let rho = input.rho;
    let local = |b: &[f64]| {
        let prox: f64 = b.iter().zip(input.target).map(|(b, t)| (b - t) * (b - t)).sum();
        -surface.value(b) + input.penalty.map_or(0.0, |p| p.value(b)) + 0.5 * rho * prox
    };
    let free: Vec<usize> = (0..n).filter(|&l| input.upper[l] > input.lower[l]).collect();
    let mut b: Vec<f64> = match input.start {
        Some(s) => s.to_vec(),
        None => input.target.to_vec(),
    };
    for l in 0..n {
        b[l] = b[l].clamp(input.lower[l], input.upper[l]);
    }
    let mut result = XStepResult {
        b: Vec::new(),
        iterations: 0,
        converged: free.is_empty(),
        regularized: false,
    };
    if free.is_empty() {
        result.b = b;
        return Ok(result);
    }
    let mut fb = local(&b);
    let nf = free.len();
    for iter in 0..XSTEP_MAX_ITER {
        result.iterations = iter + 1;
        let mut grad = -surface.gradient(&b);
        let mut hess = -surface.hessian(&b);
        if let Some(p) = input.penalty {
            let (pg, ph) = p.derivatives(&b);
            for l in 0..n {
                grad[l] += pg[l];
                hess[(l, l)] += ph[l];
            }
        }
        for l in 0..n {
            grad[l] += rho * (b[l] - input.target[l]);
            hess[(l, l)] += rho;
        }
        let g = DVector::from_fn(nf, |i, _| grad[free[i]]);
        let h = DMatrix::from_fn(nf, nf, |i, j| 0.5 * (hess[(free[i], free[j])] + hess[(free[j], free[i])]));
        let eig = SymmetricEigen::new(h);
        let floor = rho / 10.0;
        let h = if eig.eigenvalues.iter().any(|&v| v < floor) {
            result.regularized = true;
            let lifted = eig.eigenvalues.map(|v| v.max(floor));
            &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose()
        } else {
            &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues) * eig.eigenvectors.transpose()
        };
        let h = 0.5 * (&h + h.transpose());
        let lo: Vec<f64> = free.iter().map(|&l| input.lower[l] - b[l]).collect();
        let hi: Vec<f64> = free.iter().map(|&l| input.upper[l] - b[l]).collect();
        let qp = QpProblem::new(h, g.clone()).with_bounds(&lo, &hi);
        let sol = solve_qp(&qp, &QpSettings::default())?;
        if sol.status == QpStatus::Infeasible {
            return Err(QpError::Singular);
        }
        let d: Vec<f64> = (0..nf).map(|i| sol.x[i].clamp(lo[i], hi[i])).collect();
        let slope: f64 = d.iter().zip(g.iter()).map(|(d, g)| d * g).sum();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = b.clone();
            for (i, &l) in free.iter().enumerate() {
                trial[l] = (b[l] + t * d[i]).clamp(input.lower[l], input.upper[l]);
            }
            let ft = local(&trial);
            if ft <= fb + 1e-4 * t * slope.min(0.0) {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let step_norm = t * d.iter().map(|v| v * v).sum::<f64>().sqrt();
        match accepted {
            Some((trial, ft)) => {
                b = trial;
                fb = ft;
            }
            None => {
                // no descent along the model step: the model already sits
                // at a stationary point to working precision
                result.converged = true;
                break;
            }
        }
        if step_norm < XSTEP_STEP_TOL {
            result.converged = true;
            break;
        }
    }
    result.b = b;
    Ok(result)
}

/// Closed-form projection of `u` onto `{Σ z = total}`:
/// `z = u + ((total − Σu)/n) e`.
pub fn z_step(u: &[f64], total: f64) -> Vec<f64> {
    let shift = (total - neumaier_sum(u)) / u.len() as f64;
    u.iter().map(|v| v + shift).collect()
}

/// Compensated summation.
pub fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Doubles `rho` after a regularized x-step or when the primal residual
/// exceeds ten times the dual residual; never decreases, capped at
/// `1e6·rho0`.
pub fn adapt_rho(rho: f64, rho0: f64, regularized: bool, primal: f64, dual: f64) -> f64 {
    if regularized || primal > 10.0 * dual {
        (2.0 * rho).min(1e6 * rho0)
    } else {
        rho
    }
}

/// Euclidean projection onto `{lower ≤ x ≤ upper, Σx = total}` by
/// bisection on the hyperplane shift.
pub fn project_to_budget(v: &[f64], lower: &[f64], upper: &[f64], total: f64) -> Vec<f64> {
    let at = |t: f64| -> Vec<f64> {
        v.iter()
            .zip(lower.iter().zip(upper))
            .map(|(x, (l, u))| (x + t).clamp(*l, *u))
            .collect()
    };
    let span = v
        .iter()
        .chain(lower)
        .chain(upper)
        .fold(total.abs(), |m, x| m.max(x.abs()))
        .max(1.0);
    let (mut lo, mut hi) = (-4.0 * span, 4.0 * span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if neumaier_sum(&at(mid)) < total {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * span {
            break;
        }
    }
    let mut x = at(0.5 * (lo + hi));
    // spread the last rounding residue over coordinates with room
    let residue = total - neumaier_sum(&x);
    if residue != 0.0 {
        if let Some(i) = (0..x.len()).find(|&i| {
            let moved = x[i] + residue;
            moved >= lower[i] && moved <= upper[i]
        }) {
            x[i] += residue;
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho0: f64,
    pub max_outer: usize,
    /// Absolute residual tolerance in scaled budget units.
    pub eps_abs: f64,
    /// Relative residual tolerance.
    pub eps_rel: f64,
    /// Relative objective change that counts as stalled.
    pub objective_tol: f64,
    /// Allowed relative violation of the total budget.
    pub budget_tol: f64,
    /// Run x-steps on the rayon pool.
    pub parallel: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            max_outer: 1000,
            eps_abs: 1e-6,
            eps_rel: 1e-5,
            objective_tol: 1e-6,
            budget_tol: 1e-3,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Every stopping criterion held.
    Converged,
    /// The feasible set is a single point.
    Forced,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub primal: f64,
    pub dual: f64,
    /// Objective plus penalty at the x-iterate projected onto the feasible
    /// set.
    pub objective: f64,
    pub rho: f64,
    /// `Σ z − B` right after the z-step, in budget units.
    pub budget_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub allocation: Allocation,
    /// `Σ_c f_c` at the final allocation.
    pub objective: f64,
    /// Exact penalty at the final allocation (0 when the penalty is off).
    pub penalty: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub trace: Vec<TraceRow>,
}

impl OptimizeReport {
    pub fn total(&self) -> f64 {
        self.objective + self.penalty
    }
}

fn check_inputs<R: Response>(scenario: &Scenario, surfaces: &[R]) -> Result<(), OptimizeError> {
    if surfaces.len() != scenario.city_count() {
        return Err(OptimizeError::SurfaceCount {
            expected: scenario.city_count(),
            got: surfaces.len(),
        });
    }
    for (c, s) in surfaces.iter().enumerate() {
        if s.dim() != scenario.lever_count() {
            return Err(OptimizeError::SurfaceDim {
                city: scenario.cities[c].clone(),
                expected: scenario.lever_count(),
                got: s.dim(),
            });
        }
    }
    let lo = neumaier_sum(scenario.floors.values());
    let hi = neumaier_sum(scenario.ceilings.values());
    let b = scenario.total_budget;
    let slack = 1e-12 * b.abs().max(1.0);
    if lo > b + slack || hi < b - slack {
        return Err(OptimizeError::Infeasible(format!(
            "total budget {b} outside [{lo}, {hi}] spanned by floors and ceilings"
        )));
    }
    Ok(())
}

fn evaluate<R: Response>(
    scenario: &Scenario,
    surfaces: &[R],
    pp: Option<&PenaltyParams>,
    b: &Allocation,
) -> (f64, f64) {
    let objective: f64 = (0..scenario.city_count())
        .map(|c| surfaces[c].value(b.city(c)))
        .sum();
    let penalty = pp
        .map(|pp| hellinger_penalty(b, pp).unwrap_or(0.0))
        .unwrap_or(0.0);
    (objective, penalty)
}

/// Scale factors making budgets and curvature O(1): budgets by the mean
/// absolute reference cell, values by the mean absolute diagonal curvature
/// at the reference (falling back to slope, then level).
fn scales<R: Response>(scenario: &Scenario, surfaces: &[R], start: &Allocation) -> (f64, f64) {
    let cells = scenario.cell_count() as f64;
    let mut sb = scenario.reference.l1_norm() / cells;
    if !(sb > 0.0) {
        sb = scenario.total_budget.abs() / cells;
    }
    if !(sb > 0.0) {
        sb = 1.0;
    }
    let mut curv = 0.0;
    let mut slope = 0.0;
    let mut level = 0.0;
    for c in 0..scenario.city_count() {
        let x = start.city(c);
        let h = surfaces[c].hessian(x);
        let g = surfaces[c].gradient(x);
        for l in 0..scenario.lever_count() {
            curv += h[(l, l)].abs();
            slope += g[l].abs();
        }
        level += surfaces[c].value(x).abs();
    }
    let sf = if curv > 1e-300 {
        curv / cells * sb * sb
    } else if slope > 1e-300 {
        slope / cells * sb
    } else if level > 1e-300 {
        level / scenario.city_count() as f64
    } else {
        1.0
    };
    (sb, sf)
}

/// Splits the total budget with consensus ADMM.
pub fn run_admm<R: Response>(
    scenario: &Scenario,
    surfaces: &[R],
    cfg: &AdmmConfig,
) -> Result<OptimizeReport, OptimizeError> {
    check_inputs(scenario, surfaces)?;
    let pp = PenaltyParams::from_scenario(scenario);
    let pp = (pp.is_active() && pp.reference.l1_norm() > 0.0).then_some(pp);
    let nc = scenario.city_count();
    let nl = scenario.lever_count();
    let n = nc * nl;
    let lower = scenario.floors.values();
    let upper = scenario.ceilings.values();
    let total = scenario.total_budget;

    let start = project_to_budget(scenario.reference.values(), lower, upper, total);
    let start_alloc = Allocation::from_vec(nc, nl, start.clone());

    let free = (0..n).filter(|&i| upper[i] > lower[i]).count();
    if free <= 1 {
        let (objective, penalty) = evaluate(scenario, surfaces, pp.as_ref(), &start_alloc);
        return Ok(OptimizeReport {
            allocation: start_alloc,
            objective,
            penalty,
            iterations: 1,
            stop_reason: StopReason::Forced,
            trace: vec![TraceRow {
                iteration: 1,
                primal: 0.0,
                dual: 0.0,
                objective: objective + penalty,
                rho: cfg.rho0,
                budget_gap: neumaier_sum(&start) - total,
            }],
        });
    }

    let (sb, sf) = scales(scenario, surfaces, &start_alloc);
    let scaled: Vec<Scaled<'_, R>> = surfaces
        .iter()
        .map(|s| Scaled {
            surface: s,
            budget_scale: sb,
            value_scale: sf,
        })
        .collect();
    let lo_s: Vec<f64> = lower.iter().map(|v| v / sb).collect();
    let hi_s: Vec<f64> = upper.iter().map(|v| v / sb).collect();
    let total_s = total / sb;
    let eps_s = pp
        .as_ref()
        .map(|p| 1e-6 * p.reference.l1_norm() / n as f64 / sb)
        .unwrap_or(0.0);
    let ref_norm_s = pp.as_ref().map(|p| p.reference.l1_norm() / sb).unwrap_or(1.0);

    let mut b: Vec<f64> = start.iter().map(|v| v / sb).collect();
    let mut z = b.clone();
    let mut y = vec![0.0; n];
    let mut rho = cfg.rho0;
    let mut trace = Vec::new();
    let mut prev_objective: Option<f64> = None;
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations = 0;

    for k in 1..=cfg.max_outer {
        iterations = k;
        // frozen penalty pieces from the consensus iterate
        let city_penalties: Vec<Option<CityPenalty>> = match &pp {
            None => vec![None; nc],
            Some(p) => {
                let norm = z.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
                let pre = -prefactor(norm, ref_norm_s) / sf;
                let u0 = |v: f64| (v.abs() / sb + eps_s).sqrt() - eps_s.sqrt();
                (0..nc)
                    .map(|c| {
                        Some(CityPenalty {
                            weights: (0..nl).map(|l| pre * p.city_weights[c] * p.lever_weights[l]).collect(),
                            targets: (0..nl)
                                .map(|l| u0(p.reference.get(c, l)) / ref_norm_s.sqrt())
                                .collect(),
                            norm,
                            eps: eps_s,
                        })
                    })
                    .collect()
            }
        };

        let solve_city = |c: usize| -> Result<XStepResult, OptimizeError> {
            let r = c * nl..(c + 1) * nl;
            let target: Vec<f64> = r.clone().map(|i| z[i] - y[i]).collect();
            let input = XStepInput {
                target: &target,
                rho,
                lower: &lo_s[r.clone()],
                upper: &hi_s[r.clone()],
                penalty: city_penalties[c].as_ref(),
                start: Some(&b[r]),
            };
            x_step_scaled(&scaled[c], &input).map_err(|source| OptimizeError::Subproblem {
                city: scenario.cities[c].clone(),
                source,
            })
        };
        let results: Vec<XStepResult> = if cfg.parallel {
            (0..nc).into_par_iter().map(solve_city).collect::<Result<_, _>>()?
        } else {
            (0..nc).map(solve_city).collect::<Result<_, _>>()?
        };
        let all_converged = results.iter().all(|r| r.converged);
        let regularized = results.iter().any(|r| r.regularized);
        for (c, r) in results.into_iter().enumerate() {
            b[c * nl..(c + 1) * nl].copy_from_slice(&r.b);
        }

        let u: Vec<f64> = b.iter().zip(&y).map(|(b, y)| b + y).collect();
        let z_prev = std::mem::replace(&mut z, z_step(&u, total_s));
        let budget_gap = (neumaier_sum(&z) - total_s) * sb;
        for i in 0..n {
            y[i] += b[i] - z[i];
        }

        let primal = b.iter().zip(&z).map(|(b, z)| (b - z).powi(2)).sum::<f64>().sqrt();
        let dual = rho * z.iter().zip(&z_prev).map(|(a, p)| (a - p).powi(2)).sum::<f64>().sqrt();
        let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let root_n = (n as f64).sqrt();
        let eps_pri = root_n * cfg.eps_abs + cfg.eps_rel * norm2(&b).max(norm2(&z));
        let eps_dual = root_n * cfg.eps_abs + cfg.eps_rel * rho * norm2(&y);

        let current: Vec<f64> = b.iter().map(|v| v * sb).collect();
        // objective of the feasible point the run would return if stopped now
        let feasible = Allocation::from_vec(nc, nl, project_to_budget(&current, lower, upper, total));
        let (obj, pen) = evaluate(scenario, surfaces, pp.as_ref(), &feasible);
        let objective = obj + pen;
        trace.push(TraceRow {
            iteration: k,
            primal: primal * sb,
            dual: dual * sb,
            objective,
            rho,
            budget_gap,
        });

        let budget_ok = (neumaier_sum(&current) - total).abs() <= cfg.budget_tol * total.abs().max(f64::MIN_POSITIVE);
        let stalled = prev_objective.is_some_and(|p| (objective - p).abs() <= cfg.objective_tol * objective.abs().max(1e-12));
        prev_objective = Some(objective);
        if budget_ok && all_converged && stalled && primal <= eps_pri && dual <= eps_dual {
            stop_reason = StopReason::Converged;
            break;
        }

        let new_rho = adapt_rho(rho, cfg.rho0, regularized, primal, dual);
        if new_rho != rho {
            for v in &mut y {
                *v *= rho / new_rho;
            }
            rho = new_rho;
        }
    }

    let final_b: Vec<f64> = b.iter().map(|v| v * sb).collect();
    let values = project_to_budget(&final_b, lower, upper, total);
    let allocation = Allocation::from_vec(nc, nl, values);
    let (objective, penalty) = evaluate(scenario, surfaces, pp.as_ref(), &allocation);
    Ok(OptimizeReport {
        allocation,
        objective,
        penalty,
        iterations,
        stop_reason,
        trace,
    })
}
