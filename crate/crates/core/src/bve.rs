//! Business value evaluation: IOB estimates from experiments, the impact of
//! moving from one allocation to another, marginal efficiency, and
//! weighted prediction-error metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::Allocation;

#[derive(Debug, Error, PartialEq)]
pub enum BveError {
    #[error("experiment has no {0} units")]
    SingleArm(&'static str),
    #[error("design matrix is rank deficient (rank {rank} of {columns})")]
    RankDeficient { rank: usize, columns: usize },
    #[error("invalid experiment data: {0}")]
    Invalid(String),
    #[error("allocations or curves do not match: {0}")]
    Shape(String),
    #[error("cell {cell}: {message}")]
    Curve { cell: usize, message: String },
    #[error("denominator is zero")]
    ZeroDenominator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub unit_id: String,
    pub treatment: bool,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    /// Extra budget spent per treated unit.
    pub incremental_budget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IobEstimate {
    pub iob: f64,
    pub std_error: f64,
}

/// OLS of outcome on `[1, treatment, covariates]`; the treatment
/// coefficient divided by the per-unit incremental budget is the IOB.
pub fn estimate_iob(records: &[ExperimentRecord]) -> Result<IobEstimate, BveError> {
    if !records.iter().any(|r| r.treatment) {
        return Err(BveError::SingleArm("treated"));
    }
    if !records.iter().any(|r| !r.treatment) {
        return Err(BveError::SingleArm("control"));
    }
    let k = records[0].covariates.len();
    if records.iter().any(|r| r.covariates.len() != k) {
        return Err(BveError::Invalid("covariate dimension varies between units".into()));
    }
    let ib = records[0].incremental_budget;
    if !(ib > 0.0 && ib.is_finite()) || records.iter().any(|r| r.incremental_budget != ib) {
        return Err(BveError::Invalid(
            "incremental budget per unit must be one positive constant".into(),
        ));
    }
    let n = records.len();
    let p = k + 2;
    if n <= p {
        return Err(BveError::RankDeficient { rank: n, columns: p });
    }
    let x = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 => f64::from(u8::from(records[i].treatment)),
        _ => records[i].covariates[j - 2],
    });
    let y = DVector::from_fn(n, |i, _| records[i].outcome);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.rank(smax * 1e-10 * n as f64);
    if rank < p {
        return Err(BveError::RankDeficient { rank, columns: p });
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| BveError::Invalid(e.to_string()))?;
    let residual = &y - &x * &beta;
    let sigma2 = residual.norm_squared() / (n - p) as f64;
    // (XᵀX)⁻¹ = V Σ⁻² Vᵀ
    let v_t = svd.v_t.as_ref().expect("V requested");
    let var_t: f64 = (0..p)
        .map(|i| (v_t[(i, 1)] / svd.singular_values[i]).powi(2))
        .sum();
    Ok(IobEstimate {
        iob: beta[1] / ib,
        std_error: (sigma2 * var_t).sqrt() / ib,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactMode {
    Linear,
    LogLinear,
}

/// IOB measurements of one cell. The first point is the reference
/// measurement used by the linear mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IobCurve {
    /// `(budget, iob)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Externally computed correction applied to every IOB value.
    #[serde(default = "one")]
    pub multiplier: f64,
}

fn one() -> f64 {
    1.0
}

impl IobCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self {
            points,
            multiplier: 1.0,
        }
    }

    /// Least-squares fit of `log iob = a + b log budget`.
    pub fn fit_loglinear(&self) -> Result<(f64, f64), String> {
        if self.points.len() < 2 {
            return Err("log-linear fit needs at least 2 points".into());
        }
        if self.points.iter().any(|&(b, v)| b <= 0.0 || v <= 0.0) {
            return Err("log-linear fit needs positive budgets and IOB values".into());
        }
        let xs: Vec<f64> = self.points.iter().map(|p| p.0.ln()).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.1.ln()).collect();
        let m = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / m;
        let my = ys.iter().sum::<f64>() / m;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        if sxx <= 0.0 {
            return Err("log-linear fit needs 2 distinct budgets".into());
        }
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let b = sxy / sxx;
        Ok((my - b * mx, b))
    }
}

/// `∫_{old}^{new} e^a B^b dB`, with differences formed so that swapping the
/// limits negates the result exactly.
pub fn loglinear_integral(a: f64, b: f64, old: f64, new: f64) -> f64 {
    if (b + 1.0).abs() < 1e-12 {
        a.exp() * (new.ln() - old.ln())
    } else {
        let e = b + 1.0;
        a.exp() * (new.powf(e) - old.powf(e)) / e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub mode: ImpactMode,
    /// Row-major per-cell budget change.
    pub deltas: Vec<f64>,
    /// Row-major per-cell impact.
    pub contributions: Vec<f64>,
    pub total: f64,
    pub efficiency_old: f64,
    pub efficiency_new: f64,
}

/// Objective change from moving `old` to `new`, integrating each cell's
/// IOB curve over its budget change.
pub fn business_impact(
    old: &Allocation,
    new: &Allocation,
    curves: &[IobCurve],
    mode: ImpactMode,
) -> Result<ImpactReport, BveError> {
    if !old.same_shape(new) {
        return Err(BveError::Shape("allocations differ in shape".into()));
    }
    if curves.len() != old.values().len() {
        return Err(BveError::Shape(format!(
            "{} curves for {} cells",
            curves.len(),
            old.values().len()
        )));
    }
    let n = curves.len();
    let mut deltas = Vec::with_capacity(n);
    let mut contributions = Vec::with_capacity(n);
    let mut iob_old = Vec::with_capacity(n);
    let mut iob_new = Vec::with_capacity(n);
    for (cell, curve) in curves.iter().enumerate() {
        let (bo, bn) = (old.values()[cell], new.values()[cell]);
        deltas.push(bn - bo);
        match mode {
            ImpactMode::Linear => {
                let &(_, iob) = curve.points.first().ok_or_else(|| BveError::Curve {
                    cell,
                    message: "linear mode needs one IOB point".into(),
                })?;
                let iob = iob * curve.multiplier;
                contributions.push((bn - bo) * iob);
                iob_old.push(iob);
                iob_new.push(iob);
            }
            ImpactMode::LogLinear => {
                if bo <= 0.0 || bn <= 0.0 {
                    return Err(BveError::Curve {
                        cell,
                        message: format!("log-linear mode needs positive budgets, got {bo} -> {bn}"),
                    });
                }
                let (a, b) = curve
                    .fit_loglinear()
                    .map_err(|message| BveError::Curve { cell, message })?;
                contributions.push(curve.multiplier * loglinear_integral(a, b, bo, bn));
                iob_old.push(curve.multiplier * a.exp() * bo.powf(b));
                iob_new.push(curve.multiplier * a.exp() * bn.powf(b));
            }
        }
    }
    let total = contributions.iter().sum();
    Ok(ImpactReport {
        mode,
        deltas,
        contributions,
        total,
        efficiency_old: marginal_efficiency(old, &iob_old).unwrap_or(f64::NAN),
        efficiency_new: marginal_efficiency(new, &iob_new).unwrap_or(f64::NAN),
    })
}

/// Budget-weighted mean IOB: `Σ B·IOB / Σ B`.
pub fn marginal_efficiency(alloc: &Allocation, iob: &[f64]) -> Result<f64, BveError> {
    if iob.len() != alloc.values().len() {
        return Err(BveError::Shape(format!(
            "{} IOB values for {} cells",
            iob.len(),
            alloc.values().len()
        )));
    }
    let total: f64 = alloc.values().iter().sum();
    if total == 0.0 {
        return Err(BveError::ZeroDenominator);
    }
    let weighted: f64 = alloc.values().iter().zip(iob).map(|(b, i)| b * i).sum();
    Ok(weighted / total)
}

fn metric_weights(actual: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    match weights {
        Some(w) => w.to_vec(),
        None => actual.iter().map(|a| a.abs()).collect(),
    }
}

fn check_lengths(pred: &[f64], actual: &[f64], w: &[f64]) -> Result<(), BveError> {
    if pred.len() != actual.len() || w.len() != actual.len() {
        return Err(BveError::Shape(format!(
            "lengths {}, {}, {}",
            pred.len(),
            actual.len(),
            w.len()
        )));
    }
    Ok(())
}

/// Weighted mean absolute percentage error,
/// `100 · Σ w|p − a| / Σ w|a|`. Weights default to `|actual|`.
pub fn wmape(pred: &[f64], actual: &[f64], weights: Option<&[f64]>) -> Result<f64, BveError> {
    let w = metric_weights(actual, weights);
    check_lengths(pred, actual, &w)?;
    let den: f64 = w.iter().zip(actual).map(|(w, a)| w * a.abs()).sum();
    if den == 0.0 {
        return Err(BveError::ZeroDenominator);
    }
    let num: f64 = w
        .iter()
        .zip(pred.iter().zip(actual))
        .map(|(w, (p, a))| w * (p - a).abs())
        .sum();
    Ok(100.0 * num / den)
}

/// Weighted bias, `100 · Σ w(p − a) / Σ w|a|`; over-prediction is
/// positive. Weights default to `|actual|`.
pub fn wbias(pred: &[f64], actual: &[f64], weights: Option<&[f64]>) -> Result<f64, BveError> {
    let w = metric_weights(actual, weights);
    check_lengths(pred, actual, &w)?;
    let den: f64 = w.iter().zip(actual).map(|(w, a)| w * a.abs()).sum();
    if den == 0.0 {
        return Err(BveError::ZeroDenominator);
    }
    let num: f64 = w
        .iter()
        .zip(pred.iter().zip(actual))
        .map(|(w, (p, a))| w * (p - a))
        .sum();
    Ok(100.0 * num / den)
}
