//! Synthetic teacher surfaces with known derivatives, standing in for an
//! expensive learned model, plus noisy experimental IOB measurements.
//!
//! The teacher family is
//!
//! ```text
//! obj(b) = base + Σ_l gain_l (1 - exp(-b_l / scale_l))
//!               + Σ_{l<m} inter_lm (b_l / scale_l)(b_m / scale_m)
//! ```
//!
//! Each coordinate slice is concave. With nonpositive interactions the
//! surface is non-decreasing on a box as long as the saturating slope at
//! the box ceiling outweighs the interaction drag, see
//! [`SurfaceSpec::is_monotone_on`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::Response;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("budget vector has {got} entries, surface has {expected} levers")]
    Dimension { expected: usize, got: usize },
    #[error("invalid surface spec: {0}")]
    Invalid(String),
}

/// Parameters of one city's teacher surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub scales: Vec<f64>,
    pub gains: Vec<f64>,
    /// Symmetric levers × levers matrix; the diagonal is ignored.
    pub interactions: Vec<Vec<f64>>,
    pub base: f64,
    #[serde(default)]
    pub seed: u64,
}

/// The optional `"oracle"` block of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSection {
    /// Teacher surface per city id.
    pub surfaces: BTreeMap<String, SurfaceSpec>,
    /// Standard deviation of synthetic experimental IOB noise.
    #[serde(default)]
    pub iob_noise_sd: f64,
}

impl SurfaceSpec {
    pub fn lever_count(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.scales.len();
        if self.gains.len() != n || self.interactions.len() != n {
            return Err(OracleError::Invalid(
                "scales, gains and interactions must share the lever count".into(),
            ));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(OracleError::Invalid(format!(
                "saturation scales must be positive, got {s}"
            )));
        }
        for (l, row) in self.interactions.iter().enumerate() {
            if row.len() != n {
                return Err(OracleError::Invalid(format!(
                    "interaction row {l} has {} entries",
                    row.len()
                )));
            }
            for m in 0..n {
                if (row[m] - self.interactions[m][l]).abs() > 1e-12 {
                    return Err(OracleError::Invalid(format!(
                        "interaction matrix not symmetric at ({l}, {m})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, b: &[f64]) -> Result<(), OracleError> {
        if b.len() != self.lever_count() {
            return Err(OracleError::Dimension {
                expected: self.lever_count(),
                got: b.len(),
            });
        }
        Ok(())
    }

    /// Analytic partial derivative along `lever`.
    pub fn partial(&self, b: &[f64], lever: usize) -> f64 {
        let s = self.scales[lever];
        let mut d = self.gains[lever] / s * (-b[lever] / s).exp();
        for (m, &bm) in b.iter().enumerate() {
            if m != lever {
                d += self.interactions[lever][m] * (bm / self.scales[m]) / s;
            }
        }
        d
    }

    /// True when every partial derivative is nonnegative on the box
    /// `[0, upper]`, assuming nonnegative budgets.
    pub fn is_monotone_on(&self, upper: &[f64]) -> bool {
        (0..self.lever_count()).all(|l| {
            let s = self.scales[l];
            let mut worst = self.gains[l] / s * (-upper[l] / s).exp();
            for m in 0..self.lever_count() {
                if m != l {
                    worst += self.interactions[l][m].min(0.0) * (upper[m] / self.scales[m]) / s;
                }
            }
            worst >= 0.0
        })
    }

    /// Draws a surface that is monotone non-decreasing and axis-concave on
    /// `[0, upper]`: scales near the upper bounds, negative interactions
    /// shrunk until the monotonicity margin holds.
    pub fn random_monotone(upper: &[f64], rng: &mut impl Rng) -> Self {
        let n = upper.len();
        let scales: Vec<f64> = upper.iter().map(|u| u * rng.random_range(0.35..0.9)).collect();
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(20.0..80.0)).collect();
        let mut interactions = vec![vec![0.0; n]; n];
        for l in 0..n {
            for m in (l + 1)..n {
                let v = -rng.random_range(0.0..4.0);
                interactions[l][m] = v;
                interactions[m][l] = v;
            }
        }
        let mut spec = SurfaceSpec {
            scales,
            gains,
            interactions,
            base: rng.random_range(100.0..400.0),
            seed: rng.random(),
        };
        while !spec.is_monotone_on(upper) {
            for row in spec.interactions.iter_mut() {
                for v in row.iter_mut() {
                    *v *= 0.5;
                }
            }
        }
        spec
    }
}

/// Evaluates the teacher objective at lever budgets `b`.
pub fn eval_oracle(spec: &SurfaceSpec, b: &[f64]) -> Result<f64, OracleError> {
    spec.check_dim(b)?;
    let n = spec.lever_count();
    let u: Vec<f64> = b.iter().zip(&spec.scales).map(|(b, s)| b / s).collect();
    let mut v = spec.base;
    for l in 0..n {
        v += spec.gains[l] * (1.0 - (-u[l]).exp());
        for m in (l + 1)..n {
            v += spec.interactions[l][m] * u[l] * u[m];
        }
    }
    Ok(v)
}

pub fn oracle_gradient(spec: &SurfaceSpec, b: &[f64]) -> Result<Vec<f64>, OracleError> {
    spec.check_dim(b)?;
    Ok((0..spec.lever_count()).map(|l| spec.partial(b, l)).collect())
}

impl Response for SurfaceSpec {
    fn dim(&self) -> usize {
        self.lever_count()
    }

    fn value(&self, x: &[f64]) -> f64 {
        eval_oracle(self, x).expect("dimension checked by caller")
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), (0..x.len()).map(|l| self.partial(x, l)))
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.lever_count();
        DMatrix::from_fn(n, n, |l, m| {
            if l == m {
                let s = self.scales[l];
                -self.gains[l] / (s * s) * (-x[l] / s).exp()
            } else {
                self.interactions[l][m] / (self.scales[l] * self.scales[m])
            }
        })
    }
}

/// The ridge test function `(|0.5 - x⁴ - y⁴| + 0.1)⁻¹` on the unit square.
/// Its maximum, 10, sits on the curve `x⁴ + y⁴ = 0.5`.
pub fn fig2_test_fn(x: f64, y: f64) -> f64 {
    1.0 / ((0.5 - x.powi(4) - y.powi(4)).abs() + 0.1)
}

/// One experimental budget-efficiency measurement for a (city, lever).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IobMeasurement {
    pub city: String,
    pub lever: usize,
    pub budget_point: Vec<f64>,
    pub iob: f64,
    /// Measurement variance; the smoother weights by its inverse.
    pub variance: f64,
}

/// Samples noisy IOB measurements with a constant noise level.
///
/// With `noise_sd == 0` the measurements are exact and carry unit variance
/// (any positive constant gives the same weighting).
pub fn sample_iob_measurements(
    spec: &SurfaceSpec,
    city: &str,
    points: &[Vec<f64>],
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<IobMeasurement>, OracleError> {
    sample_iob_measurements_with(spec, city, points, |_, _| noise_sd, seed)
}

/// Samples IOB measurements with a heteroscedastic noise schedule
/// `noise_sd(point, lever)`.
pub fn sample_iob_measurements_with<F>(
    spec: &SurfaceSpec,
    city: &str,
    points: &[Vec<f64>],
    noise_sd: F,
    seed: u64,
) -> Result<Vec<IobMeasurement>, OracleError>
where
    F: Fn(&[f64], usize) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(points.len() * spec.lever_count());
    for p in points {
        spec.check_dim(p)?;
        for lever in 0..spec.lever_count() {
            let sd = noise_sd(p, lever);
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(OracleError::Invalid(format!("noise sd must be >= 0, got {sd}")));
            }
            let truth = spec.partial(p, lever);
            let (iob, variance) = if sd > 0.0 {
                let noise = Normal::new(0.0, sd).expect("sd is positive and finite");
                (truth + noise.sample(&mut rng), sd * sd)
            } else {
                (truth, 1.0)
            };
            out.push(IobMeasurement {
                city: city.to_string(),
                lever,
                budget_point: p.clone(),
                iob,
                variance,
            });
        }
    }
    Ok(out)
}
