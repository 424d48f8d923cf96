//! Twice-differentiable budget → objective maps.

use nalgebra::{DMatrix, DVector};

/// A city-level response surface: objective as a function of the lever
/// budget vector, with analytic first and second derivatives.
pub trait Response: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> DVector<f64>;

    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

impl<R: Response + ?Sized> Response for &R {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).hessian(x)
    }
}

/// Separable quadratic `Σ_l -curvature_l · (x_l - peak_l)²`, handy as an
/// analytic test surface.
#[derive(Debug, Clone)]
pub struct SeparableQuadratic {
    pub peak: Vec<f64>,
    pub curvature: Vec<f64>,
}

impl Response for SeparableQuadratic {
    fn dim(&self) -> usize {
        self.peak.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.peak)
            .zip(&self.curvature)
            .map(|((x, p), k)| -k * (x - p) * (x - p))
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(&self.peak)
                .zip(&self.curvature)
                .map(|((x, p), k)| -2.0 * k * (x - p)),
        )
    }

    fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.curvature.len(),
            self.curvature.iter().map(|k| -2.0 * k),
        ))
    }
}
