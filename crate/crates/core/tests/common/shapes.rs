//! Coefficient tensors with known shape, built directly from the
//! constraint definitions.

use budgetopt::bspline::SplineSurface;
use rand::Rng;

/// Per-axis kind of sequence along a coefficient axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Monotone,
    Concave,
    MonotoneConcave,
}

/// 1-D coefficient sequence on `kv` whose divided differences
/// `(a_i − a_{i−1})/Δ_i` are nonnegative and/or non-increasing.
pub fn sequence<R: Rng>(rng: &mut R, s: &SplineSurface, l: usize, kind: Kind, start: f64) -> Vec<f64> {
    let kv = &s.knot_vectors()[l];
    let n = kv.basis_count();
    let mut slopes: Vec<f64> = (1..n).map(|_| rng.random_range(0.0..2.0)).collect();
    match kind {
        Kind::Monotone => {}
        Kind::Concave => {
            slopes.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let shift = rng.random_range(0.0..2.0);
            for v in &mut slopes {
                *v -= shift;
            }
        }
        Kind::MonotoneConcave => slopes.sort_by(|a, b| b.partial_cmp(a).unwrap()),
    }
    let mut a = vec![start];
    for i in 1..n {
        a.push(a[i - 1] + slopes[i - 1] * kv.delta(i));
    }
    a
}

/// Random coefficient tensor satisfying the `kind` conditions on every axis:
/// a sum of per-axis sequences plus a product term that preserves them.
pub fn shaped_surface<R: Rng>(rng: &mut R, s: &SplineSurface, kind: Kind) -> SplineSurface {
    let shape = s.shape();
    let d = shape.len();
    let additive: Vec<Vec<f64>> = (0..d)
        .map(|l| {
            let start = rng.random_range(-1.0..1.0);
            sequence(rng, s, l, kind, start)
        })
        .collect();
    // Concave-only axes get a product of Greville coordinates (linear in each
    // axis); the others a product of nonnegative sequences of the same kind.
    let product: Vec<Vec<f64>> = (0..d)
        .map(|l| match kind {
            Kind::Concave => {
                let kv = &s.knot_vectors()[l];
                let (lo, hi) = kv.domain();
                kv.greville().iter().map(|g| (g - lo) / (hi - lo)).collect()
            }
            _ => {
                let start = rng.random_range(0.0..1.0);
                sequence(rng, s, l, kind, start)
            }
        })
        .collect();
    let weight = if d > 1 { rng.random_range(0.0..1.0) } else { 0.0 };
    let total: usize = shape.iter().product();
    let mut coeffs = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0; d];
        for l in (0..d).rev() {
            idx[l] = rem % shape[l];
            rem /= shape[l];
        }
        let sum: f64 = (0..d).map(|l| additive[l][idx[l]]).sum();
        let prod: f64 = (0..d).map(|l| product[l][idx[l]]).product();
        coeffs.push(sum + weight * prod);
    }
    s.with_coefficients(coeffs).unwrap()
}

pub fn random_template<R: Rng>(rng: &mut R, dim: usize) -> SplineSurface {
    let domain: Vec<(f64, f64)> = (0..dim)
        .map(|_| {
            let lo = rng.random_range(-5.0..5.0);
            (lo, lo + rng.random_range(0.5..20.0))
        })
        .collect();
    let counts: Vec<usize> = (0..dim).map(|_| rng.random_range(3..8)).collect();
    SplineSurface::uniform(&domain, &counts, &vec![2; dim]).unwrap()
}

pub fn random_point<R: Rng>(rng: &mut R, s: &SplineSurface) -> Vec<f64> {
    s.domain().iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect()
}
