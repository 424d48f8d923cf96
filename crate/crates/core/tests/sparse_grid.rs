use std::convert::Infallible;

use budgetopt::oracle::fig2_test_fn;
use budgetopt::sparse_grid::{build_adaptive_grid, SparseGrid, Threshold};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ridge(x: &[f64]) -> Result<f64, Infallible> {
    Ok(fig2_test_fn(x[0], x[1]))
}

fn ridge_grid(eps: f64, max_level: u32) -> SparseGrid {
    build_adaptive_grid(ridge, &[(0.0, 1.0); 2], Threshold::Absolute(eps), max_level).unwrap()
}

/// Distance to the curve `x⁴ + y⁴ = 0.5` in the unit square, from a dense
/// parametrization `x = c·√cos θ`, `y = c·√sin θ` with `c = 0.5^{1/4}`.
struct Curve(Vec<(f64, f64)>);

impl Curve {
    fn new() -> Self {
        let c = 0.5f64.powf(0.25);
        Curve(
            (0..=20_000)
                .map(|k| {
                    let t = std::f64::consts::FRAC_PI_2 * k as f64 / 20_000.0;
                    (c * t.cos().sqrt(), c * t.sin().sqrt())
                })
                .collect(),
        )
    }

    fn distance(&self, x: f64, y: f64) -> f64 {
        self.0
            .iter()
            .map(|(a, b)| (a - x).hypot(b - y))
            .fold(f64::INFINITY, f64::min)
    }
}

#[test]
fn ridge_function_error_and_node_budget() {
    let g = ridge_grid(0.05, 10);
    let dense = (2usize.pow(10) + 1).pow(2);
    assert!(g.len() < dense * 15 / 100, "{} nodes", g.len());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (x, y) = (rng.random::<f64>(), rng.random::<f64>());
        worst = worst.max((g.interpolate(&[x, y]).unwrap() - fig2_test_fn(x, y)).abs());
    }
    assert!(worst <= 0.25, "max error {worst}");
    let at = g.interpolate(&[0.3, 0.3]).unwrap();
    assert!((at - fig2_test_fn(0.3, 0.3)).abs() <= 0.25);
}

#[test]
fn ridge_nodes_concentrate_near_the_curve() {
    let g = ridge_grid(0.05, 10);
    let curve = Curve::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let near_area = (0..20_000)
        .filter(|_| curve.distance(rng.random(), rng.random()) <= 0.1)
        .count() as f64
        / 20_000.0;
    let near = g
        .nodes()
        .filter(|n| curve.distance(n.coords[0], n.coords[1]) <= 0.1)
        .count() as f64;
    let far = g.len() as f64 - near;
    let ratio = (near / near_area) / (far / (1.0 - near_area));
    assert!(ratio >= 3.0, "density ratio {ratio}");
}

#[test]
fn error_near_the_ridge_shrinks_with_the_threshold() {
    let curve = Curve::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut probes = Vec::new();
    while probes.len() < 2000 {
        let (x, y): (f64, f64) = (rng.random(), rng.random());
        if curve.distance(x, y) <= 0.1 {
            probes.push((x, y));
        }
    }
    let mut prev = f64::INFINITY;
    for eps in [0.2, 0.1, 0.05] {
        let g = ridge_grid(eps, 10);
        let err = probes
            .iter()
            .map(|&(x, y)| (g.interpolate(&[x, y]).unwrap() - fig2_test_fn(x, y)).abs())
            .fold(0.0, f64::max);
        assert!(err <= prev, "eps {eps}: {err} > {prev}");
        prev = err;
    }
}

#[test]
fn linear_functions_are_reproduced_everywhere() {
    let domain = [(-2.0, 3.0), (10.0, 20.0)];
    let f = |x: &[f64]| -> Result<f64, Infallible> { Ok(3.0 * x[0] - 0.5 * x[1] + 7.0) };
    let g = build_adaptive_grid(f, &domain, Threshold::Absolute(1e-9), 8).unwrap();
    assert!(g.nodes().all(|n| n.key.iter().all(|&(l, _)| l <= 2)));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let x = [rng.random_range(-2.0..=3.0), rng.random_range(10.0..=20.0)];
        assert!((g.interpolate(&x).unwrap() - f(&x).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn infinite_threshold_keeps_the_starting_grid() {
    let g = ridge_grid(f64::INFINITY, 10);
    assert_eq!(g.len(), 5);
    assert_eq!(g.grid_samples(), g.grid_samples());
}

#[test]
fn node_count_grows_mildly_with_dimension() {
    let bump = |x: &[f64]| -> Result<f64, Infallible> { Ok((-x.iter().map(|v| v * v).sum::<f64>()).exp()) };
    let n2 = build_adaptive_grid(bump, &[(-1.0, 1.0); 2], Threshold::Absolute(1e-3), 8).unwrap().len();
    let n3 = build_adaptive_grid(bump, &[(-1.0, 1.0); 3], Threshold::Absolute(1e-3), 8).unwrap().len();
    println!("nodes: 2-D {n2}, 3-D {n3}, ratio {:.2}", n3 as f64 / n2 as f64);
    assert!(n3 < n2 * n2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grids_are_downward_closed_and_interpolate_their_nodes(
        cx in 0.0f64..1.0, cy in 0.0f64..1.0, width in 0.05f64..0.5, eps in 1e-3f64..0.1, level in 2u32..8,
    ) {
        let f = |x: &[f64]| -> Result<f64, Infallible> {
            Ok((-((x[0] - cx).powi(2) + (x[1] - cy).powi(2)) / (width * width)).exp())
        };
        let g = build_adaptive_grid(f, &[(0.0, 1.0); 2], Threshold::Absolute(eps), level).unwrap();
        prop_assert!(g.is_downward_closed());
        for n in g.nodes() {
            prop_assert!(n.key.iter().all(|&(l, _)| l <= level));
            prop_assert!((g.interpolate(&n.coords).unwrap() - n.value).abs() < 1e-12);
        }
    }
}
