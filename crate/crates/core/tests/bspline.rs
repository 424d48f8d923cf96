mod common;

use budgetopt::bspline::{basis_eval, make_knots, row_dot, SplineSurface};
use common::shapes::{random_point, random_template, shaped_surface, Kind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_surface(rng: &mut ChaCha8Rng, dim: usize) -> SplineSurface {
    let t = random_template(rng, dim);
    let coeffs = (0..t.coefficient_count()).map(|_| rng.random_range(-10.0..10.0)).collect();
    t.with_coefficients(coeffs).unwrap()
}

fn fd_first(s: &SplineSurface, x: &[f64], l: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[l] += h;
    m[l] -= h;
    (s.surface_eval(&p).unwrap() - s.surface_eval(&m).unwrap()) / (2.0 * h)
}

/// An interior point whose `±h` neighbours along every axis stay inside one
/// knot span, where the spline is a polynomial.
fn smooth_point(rng: &mut ChaCha8Rng, s: &SplineSurface, margin: f64) -> Vec<f64> {
    loop {
        let x = random_point(rng, s);
        let ok = s.knot_vectors().iter().zip(s.offsets()).zip(&x).all(|((kv, off), &x)| {
            let xi = x - off;
            let (lo, hi) = kv.domain();
            xi - margin > lo && xi + margin < hi && kv.knots().iter().all(|t| (t - xi).abs() > margin)
        });
        if ok {
            return x;
        }
    }
}

#[test]
fn first_derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dim in 1..=3 {
        for _ in 0..4 {
            let s = random_surface(&mut rng, dim);
            for _ in 0..200 {
                let l = rng.random_range(0..dim);
                let (lo, hi) = s.domain()[l];
                let h = 1e-5 * (hi - lo);
                let x = smooth_point(&mut rng, &s, 2.0 * h);
                let exact = s.surface_partial(&x, l).unwrap();
                let fd = fd_first(&s, &x, l, h);
                let scale = exact.abs().max(1.0);
                assert!((exact - fd).abs() / scale < 1e-6, "{exact} vs {fd}");
            }
        }
    }
}

#[test]
fn second_derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for dim in 1..=3 {
        let s = random_surface(&mut rng, dim);
        let scale = s.coefficients().iter().fold(0.0f64, |m, a| m.max(a.abs()));
        for _ in 0..200 {
            let l = rng.random_range(0..dim);
            let (lo, hi) = s.domain()[l];
            let h = 1e-4 * (hi - lo);
            let x = smooth_point(&mut rng, &s, 2.0 * h);
            let mut p = x.clone();
            let mut m = x.clone();
            p[l] += h;
            m[l] -= h;
            let fd = (s.surface_eval(&p).unwrap() - 2.0 * s.surface_eval(&x).unwrap() + s.surface_eval(&m).unwrap())
                / (h * h);
            let exact = s.surface_second_partial(&x, l).unwrap();
            assert!((exact - fd).abs() < 1e-4 * scale.max(exact.abs()), "{exact} vs {fd}");
        }
    }
}

#[test]
fn separable_coefficients_factor_into_one_dimensional_splines() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = SplineSurface::uniform(&[(0.0, 3.0), (-1.0, 4.0)], &[5, 4], &[2, 2]).unwrap();
    let u: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let coeffs = u.iter().flat_map(|ui| v.iter().map(move |vj| ui * vj)).collect();
    let s = s.with_coefficients(coeffs).unwrap();
    let su = SplineSurface::uniform(&[(0.0, 3.0)], &[5], &[2]).unwrap().with_coefficients(u).unwrap();
    let sv = SplineSurface::uniform(&[(-1.0, 4.0)], &[4], &[2]).unwrap().with_coefficients(v).unwrap();
    for _ in 0..100 {
        let x = random_point(&mut rng, &s);
        let expected = su.surface_eval(&x[..1]).unwrap() * sv.surface_eval(&x[1..]).unwrap();
        assert!((s.surface_eval(&x).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn monotone_coefficients_give_nonnegative_slopes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..30 {
        let t = random_template(&mut rng, 1 + case % 3);
        let s = shaped_surface(&mut rng, &t, Kind::Monotone);
        for l in 0..s.dim() {
            assert!(s.monotonicity_rows(l).iter().all(|r| row_dot(r, s.coefficients()) >= -1e-12));
        }
        for _ in 0..1000 {
            let x = random_point(&mut rng, &s);
            for l in 0..s.dim() {
                assert!(s.surface_partial(&x, l).unwrap() >= -1e-10);
            }
        }
    }
}

#[test]
fn concave_coefficients_give_nonpositive_curvature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..30 {
        let t = random_template(&mut rng, 1 + case % 3);
        let s = shaped_surface(&mut rng, &t, Kind::Concave);
        for l in 0..s.dim() {
            assert!(s.concavity_rows(l).iter().all(|r| row_dot(r, s.coefficients()) <= 1e-12));
        }
        for _ in 0..1000 {
            let x = random_point(&mut rng, &s);
            for l in 0..s.dim() {
                assert!(s.surface_second_partial(&x, l).unwrap() <= 1e-10);
            }
        }
    }
}

/// Evaluates the degree-2 derivative at every breakpoint and the curvature
/// at every span midpoint, which is where the extreme values sit.
fn witnesses(s: &SplineSurface) -> (f64, f64) {
    let kv = &s.knot_vectors()[0];
    let off = s.offsets()[0];
    let (lo, hi) = kv.domain();
    let mut breaks: Vec<f64> = kv
        .knots()
        .iter()
        .filter(|t| **t >= lo && **t <= hi)
        .map(|t| t + off)
        .collect();
    breaks.dedup();
    let min_slope = breaks
        .iter()
        .map(|&t| s.surface_partial(&[t], 0).unwrap())
        .fold(f64::INFINITY, f64::min);
    let max_curv = breaks
        .windows(2)
        .map(|w| s.surface_second_partial(&[0.5 * (w[0] + w[1])], 0).unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    (min_slope, max_curv)
}

#[test]
fn violated_conditions_have_witnesses_at_degree_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mono = 0;
    let mut conc = 0;
    while mono < 100 || conc < 100 {
        let t = random_template(&mut rng, 1);
        let a: Vec<f64> = (0..t.coefficient_count()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s = t.with_coefficients(a).unwrap();
        let (min_slope, max_curv) = witnesses(&s);
        if s.monotonicity_rows(0).iter().any(|r| row_dot(r, s.coefficients()) < -1e-9) {
            mono += 1;
            assert!(min_slope < 0.0);
        }
        if s.concavity_rows(0).iter().any(|r| row_dot(r, s.coefficients()) > 1e-9) {
            conc += 1;
            assert!(max_curv > 0.0);
        }
    }
}

#[test]
fn knot_and_basis_examples() {
    let kv = make_knots(0.0, 2.0, 4, 2).unwrap();
    assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0]);
    // (0, 0.5, 1) on (0,0,0,1,1,1) reproduces f(x) = x
    let s = SplineSurface::uniform(&[(0.0, 1.0)], &[3], &[2])
        .unwrap()
        .with_coefficients(vec![0.0, 0.5, 1.0])
        .unwrap();
    for x in [0.1, 0.35, 0.8] {
        assert!((s.surface_partial(&[x], 0).unwrap() - 1.0).abs() < 1e-14);
        assert!(s.surface_second_partial(&[x], 0).unwrap().abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn basis_is_a_nonnegative_partition_of_unity(n in 3usize..10, lo in -10.0f64..10.0, w in 0.1f64..50.0, u in 0.0f64..=1.0) {
        let kv = make_knots(lo, lo + w, n, 2).unwrap();
        let x = lo + u * w;
        let vals: Vec<f64> = (0..n).map(|i| basis_eval(&kv, i, x).unwrap()).collect();
        prop_assert!(vals.iter().all(|&v| (0.0..=1.0 + 1e-15).contains(&v)));
        prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multivariate_shape_holds_per_axis(seed in any::<u64>(), dim in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_template(&mut rng, dim);
        let s = shaped_surface(&mut rng, &t, Kind::MonotoneConcave);
        for _ in 0..200 {
            let x = random_point(&mut rng, &s);
            for l in 0..dim {
                prop_assert!(s.surface_partial(&x, l).unwrap() >= -1e-10);
                prop_assert!(s.surface_second_partial(&x, l).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn file_round_trip_preserves_values(seed in any::<u64>(), dim in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_surface(&mut rng, dim);
        let text = serde_json::to_string(&s.to_file()).unwrap();
        let back = SplineSurface::from_file(serde_json::from_str(&text).unwrap()).unwrap();
        let x = random_point(&mut rng, &s);
        prop_assert_eq!(s.surface_eval(&x).unwrap(), back.surface_eval(&x).unwrap());
    }
}
