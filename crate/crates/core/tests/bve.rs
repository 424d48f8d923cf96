use budgetopt::bve::{
    business_impact, estimate_iob, marginal_efficiency, wbias, wmape, ExperimentRecord, ImpactMode,
    IobCurve,
};
use budgetopt::Allocation;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Exact points on `IOB(B) = e^a B^b`.
fn power_curve(a: f64, b: f64, budgets: &[f64]) -> IobCurve {
    IobCurve::new(budgets.iter().map(|&x| (x, a.exp() * x.powf(b))).collect())
}

/// Composite Simpson integral of `e^a B^b` over `[lo, hi]`.
fn simpson(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| a.exp() * x.powf(b);
    let mut s = f(lo) + f(hi);
    for k in 1..n {
        s += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn loglinear_impact_matches_the_integral_of_power_curves() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let a = rng.random_range(-2.0..2.0);
        let b = if rng.random_bool(0.1) { -1.0 } else { rng.random_range(-1.8..0.5) };
        let budgets: Vec<f64> = (0..4).map(|_| rng.random_range(10.0..500.0)).collect();
        let old = rng.random_range(10.0..500.0);
        let new = rng.random_range(10.0..500.0);
        let r = business_impact(
            &Allocation::from_vec(1, 1, vec![old]),
            &Allocation::from_vec(1, 1, vec![new]),
            &[power_curve(a, b, &budgets)],
            ImpactMode::LogLinear,
        )
        .unwrap();
        let expected = simpson(a, b, old.min(new), old.max(new)) * (new - old).signum();
        assert!((r.total - expected).abs() <= 1e-6 * expected.abs().max(1.0), "{} vs {expected}", r.total);
    }
}

#[test]
fn two_points_are_interpolated_exactly() {
    let curve = IobCurve::new(vec![(100.0, 0.4), (200.0, 0.3)]);
    let (a, b) = curve.fit_loglinear().unwrap();
    assert!((a.exp() * 100f64.powf(b) - 0.4).abs() < 1e-14);
    assert!((a.exp() * 200f64.powf(b) - 0.3).abs() < 1e-14);
}

#[test]
fn small_moves_agree_across_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = 6;
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..300.0)).collect();
        let new: Vec<f64> = old.iter().map(|v| v * (1.0 + rng.random_range(-0.01..0.01))).collect();
        // all cells move the same way so the total cannot cancel
        let new: Vec<f64> = old.iter().zip(&new).map(|(o, v)| o + (v - o).abs() + 1e-3 * o).collect();
        let curves: Vec<IobCurve> = old
            .iter()
            .map(|&o| {
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.5..-0.1));
                let mut pts = vec![o];
                pts.extend((0..3).map(|_| rng.random_range(20.0..400.0)));
                power_curve(a, b, &pts)
            })
            .collect();
        let a = Allocation::from_vec(1, n, old);
        let b = Allocation::from_vec(1, n, new);
        let lin = business_impact(&a, &b, &curves, ImpactMode::Linear).unwrap().total;
        let log = business_impact(&a, &b, &curves, ImpactMode::LogLinear).unwrap().total;
        assert!((lin - log).abs() <= 0.02 * log.abs(), "{lin} vs {log}");
    }
}

/// Normal-equation OLS through an explicit Gauss–Jordan inverse.
fn ols_oracle(rows: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = rows[0].len();
    let mut m = vec![vec![0.0; 2 * p]; p];
    let mut xty = vec![0.0; p];
    for (r, &yi) in rows.iter().zip(y) {
        for i in 0..p {
            xty[i] += r[i] * yi;
            for j in 0..p {
                m[i][j] += r[i] * r[j];
            }
        }
    }
    for (i, row) in m.iter_mut().enumerate() {
        row[p + i] = 1.0;
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&a, &b| m[a][c].abs().partial_cmp(&m[b][c].abs()).unwrap()).unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        for v in &mut m[c] {
            *v /= d;
        }
        for r in 0..p {
            if r != c {
                let f = m[r][c];
                let pivot_row = m[c].clone();
                for (v, pv) in m[r].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    let inv: Vec<Vec<f64>> = m.iter().map(|r| r[p..].to_vec()).collect();
    let beta = (0..p).map(|i| (0..p).map(|j| inv[i][j] * xty[j]).sum()).collect();
    (beta, inv)
}

fn experiment(rng: &mut ChaCha8Rng, n: usize, k: usize, effect: f64, ib: f64) -> Vec<ExperimentRecord> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let t = i % 3 != 0;
            let x: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = 5.0 + effect * f64::from(u8::from(t)) + x.iter().enumerate().map(|(j, v)| (j as f64 + 1.0) * v).sum::<f64>()
                + noise.sample(rng);
            ExperimentRecord {
                unit_id: format!("u{i}"),
                treatment: t,
                outcome: y,
                covariates: x,
                incremental_budget: ib,
            }
        })
        .collect()
}

#[test]
fn iob_estimate_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let recs = experiment(&mut rng, 300, 3, 2.5, 4.0);
    let rows: Vec<Vec<f64>> = recs
        .iter()
        .map(|r| {
            let mut row = vec![1.0, f64::from(u8::from(r.treatment))];
            row.extend(&r.covariates);
            row
        })
        .collect();
    let y: Vec<f64> = recs.iter().map(|r| r.outcome).collect();
    let (beta, inv) = ols_oracle(&rows, &y);
    let rss: f64 = rows
        .iter()
        .zip(&y)
        .map(|(r, yi)| (yi - r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()).powi(2))
        .sum();
    let se = (rss / (rows.len() - beta.len()) as f64 * inv[1][1]).sqrt() / 4.0;
    let est = estimate_iob(&recs).unwrap();
    assert!((est.iob - beta[1] / 4.0).abs() < 1e-10);
    assert!((est.std_error - se).abs() < 1e-10);
    assert!((est.iob - 2.5 / 4.0).abs() < 4.0 * est.std_error);
}

#[test]
fn efficiency_rises_when_budget_moves_to_better_levers() {
    let iob = [0.2, 0.5, 0.9];
    let a = Allocation::from_vec(1, 3, vec![100.0, 100.0, 100.0]);
    let b = Allocation::from_vec(1, 3, vec![50.0, 100.0, 150.0]);
    assert!(marginal_efficiency(&b, &iob).unwrap() > marginal_efficiency(&a, &iob).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn impact_is_exactly_antisymmetric(seed in any::<u64>(), unit in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1000.0)).collect();
        let new: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1000.0)).collect();
        let curves: Vec<IobCurve> = (0..n)
            .map(|_| {
                let b = if unit { -1.0 } else { rng.random_range(-2.0..1.0) };
                let pts: Vec<f64> = (0..3).map(|_| rng.random_range(1.0..1000.0)).collect();
                power_curve(rng.random_range(-3.0..3.0), b, &pts)
            })
            .collect();
        let a = Allocation::from_vec(1, n, old);
        let b = Allocation::from_vec(1, n, new);
        for mode in [ImpactMode::Linear, ImpactMode::LogLinear] {
            let fwd = business_impact(&a, &b, &curves, mode).unwrap();
            let back = business_impact(&b, &a, &curves, mode).unwrap();
            for (x, y) in fwd.contributions.iter().zip(&back.contributions) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn wmape_bounds_absolute_wbias(
        pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, 0.0f64..10.0), 1..50),
        weighted in any::<bool>(),
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let actual: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let w: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let w = weighted.then_some(w.as_slice());
        if let (Ok(m), Ok(b)) = (wmape(&pred, &actual, w), wbias(&pred, &actual, w)) {
            prop_assert!(m + 1e-9 * m.abs() >= b.abs());
        }
    }

    #[test]
    fn affine_covariate_rescaling_leaves_the_estimate_unchanged(
        seed in any::<u64>(), scale in prop::collection::vec(0.1f64..100.0, 2), shift in prop::collection::vec(-50.0f64..50.0, 2),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = experiment(&mut rng, 60, 2, 1.0, 2.0);
        let moved: Vec<ExperimentRecord> = recs
            .iter()
            .map(|r| ExperimentRecord {
                covariates: r.covariates.iter().enumerate().map(|(j, v)| scale[j] * v + shift[j]).collect(),
                ..r.clone()
            })
            .collect();
        let a = estimate_iob(&recs).unwrap();
        let b = estimate_iob(&moved).unwrap();
        prop_assert!((a.iob - b.iob).abs() < 1e-8 * a.iob.abs().max(1.0));
        prop_assert!((a.std_error - b.std_error).abs() < 1e-8 * a.std_error.max(1e-3));
    }
}
