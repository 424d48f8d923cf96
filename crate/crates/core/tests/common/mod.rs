#![allow(dead_code)]

pub mod shapes;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Euclidean projection of `v` onto `{lo ≤ x ≤ hi}`, optionally intersected
/// with `{Σx = total}`. The sum of the clipped shifted vector is piecewise
/// linear in the shift, so the crossing is located exactly between sorted
/// breakpoints.
pub fn project_box_sum(v: &[f64], lo: &[f64], hi: &[f64], total: Option<f64>) -> Vec<f64> {
    let clip = |t: f64| -> Vec<f64> {
        v.iter()
            .zip(lo.iter().zip(hi))
            .map(|(x, (l, h))| (x + t).clamp(*l, *h))
            .collect()
    };
    let Some(total) = total else { return clip(0.0) };
    let sum = |t: f64| clip(t).iter().sum::<f64>();
    let mut knots: Vec<f64> = v
        .iter()
        .zip(lo.iter().zip(hi))
        .flat_map(|(x, (l, h))| [l - x, h - x])
        .collect();
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut prev = (knots[0], sum(knots[0]));
    if total <= prev.1 {
        return clip(knots[0]);
    }
    for &k in &knots[1..] {
        let sk = sum(k);
        if sk >= total {
            let t = if sk > prev.1 {
                prev.0 + (total - prev.1) * (k - prev.0) / (sk - prev.1)
            } else {
                k
            };
            return clip(t);
        }
        prev = (k, sk);
    }
    clip(prev.0)
}

fn quadratic(p: &DMatrix<f64>, q: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(p * x)) + q.dot(x)
}

/// Solves the equality-constrained QP on the coordinates not pinned to a
/// bound by `x`, returning the point if it stays inside the box.
fn active_set_polish(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    total: Option<f64>,
    x: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = q.len();
    let pinned = |i: usize| (x[i] - lo[i]).abs() < 1e-9 || (hi[i] - x[i]).abs() < 1e-9;
    let free: Vec<usize> = (0..n).filter(|&i| !pinned(i)).collect();
    let mut fixed = x.clone();
    for &i in &free {
        fixed[i] = 0.0;
    }
    let nf = free.len();
    if nf == 0 {
        return None;
    }
    let ne = usize::from(total.is_some());
    let mut kkt = DMatrix::zeros(nf + ne, nf + ne);
    let mut rhs = DVector::zeros(nf + ne);
    let pinned_pull = p * &fixed;
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = p[(i, j)];
        }
        rhs[a] = -q[i] - pinned_pull[i];
        if ne == 1 {
            kkt[(a, nf)] = 1.0;
            kkt[(nf, a)] = 1.0;
        }
    }
    if let Some(t) = total {
        rhs[nf] = t - fixed.sum();
    }
    let sol = kkt.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let mut out = fixed;
    for (a, &i) in free.iter().enumerate() {
        out[i] = sol[a];
    }
    let inside = (0..n).all(|i| out[i] >= lo[i] - 1e-12 && out[i] <= hi[i] + 1e-12);
    (inside && out.iter().all(|v| v.is_finite())).then_some(out)
}

/// Accelerated projected gradient with adaptive restart on
/// `½xᵀPx + qᵀx` over a box with optional sum constraint, finished by an
/// active-set solve on the identified face.
pub fn projected_gradient(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    total: Option<f64>,
) -> DVector<f64> {
    let n = q.len();
    let lipschitz = p.clone().symmetric_eigen().eigenvalues.max().max(1e-12);
    let step = 1.0 / lipschitz;
    let start: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let mut x = DVector::from_vec(project_box_sum(&start, lo, hi, total));
    let mut yk = x.clone();
    let mut t = 1.0f64;
    let mut fx = quadratic(p, q, &x);
    for _ in 0..50_000 {
        let grad = p * &yk + q;
        let trial: Vec<f64> = (0..n).map(|i| yk[i] - step * grad[i]).collect();
        let xn = DVector::from_vec(project_box_sum(&trial, lo, hi, total));
        let fxn = quadratic(p, q, &xn);
        if fxn > fx {
            t = 1.0;
            yk = x.clone();
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        yk = &xn + ((t - 1.0) / tn) * (&xn - &x);
        let moved = (&xn - &x).amax();
        x = xn;
        fx = fxn;
        t = tn;
        if moved < 1e-15 {
            let grad = p * &x + q;
            let plain: Vec<f64> = (0..n).map(|i| x[i] - step * grad[i]).collect();
            let plain = DVector::from_vec(project_box_sum(&plain, lo, hi, total));
            if (&plain - &x).amax() < 1e-15 {
                break;
            }
            t = 1.0;
            yk = x.clone();
        }
    }
    match active_set_polish(p, q, lo, hi, total, &x) {
        Some(polished) if quadratic(p, q, &polished) < fx => polished,
        _ => x,
    }
}

/// Random PSD matrix `MᵀM` with rank `rank`, plus an optional ridge.
pub fn random_psd<R: Rng>(rng: &mut R, n: usize, rank: usize, ridge: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(rank, n, |_, _| rng.random_range(-1.0..1.0));
    let mut p = m.transpose() * m;
    for i in 0..n {
        p[(i, i)] += ridge;
    }
    0.5 * (&p + p.transpose())
}

/// Scenario with uniform weights and the given per-cell data (row-major).
pub fn scenario(
    cities: usize,
    levers: usize,
    total: f64,
    floors: Vec<f64>,
    ceilings: Vec<f64>,
    reference: Vec<f64>,
    penalty_weight: f64,
) -> budgetopt::Scenario {
    use budgetopt::Allocation;
    budgetopt::Scenario {
        week_id: "w1".into(),
        cities: (0..cities).map(|c| format!("c{c}")).collect(),
        levers: (0..levers).map(|l| format!("l{l}")).collect(),
        total_budget: total,
        floors: Allocation::from_vec(cities, levers, floors),
        ceilings: Allocation::from_vec(cities, levers, ceilings),
        reference: Allocation::from_vec(cities, levers, reference),
        city_weights: vec![penalty_weight; cities],
        lever_weights: vec![1.0; levers],
        lambda: 0.0,
        oracle: None,
    }
}
