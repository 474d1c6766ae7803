mod common;

use common::*;
use slq_core::linalg::{mean_se, Mat};
use slq_core::paths::{self, generate_noise, simulate_xtilde_and_filter};
use slq_core::pipeline::{measure_transform_check, solve, SolveOptions};
use slq_core::{presets, TimeGrid};

#[test]
fn noise_reproducible_and_normal() {
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let a = generate_noise(7, 1000, &grid).unwrap();
    let b = generate_noise(7, 1000, &grid).unwrap();
    let c = generate_noise(7, 3, &grid).unwrap();
    assert_eq!(a.dw, b.dw);
    assert_eq!(a.dwt, b.dwt);
    // substreams depend only on (seed, path)
    assert_eq!(&a.dw[..300], &c.dw[..]);
    let dt = grid.dt();
    for v in [&a.dw, &a.dwt] {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        assert!(m.abs() <= 4.0 * (dt / n).sqrt(), "mean {m}");
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / dt - 1.0).abs() <= 0.05, "var {var}");
    }
}

#[test]
fn density_is_a_martingale_and_inverse_exact() {
    let spec = presets::preset("scalar-smoke").unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let fp = simulate_xtilde_and_filter(&spec, &grid, &generate_noise(11, 10_000, &grid).unwrap()).unwrap();
    for k in [40, 80, 120, 160, 200] {
        let (m, se) = mean_se(&fp.z.column(k, 0));
        assert!((m - 1.0).abs() <= 3.0 * se, "t index {k}: {m} +- {se}");
    }
    for p in 0..fp.n_paths() {
        let (z, zi) = paths::girsanov_density(&fp, p);
        for (a, b) in z.iter().zip(&zi) {
            assert!(*a > 0.0 && (a * b - 1.0).abs() <= 1e-8);
        }
    }
}

#[test]
fn innovation_increments_have_variance_dt() {
    let spec = presets::preset("scalar-smoke").unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let fp = simulate_xtilde_and_filter(&spec, &grid, &generate_noise(3, 1000, &grid).unwrap()).unwrap();
    let mut v = Vec::new();
    for p in 0..fp.n_paths() {
        v.extend_from_slice(&fp.dwhat.path(p)[..100]);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / grid.dt() - 1.0).abs() <= 0.05, "var ratio {}", var / grid.dt());
}

#[test]
fn filter_is_unbiased_and_orthogonal() {
    let spec = presets::preset("scalar-smoke").unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
    let sim = s.simulate(&generate_noise(5, 10_000, &grid).unwrap()).unwrap();
    let t = &sim.traj;
    for k in [50, 100, 150, 200] {
        let e: Vec<f64> = (0..t.n_paths).map(|p| t.x.get(p, k, 0) - t.xhat.get(p, k, 0)).collect();
        for pow in 0..3 {
            let v: Vec<f64> = e.iter().enumerate().map(|(p, e)| e * t.y.get(p, k, 0).powi(pow)).collect();
            let (m, se) = mean_se(&v);
            assert!(m.abs() <= 3.0 * se, "k {k} g=Y^{pow}: {m} +- {se}");
        }
    }
    assert!((0..t.n_paths).all(|p| t.xhat.get(p, 0, 0) == spec.x0[0]));
}

#[test]
fn unobservable_case_degenerates_exactly() {
    let spec = presets::preset("complete-info").unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
    let sim = s.simulate(&generate_noise(9, 500, &grid).unwrap()).unwrap();
    let t = &sim.traj;
    assert!(sim.p3.is_zero());
    for f in [&t.zhat, &t.z_density, &t.zinv_density] {
        assert!(f.data.iter().all(|z| (z - 1.0).abs() <= 1e-8));
    }
    for f in [&t.p3, &t.p3_hat, &t.q3] {
        assert!(f.data.iter().all(|v| v.abs() <= 1e-8));
    }
    // xtilde^ solves the deterministic ODE dx/dt = C1 x
    let c1 = spec.c1.at(0.0)[(0, 0)];
    let xt = sim.filters.xtilde_hat.get(0, 200, 0);
    let exact = spec.xtilde0[0] * c1.exp();
    assert!((xt - exact).abs() <= 2.0 * grid.dt() * exact.abs());
    let (direct, weighted) = measure_transform_check(&s, 200, 4).unwrap();
    assert_eq!(direct.mean, weighted.mean);
}

#[test]
fn two_measure_cost_estimates_agree() {
    let spec = presets::preset("scalar-smoke").unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
    let (a, b) = measure_transform_check(&s, 10_000, 21).unwrap();
    let se = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() <= 3.0 * se, "{} vs {} (se {se})", a.mean, b.mean);
}

/// Game whose signal carries W noise, so the filter error e = x~ - x~^ is
/// non-degenerate and P3 is forced.
fn forced(eps: f64) -> slq_core::GameSpec {
    Scalar {
        a: 0.2,
        c1: -0.3,
        ctilde: 0.4,
        c2: 0.5,
        c3: 0.3,
        b1: 1.0,
        b2: 0.8,
        d2: 0.3,
        h: eps,
        g2: 0.5,
        xtilde0: 0.4,
        ..Default::default()
    }
    .spec()
}

/// E[. | F_k] of the P3 recursion in closed form: P3_k = M_k e_k with
/// M_k = [(I + L3 dt) M_{k+1} + f h' dt](1 + (C1 - C3 h) dt).
fn p3_slopes(spec: &slq_core::GameSpec, s: &slq_core::pipeline::Solved) -> Vec<Mat> {
    let grid = &s.grid;
    let ns = grid.n_steps();
    let dt = grid.dt();
    let mut m = vec![Mat::zeros(2, 1); ns + 1];
    for k in (0..ns).rev() {
        let t1 = grid.t(k + 1);
        let h1 = spec.h.at(t1);
        let f = &s.leader.p2c[k + 1] * paths::ctilde_aug(spec, t1);
        let lam = &s.gains.at[k + 1].lam3;
        let ae = spec.c1.at(grid.t(k))[(0, 0)] - spec.c3.at(grid.t(k))[(0, 0)] * spec.h.at(grid.t(k))[(0, 0)];
        let step = (&m[k + 1] + lam * &m[k + 1] * dt + &f * h1.transpose() * dt) * (1.0 + ae * dt);
        m[k] = step;
    }
    m
}

/// Relative RMS gap between the regressed P3 and M_k e_k at each step.
fn p3_gaps(n_paths: usize) -> Vec<(f64, f64)> {
    let spec = forced(1.0);
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
    let fp = simulate_xtilde_and_filter(&spec, &grid, &generate_noise(17, n_paths, &grid).unwrap()).unwrap();
    let p3 = paths::solve_p3_bsde(&spec, &grid, &s.gains, &s.leader, &fp, paths::P3_DEGREE).unwrap();
    let slopes = p3_slopes(&spec, &s);
    (1..4)
        .map(|k| {
            let (mut gap, mut scale) = (0.0, 0.0);
            for p in 0..n_paths {
                for c in 0..2 {
                    let o = slopes[k][(c, 0)] * fp.e(p, k)[0];
                    gap += (p3.eval_path(&fp, p, k)[c] - o).powi(2);
                    scale += o * o;
                }
            }
            ((gap / n_paths as f64).sqrt(), (scale / n_paths as f64).sqrt())
        })
        .collect()
}

#[test]
fn p3_regression_matches_conditional_expectation() {
    let coarse = p3_gaps(1000);
    let fine = p3_gaps(16_000);
    for (k, ((g0, s0), (g1, s1))) in coarse.iter().zip(&fine).enumerate() {
        if *s1 == 0.0 {
            // no forcing left before the terminal step
            assert!(*g0 <= 1e-12 && *g1 <= 1e-12, "step {}: {g0} {g1}", k + 1);
            continue;
        }
        assert!(g1 / s1 <= 0.05, "step {}: relative gap {}", k + 1, g1 / s1);
        // Monte Carlo error: 16x the paths should at least halve the gap
        assert!(g1 / s1 <= 0.5 * g0 / s0, "step {}: {} -> {}", k + 1, g0 / s0, g1 / s1);
    }
}

#[test]
fn p3_scales_linearly_with_observation_gain() {
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let noise = generate_noise(23, 2000, &grid).unwrap();
    let norm = |eps: f64| {
        let spec = forced(eps);
        let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
        let sim = s.simulate(&noise).unwrap();
        (sim.traj.p3.data.iter().map(|v| v * v).sum::<f64>() / sim.traj.p3.data.len() as f64).sqrt()
    };
    let (a, b) = (norm(0.2), norm(0.1));
    assert!(a > 0.0);
    assert!((a / b / 2.0 - 1.0).abs() <= 0.2, "ratio {}", a / b);
    let spec = forced(0.0);
    let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
    assert!(s.simulate(&noise).unwrap().p3.is_zero());
}

#[test]
fn strong_error_decays_at_least_half_order() {
    let spec = presets::preset("scalar-smoke").unwrap();
    let fine = TimeGrid::new(1.0, 400).unwrap();
    let noise = generate_noise(31, 500, &fine).unwrap();
    let end_x = |factor: usize| -> Vec<f64> {
        let g = TimeGrid::new(1.0, 400 / factor).unwrap();
        let s = solve(&spec, &g, SolveOptions::default()).unwrap();
        let sim = s.simulate(&noise.coarsen(factor).unwrap()).unwrap();
        (0..sim.traj.n_paths).map(|p| sim.traj.x.get(p, 400 / factor, 0)).collect()
    };
    let reference = end_x(1);
    let err = |v: Vec<f64>| (v.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let (e4, e2) = (err(end_x(16)), err(end_x(8)));
    assert!(e4 / e2 >= 2f64.sqrt() * 0.9, "ratio {}", e4 / e2);
}

#[test]
fn zero_noise_closed_loop_follows_the_ode() {
    let mut spec = presets::preset("complete-info").unwrap();
    spec.d2 = slq_core::CoefficientPath::scalar(0.0, 1.0);
    let err = |n: usize| {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
        let sim = s.simulate(&generate_noise(1, 3, &grid).unwrap()).unwrap();
        let mean = CompleteInfoOracle::solve(&spec, 4000).mean_path(&spec.x0);
        let stride = 4000 / n;
        (0..=n).map(|k| (sim.traj.x.get(2, k, 0) - mean[k * stride][0]).abs()).fold(0.0, f64::max)
    };
    let (a, b) = (err(100), err(200));
    assert!(a <= 10.0 / 100.0 && (1.6..=2.4).contains(&(a / b)), "errors {a} {b}");
}
