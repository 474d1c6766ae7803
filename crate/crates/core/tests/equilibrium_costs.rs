use nalgebra::{Cholesky, DMatrix};
use proptest::prelude::*;
use slq_core::equilibrium::{eval_u1_star, eval_u2_star, per_path_costs, CostTables, Player};
use slq_core::linalg::{self, Mat, Vector};
use slq_core::paths::generate_noise;
use slq_core::pipeline::{solve, SolveOptions};
use slq_core::{presets, CoefficientPath, TimeGrid};

fn vecs(seed: &[f64], n: usize) -> Vec<Vector> {
    seed.chunks(n).map(Vector::from_column_slice).collect()
}

#[test]
fn terminal_identities_hold_per_path() {
    for (name, _) in presets::list() {
        let spec = presets::preset(name).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
        let t = s.simulate(&generate_noise(2, 50, &grid).unwrap()).unwrap().traj;
        let (n, kt) = (spec.n, grid.n_steps());
        for p in 0..t.n_paths {
            let x = t.x.vector(p, kt);
            let tol = 1e-8 * (1.0 + x.norm());
            let q = t.q.vector(p, kt) + &spec.g1 * &x * t.zinv_density.get(p, kt, 0);
            assert!(q.norm() <= tol, "{name}: q(T) {}", q.norm());
            let phi = t.phi_aug.vector(p, kt);
            let top = phi.rows(0, n) - &spec.g2 * &x;
            assert!(top.norm() <= tol && phi.rows(n, n).norm() <= tol, "{name}: Phi(T)");
        }
    }
}

#[test]
fn cost_quadrature_examples() {
    let spec = presets::preset("scalar-smoke").unwrap();
    let grid = TimeGrid::new(2.0, 40).unwrap();
    let mut tab = CostTables::new(&spec, &grid, Player::Follower);
    let np = 41;
    assert_eq!(tab.path_cost(&vec![0.0; np], &vec![0.0; np], None), 0.0);
    tab.q = vec![Mat::identity(1, 1); np];
    tab.g = Mat::zeros(1, 1);
    let x0 = 1.7;
    let j = tab.path_cost(&vec![x0; np], &vec![0.0; np], None);
    assert!((j - 0.5 * x0 * x0 * 2.0).abs() <= 1e-13);
    // doubling the state weight doubles the running cost
    let x: Vec<f64> = (0..np).map(|k| (k as f64 * 0.3).sin()).collect();
    tab.r = vec![Mat::zeros(1, 1); np];
    let a = tab.path_cost(&x, &vec![0.0; np], None);
    tab.q.iter_mut().for_each(|q| *q *= 2.0);
    assert!((tab.path_cost(&x, &vec![0.0; np], None) - 2.0 * a).abs() <= 1e-13);
}

#[test]
fn cost_standard_error_scales_with_paths() {
    let spec = presets::preset("scalar-smoke").unwrap();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
    let se = |n: usize| {
        let t = s.simulate(&generate_noise(12, n, &grid).unwrap()).unwrap().traj;
        linalg::mean_se(&per_path_costs(&t, &spec, &grid, Player::Leader)).1
    };
    let (a, b, c) = (se(1000), se(4000), se(16_000));
    for r in [a / b, b / c] {
        assert!((r / 2.0 - 1.0).abs() <= 0.2, "ratio {r}");
    }
}

#[test]
fn laws_without_leader_channels_ignore_the_leader() {
    let mut spec = presets::preset("scalar-smoke").unwrap();
    spec.b2 = CoefficientPath::scalar(0.0, 1.0);
    spec.d2 = CoefficientPath::scalar(0.0, 1.0);
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
    let t = s.simulate(&generate_noise(1, 20, &grid).unwrap()).unwrap().traj;
    // x follows dx = (A x + B1 u1) dt + C~ dW~ with no leader contribution
    let a = spec.a.at(0.0)[(0, 0)];
    let b1 = spec.b1.at(0.0)[(0, 0)];
    let ct = spec.ctilde.at(0.0)[(0, 0)];
    let dt = grid.dt();
    for p in 0..t.n_paths {
        for k in 0..100 {
            let x = t.x.get(p, k, 0);
            let next = x + (a * x + b1 * t.u1.get(p, k, 0)) * dt + ct * t.dwt.get(p, k, 0);
            assert!((t.x.get(p, k + 1, 0) - next).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn feedback_laws_are_affine(raw in prop::collection::vec(-3.0f64..3.0, 40), w in -2.0f64..2.0, k in 0usize..=20) {
        let spec = presets::preset("newsvendor-lq").unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let s = solve(&spec, &grid, SolveOptions::default()).unwrap();
        let n = 2 * spec.n;
        let g = &s.gains;
        let a = vecs(&raw[..5 * n], n);
        let b = vecs(&raw[5 * n..10 * n], n);
        let mix: Vec<Vector> = a.iter().zip(&b).map(|(x, y)| x * w + y * (1.0 - w)).collect();
        let u2 = |v: &[Vector]| eval_u2_star(g, k, &v[0], &v[1], &v[2], &v[3]);
        let u1 = |v: &[Vector]| eval_u1_star(g, k, &v[1], &v[3], &v[4]);
        let d2 = u2(&mix) - (u2(&a) * w + u2(&b) * (1.0 - w));
        let d1 = u1(&mix) - (u1(&a) * w + u1(&b) * (1.0 - w));
        prop_assert!(d2.norm() <= 1e-10 * (1.0 + u2(&a).norm() + u2(&b).norm()));
        prop_assert!(d1.norm() <= 1e-10 * (1.0 + u1(&a).norm() + u1(&b).norm()));
    }

    #[test]
    fn psd_check_agrees_with_cholesky(n in 1usize..=6, raw in prop::collection::vec(-1.0f64..1.0, 36), shift in 0.05f64..1.0, indefinite: bool) {
        let l = DMatrix::from_fn(n, n, |i, j| raw[i * 6 + j]);
        let mut m = &l * l.transpose() + DMatrix::identity(n, n) * shift;
        if indefinite {
            let e = linalg::min_eig_sym(&m);
            m -= DMatrix::identity(n, n) * (e + shift);
        }
        prop_assert_eq!(linalg::is_psd(&m), Cholesky::new(m.clone()).is_some());
    }
}
