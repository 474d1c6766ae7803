//! Feedback laws, adjoint recovery and Monte Carlo cost estimates.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::GainSet;
use crate::linalg::{self, Mat, Vector};
use crate::model::{GameSpec, TimeGrid};
use crate::paths::{ctilde_aug, Field, TrajectorySet};
use crate::riccati::{FollowerRiccatiSolution, LeaderRiccatiSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Player {
    Follower,
    Leader,
}

impl Player {
    pub fn name(self) -> &'static str {
        match self {
            Player::Follower => "follower",
            Player::Leader => "leader",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_paths: usize,
    pub player: Player,
}

impl CostEstimate {
    pub fn from_samples(samples: &[f64], player: Player) -> Self {
        let (mean, std_err) = linalg::mean_se(samples);
        CostEstimate { mean, std_err, n_paths: samples.len(), player }
    }
}

fn stack_v(x: &Vector, xh: &Vector, p3: &Vector, p3h: &Vector) -> Vector {
    let nn = x.len();
    let mut v = Vector::zeros(4 * nn);
    v.rows_mut(0, nn).copy_from(x);
    v.rows_mut(nn, nn).copy_from(xh);
    v.rows_mut(2 * nn, nn).copy_from(p3);
    v.rows_mut(3 * nn, nn).copy_from(p3h);
    v
}

/// Leader's law at grid point `k`.
pub fn eval_u2_star(gains: &GainSet, k: usize, x: &Vector, xh: &Vector, p3: &Vector, p3h: &Vector) -> Vector {
    &gains.at[k].u * stack_v(x, xh, p3, p3h)
}

/// Follower's nonanticipating law at grid point `k`; it reads only filtered
/// quantities.
pub fn eval_u1_star(gains: &GainSet, k: usize, xh: &Vector, p3h: &Vector, q3: &Vector) -> Vector {
    let g = &gains.at[k];
    let v = stack_v(xh, xh, p3h, p3h);
    g.u1(&v, q3)
}

/// Recover Phi, Zaug, Z~aug, phi, beta, q, k, k~ from the representation
/// formulas along every path.
pub fn recover_adjoints(
    traj: &mut TrajectorySet,
    spec: &GameSpec,
    grid: &TimeGrid,
    follower: &FollowerRiccatiSolution,
    leader: &LeaderRiccatiSolution,
    gains: &GainSet,
) {
    let n = spec.n;
    let nn = 2 * n;
    let np = traj.n_points;
    let ks: Vec<_> = (0..np).map(|k| spec.at(grid.t(k))).collect();
    let cts: Vec<Vector> = (0..np).map(|k| ctilde_aug(spec, grid.t(k))).collect();
    let t = &*traj;
    let per: Vec<[Vec<f64>; 8]> = (0..t.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut out: [Vec<f64>; 8] = Default::default();
            for k in 0..np {
                let co = &ks[k];
                let (p1c, p2c) = (&leader.p1c[k], &leader.p2c[k]);
                let v = t.v(p, k);
                let xa = v.rows(0, nn).into_owned();
                let xh = v.rows(nn, nn).into_owned();
                let phi_aug = p1c * &xa + p2c * &xh + t.p3.vector(p, k);
                let zaug = p1c * (&gains.at[k].s * &v);
                let ztaug = (p1c + p2c) * &cts[k] + t.q3.vector(p, k);
                let phi = phi_aug.rows(n, n).into_owned();
                let gamma = zaug.rows(n, n).into_owned();
                let beta = ztaug.rows(n, n).into_owned();
                let x = t.x.vector(p, k);
                let u1 = t.u1.vector(p, k);
                let u2 = t.u2.vector(p, k);
                let zinv = t.zinv_density.get(p, k, 0);
                let p1 = &follower.p1[k];
                let a = co.h.column(0).dot(&t.xtilde.vector(p, k));
                let q = -(p1 * &x + &phi) * zinv;
                let kk = -(p1 * (&co.c * &x + &co.d1 * &u1 + &co.d2 * &u2) + &gamma) * zinv;
                let kt = -(p1 * co.ctilde.column(0) + p1 * &x * a + &phi * a + &beta) * zinv;
                out[0].extend(phi_aug.iter());
                out[1].extend(zaug.iter());
                out[2].extend(ztaug.iter());
                out[3].extend(phi.iter());
                out[4].extend(beta.iter());
                out[5].extend(q.iter());
                out[6].extend(kk.iter());
                out[7].extend(kt.iter());
            }
            out
        })
        .collect();
    let mut cols: Vec<Vec<Vec<f64>>> = (0..8).map(|_| Vec::new()).collect();
    for rec in per {
        for (i, v) in rec.into_iter().enumerate() {
            cols[i].push(v);
        }
    }
    let mut it = cols.into_iter();
    let mut next = |dim| Field::from_paths(it.next().unwrap(), np, dim);
    traj.phi_aug = next(nn);
    traj.zaug = next(nn);
    traj.ztaug = next(nn);
    traj.phi = next(n);
    traj.beta = next(n);
    traj.q = next(n);
    traj.k = next(n);
    traj.ktilde = next(n);
}

/// Quadratic cost weights tabulated on the grid.
#[derive(Debug, Clone)]
pub struct CostTables {
    pub player: Player,
    pub q: Vec<Mat>,
    pub r: Vec<Mat>,
    pub g: Mat,
    pub dt: f64,
}

impl CostTables {
    pub fn new(spec: &GameSpec, grid: &TimeGrid, player: Player) -> Self {
        let times = grid.times();
        let (q, r, g) = match player {
            Player::Follower => (
                times.iter().map(|&t| spec.q1.at(t)).collect(),
                times.iter().map(|&t| spec.n1.at(t)).collect(),
                spec.g1.clone(),
            ),
            Player::Leader => (
                times.iter().map(|&t| spec.q2.at(t)).collect(),
                times.iter().map(|&t| spec.n2.at(t)).collect(),
                spec.g2.clone(),
            ),
        };
        CostTables { player, q, r, g, dt: grid.dt() }
    }

    fn quad(m: &Mat, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                s += v[i] * m[(i, j)] * v[j];
            }
        }
        s
    }

    /// One path: x is n_points*n, u is n_points*m, optional weights per point.
    pub fn path_cost(&self, x: &[f64], u: &[f64], w: Option<&[f64]>) -> f64 {
        let np = self.q.len();
        let n = x.len() / np;
        let m = u.len() / np;
        let mut acc = 0.0;
        for k in 0..np {
            let mut run = Self::quad(&self.q[k], &x[k * n..(k + 1) * n]) + Self::quad(&self.r[k], &u[k * m..(k + 1) * m]);
            if let Some(w) = w {
                run *= w[k];
            }
            let wt = if k == 0 || k == np - 1 { 0.5 } else { 1.0 };
            acc += wt * run;
        }
        let mut term = Self::quad(&self.g, &x[(np - 1) * n..]);
        if let Some(w) = w {
            term *= w[np - 1];
        }
        0.5 * (acc * self.dt + term)
    }
}

pub fn per_path_costs(traj: &TrajectorySet, spec: &GameSpec, grid: &TimeGrid, player: Player) -> Vec<f64> {
    let tab = CostTables::new(spec, grid, player);
    let u = match player {
        Player::Follower => &traj.u1,
        Player::Leader => &traj.u2,
    };
    (0..traj.n_paths).into_par_iter().map(|p| tab.path_cost(traj.x.path(p), u.path(p), None)).collect()
}

pub fn estimate_cost(traj: &TrajectorySet, spec: &GameSpec, grid: &TimeGrid, player: Player) -> CostEstimate {
    CostEstimate::from_samples(&per_path_costs(traj, spec, grid, player), player)
}

/// Deterministic ordering: samples are reduced with pairwise summation.
pub fn mean_pairwise(samples: &[f64]) -> f64 {
    linalg::pairwise_sum(samples) / samples.len() as f64
}
