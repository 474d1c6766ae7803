//! Numerical certification: stationarity residuals of both maximum
//! conditions, the follower's best response, unilateral deviation tests and
//! a brute-force follower oracle.

use std::borrow::Cow;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{self, DTilde1, FollowerCoeffs, GainMode, GainSet, Pointwise, Selectors};
use crate::equilibrium::{CostEstimate, CostTables, Player};
use crate::error::{Result, SlqError};
use crate::io::{fmt_f, CsvWriter};
use crate::linalg::{self, Mat, Vector};
use crate::lsmc::Regression;
use crate::model::{GameSpec, TimeGrid};
use crate::paths::{self, ctilde_aug, Field, FilterPaths, TrajectorySet};
use crate::pipeline::{self, Simulation, SolveOptions, Solved};

pub const STATIONARITY_TOL: f64 = 1e-2;
/// Residuals below this count as converged in refinement sweeps.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;
pub const SE_MULT: f64 = 3.0;
pub const MIN_R2: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    FollowerMc,
    LeaderMc,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::FollowerMc => "follower_mc",
            Condition::LeaderMc => "leader_mc",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub condition: Condition,
    pub times: Vec<f64>,
    /// RMS across paths of |r| at each grid point.
    pub rms: Vec<f64>,
    pub max: Vec<f64>,
    /// 1 + RMS control magnitude over all paths and points.
    pub normalization: f64,
}

impl ResidualReport {
    fn from_rows(condition: Condition, times: Vec<f64>, rows: Vec<(f64, f64, f64)>, n_paths: usize) -> Self {
        let npts = rows.len();
        let usq: f64 = rows.iter().map(|r| r.2).sum();
        let normalization = 1.0 + (usq / (npts * n_paths) as f64).sqrt();
        ResidualReport {
            condition,
            times,
            rms: rows.iter().map(|r| r.0).collect(),
            max: rows.iter().map(|r| r.1).collect(),
            normalization,
        }
    }

    /// Overall RMS over paths and points divided by the normalization.
    pub fn normalized_rms(&self) -> f64 {
        let ms = self.rms.iter().map(|r| r * r).sum::<f64>() / self.rms.len() as f64;
        ms.sqrt() / self.normalization
    }

    pub fn normalized_max(&self) -> f64 {
        self.max.iter().cloned().fold(0.0, f64::max) / self.normalization
    }
}

pub fn write_residuals(path: &Path, reports: &[&ResidualReport]) -> Result<()> {
    let mut w = CsvWriter::create(path, &["condition", "t", "rms", "max", "normalization"])?;
    for r in reports {
        for k in 0..r.times.len() {
            w.row(&[
                r.condition.name().to_string(),
                fmt_f(r.times[k]),
                fmt_f(r.rms[k]),
                fmt_f(r.max[k]),
                fmt_f(r.normalization),
            ])?;
        }
    }
    w.finish()
}

/// Adjoints are always represented through the rederived composition; only
/// the controls on the trajectory come from the mode under test.
fn rederived_gains(solved: &Solved) -> Result<Cow<'_, GainSet>> {
    if solved.gains.mode == GainMode::Rederived {
        return Ok(Cow::Borrowed(&solved.gains));
    }
    let l = &solved.leader;
    Ok(Cow::Owned(coefficients::build_gains(
        &solved.spec,
        &solved.grid,
        &l.p1,
        &l.p1c,
        &l.p2c,
        GainMode::Rederived,
        solved.gains.dtilde1,
    )?))
}

fn pointwise(solved: &Solved, k: usize) -> Result<Pointwise> {
    Pointwise::new(&solved.spec, solved.grid.t(k), &solved.follower.p1[k])
}

/// Per grid point: (rms |r|, max |r|, sum |u|^2) across paths.
fn reduce_rows(n_paths: usize, f: impl Fn(usize) -> (Vector, Vector) + Sync) -> (f64, f64, f64) {
    let mut ss = 0.0;
    let mut mx: f64 = 0.0;
    let mut usq = 0.0;
    for p in 0..n_paths {
        let (r, u) = f(p);
        let nr = r.norm();
        ss += nr * nr;
        mx = mx.max(nr);
        usq += u.norm_squared();
    }
    ((ss / n_paths as f64).sqrt(), mx, usq)
}

struct FollowerStep {
    n1: Mat,
    b1t: Mat,
    d1t: Mat,
    p1: Mat,
    c: Mat,
    d1: Mat,
    d2: Mat,
    pp: Mat,
    zh: Mat,
}

/// r = Z^^-1 [N1 u1 + B1'(P1 x^ + phi^) + D1'(P1(C x^ + D1 u1 + D2 u2^) + gamma^)]
/// along every path, with phi^ and gamma^ the second blocks of the
/// filtered augmented adjoints.
pub fn follower_stationarity(solved: &Solved, traj: &TrajectorySet) -> ResidualReport {
    try_follower_stationarity(solved, traj).expect("gain tables were built for this grid")
}

pub fn try_follower_stationarity(solved: &Solved, traj: &TrajectorySet) -> Result<ResidualReport> {
    let spec = &solved.spec;
    let n = spec.n;
    let nn = 2 * n;
    let red = rederived_gains(solved)?;
    let sel = Selectors::new(nn);
    let steps: Vec<FollowerStep> = (0..traj.n_points)
        .map(|k| {
            let co = spec.at(solved.grid.t(k));
            let p1c = &solved.leader.p1c[k];
            FollowerStep {
                n1: co.n1.clone(),
                b1t: co.b1.transpose(),
                d1t: co.d1.transpose(),
                p1: solved.follower.p1[k].clone(),
                c: co.c.clone(),
                d1: co.d1.clone(),
                d2: co.d2.clone(),
                pp: p1c + &solved.leader.p2c[k],
                zh: (p1c * &red.at[k].s * &sel.h).rows(n, n).into_owned(),
            }
        })
        .collect();
    let rows: Vec<(f64, f64, f64)> = (0..traj.n_points)
        .into_par_iter()
        .map(|k| {
            let s = &steps[k];
            reduce_rows(traj.n_paths, |p| {
                let v = traj.v(p, k);
                let xh = traj.xhat.vector(p, k);
                let u1 = traj.u1.vector(p, k);
                let u2h = traj.u2_hat.vector(p, k);
                let xah = traj.xaug_hat.vector(p, k);
                let phih = (&s.pp * &xah + traj.p3_hat.vector(p, k)).rows(n, n).into_owned();
                let gammah = &s.zh * &v;
                let inner = &s.n1 * &u1
                    + &s.b1t * (&s.p1 * &xh + phih)
                    + &s.d1t * (&s.p1 * (&s.c * &xh + &s.d1 * &u1 + &s.d2 * &u2h) + gammah);
                (inner / traj.zhat.get(p, k, 0), u1)
            })
        })
        .collect();
    Ok(ResidualReport::from_rows(Condition::FollowerMc, traj.times.clone(), rows, traj.n_paths))
}

struct LeaderStep {
    n2: Mat,
    b3t: Mat,
    b3tt: Mat,
    b2t: Mat,
    b2tt: Mat,
    pp: Mat,
    dz: Mat,
}

/// r = N2 u2 + B3'X + B3~'X^ + B2'Phi + B2~'Phi^ + D2'Z + D2~'Z^ along
/// every path.
pub fn leader_stationarity(solved: &Solved, traj: &TrajectorySet) -> ResidualReport {
    try_leader_stationarity(solved, traj).expect("gain tables were built for this grid")
}

pub fn try_leader_stationarity(solved: &Solved, traj: &TrajectorySet) -> Result<ResidualReport> {
    let nn = 2 * solved.spec.n;
    let red = rederived_gains(solved)?;
    let sel = Selectors::new(nn);
    let steps: Vec<LeaderStep> = (0..traj.n_points)
        .map(|k| {
            let pw = pointwise(solved, k)?;
            let g = &pw.aug;
            let p1c = &solved.leader.p1c[k];
            let z = p1c * &red.at[k].s;
            let dz = g.d2.transpose() * &z + g.d2t.transpose() * &z * &sel.h;
            Ok(LeaderStep {
                n2: pw.k.n2.clone(),
                b3t: g.b3.transpose(),
                b3tt: g.b3t.transpose(),
                b2t: g.b2.transpose(),
                b2tt: g.b2t.transpose(),
                pp: p1c + &solved.leader.p2c[k],
                dz,
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(f64, f64, f64)> = (0..traj.n_points)
        .into_par_iter()
        .map(|k| {
            let s = &steps[k];
            reduce_rows(traj.n_paths, |p| {
                let v = traj.v(p, k);
                let x = traj.xaug.vector(p, k);
                let xh = traj.xaug_hat.vector(p, k);
                let u2 = traj.u2.vector(p, k);
                let phi = traj.phi_aug.vector(p, k);
                let phih = &s.pp * &xh + traj.p3_hat.vector(p, k);
                let r = &s.n2 * &u2 + &s.b3t * &x + &s.b3tt * &xh + &s.b2t * phi + &s.b2tt * phih + &s.dz * &v;
                (r, u2)
            })
        })
        .collect();
    Ok(ResidualReport::from_rows(Condition::LeaderMc, traj.times.clone(), rows, traj.n_paths))
}

/// Outcome of adding a constant offset to one player's control on an
/// equilibrium trajectory and recomputing that player's residual.
#[derive(Debug, Clone, Serialize)]
pub struct FaultCheck {
    pub player: Player,
    pub delta: f64,
    pub clean: f64,
    pub faulty: f64,
    pub tolerance: f64,
    pub fires: bool,
}

/// Shift every component of u1 (or u2) by `delta`.
pub fn inject_control_fault(traj: &TrajectorySet, player: Player, delta: f64) -> TrajectorySet {
    let mut t = traj.clone();
    let f = match player {
        Player::Follower => &mut t.u1,
        Player::Leader => &mut t.u2,
    };
    f.data.iter_mut().for_each(|u| *u += delta);
    t
}

pub fn fault_check(solved: &Solved, traj: &TrajectorySet, player: Player, delta: f64, tolerance: f64) -> FaultCheck {
    let res = |t: &TrajectorySet| match player {
        Player::Follower => follower_stationarity(solved, t),
        Player::Leader => leader_stationarity(solved, t),
    };
    let clean = res(traj).normalized_rms();
    let faulty = res(&inject_control_fault(traj, player, delta)).normalized_rms();
    FaultCheck { player, delta, clean, faulty, tolerance, fires: faulty > tolerance }
}

// ---------------------------------------------------------------------------
// Follower best response.

/// Whether the leader's realized process is declared a functional of the
/// observation history only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adaptedness {
    Observation,
    /// Depends on W or x~ directly; a filtered version must be supplied.
    Full,
}

/// u2^ = gain(t) S(t) + offset(t) with S a linear Gaussian filter state
/// dS = drift S dt + diffusion dW^~.
#[derive(Debug, Clone)]
pub struct AffineHat {
    pub state: Field,
    pub drift: Vec<Mat>,
    pub diffusion: Vec<Vector>,
    pub gain: Vec<Mat>,
    pub offset: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub enum LeaderProcess {
    /// Deterministic time function on the grid.
    TimeFunction(Vec<Vector>),
    Realized {
        u2: Field,
        u2_hat: Option<Field>,
        adapted: Adaptedness,
        affine: Option<AffineHat>,
        /// Regression state for the LSMC route; defaults to (x~^, Y).
        regress_on: Option<Field>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiHatRoute {
    /// Backward linear ODE for phi^ = Gamma S + g.
    Affine,
    Lsmc { degree: usize },
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub u1: Field,
    pub x: Field,
    pub xhat: Field,
    pub phi_hat: Field,
    pub beta: Field,
    pub per_path_j1: Vec<f64>,
    pub j1: CostEstimate,
}

/// Realized (u2, u2^) fields on the grid.
fn leader_fields(lp: &LeaderProcess, n_paths: usize, n_points: usize, m2: usize) -> Result<(Field, Field)> {
    match lp {
        LeaderProcess::TimeFunction(u) => {
            if u.len() != n_points {
                return Err(SlqError::DimensionMismatch("leader time function not on the grid".into()));
            }
            let mut f = Field::zeros(n_paths, n_points, m2);
            for p in 0..n_paths {
                for (k, v) in u.iter().enumerate() {
                    f.set(p, k, v.as_slice());
                }
            }
            Ok((f.clone(), f))
        }
        LeaderProcess::Realized { u2, u2_hat, adapted, .. } => match (u2_hat, adapted) {
            (Some(h), _) => Ok((u2.clone(), h.clone())),
            (None, Adaptedness::Observation) => Ok((u2.clone(), u2.clone())),
            (None, Adaptedness::Full) => Err(SlqError::NotObservationAdapted(
                "leader process depends on W or x~ and no filtered version was supplied".into(),
            )),
        },
    }
}

fn lerp(a: &Mat, b: &Mat) -> Mat {
    (a + b) * 0.5
}

/// Backward RK4 for -dGamma/dt = A~'Gamma + Gamma D + S~3 K,
/// -dg/dt = A~'g + S~3 o, with Gamma(T) = 0, g(T) = 0.
/// Midpoint coefficients are linear interpolants of the grid values.
pub fn solve_gamma(
    fol: &[FollowerCoeffs],
    drift: &[Mat],
    gain: &[Mat],
    offset: &[Vector],
    dt: f64,
) -> (Vec<Mat>, Vec<Vector>) {
    let np = fol.len();
    let n = fol[0].atilde.nrows();
    let d = drift[0].nrows();
    let at: Vec<Mat> = fol.iter().map(|f| f.atilde.transpose()).collect();
    let s3: Vec<&Mat> = fol.iter().map(|f| &f.stilde3).collect();
    let rhs = |a: &Mat, s: &Mat, dr: &Mat, k: &Mat, o: &Vector, gm: &Mat, g: &Vector| -> (Mat, Vector) {
        (a * gm + gm * dr + s * k, a * g + s * o)
    };
    let mut gam = vec![Mat::zeros(n, d); np];
    let mut gv = vec![Vector::zeros(n); np];
    for k in (0..np - 1).rev() {
        let (a1, s1, d1, k1, o1) = (&at[k + 1], s3[k + 1], &drift[k + 1], &gain[k + 1], &offset[k + 1]);
        let (a0, s0, d0, k0, o0) = (&at[k], s3[k], &drift[k], &gain[k], &offset[k]);
        let (am, sm, dm, km, om) = (lerp(a0, a1), lerp(s0, s1), lerp(d0, d1), lerp(k0, k1), (o0 + o1) * 0.5);
        let (g, v) = (&gam[k + 1], &gv[k + 1]);
        let (r1, q1) = rhs(a1, s1, d1, k1, o1, g, v);
        let (r2, q2) = rhs(&am, &sm, &dm, &km, &om, &(g + &r1 * (0.5 * dt)), &(v + &q1 * (0.5 * dt)));
        let (r3, q3) = rhs(&am, &sm, &dm, &km, &om, &(g + &r2 * (0.5 * dt)), &(v + &q2 * (0.5 * dt)));
        let (r4, q4) = rhs(a0, s0, d0, k0, o0, &(g + &r3 * dt), &(v + &q3 * dt));
        gam[k] = g + (r1 + r2 * 2.0 + r3 * 2.0 + r4) * (dt / 6.0);
        gv[k] = v + (q1 + q2 * 2.0 + q3 * 2.0 + q4) * (dt / 6.0);
    }
    (gam, gv)
}

fn follower_coeffs(solved: &Solved) -> Result<Vec<FollowerCoeffs>> {
    let g = &solved.grid;
    (0..=g.n_steps())
        .map(|k| FollowerCoeffs::build(&solved.spec.at(g.t(k)), &solved.follower.p1[k], g.t(k)))
        .collect()
}

/// phi^ and beta from the affine representation.
fn phi_hat_affine(solved: &Solved, fol: &[FollowerCoeffs], hat: &AffineHat, n_paths: usize) -> (Field, Field) {
    let n = solved.spec.n;
    let np = fol.len();
    let (gam, gv) = solve_gamma(fol, &hat.drift, &hat.gain, &hat.offset, solved.grid.dt());
    let beta_t: Vec<Vector> = (0..np).map(|k| &gam[k] * &hat.diffusion[k]).collect();
    let mut phi = Field::zeros(n_paths, np, n);
    let mut beta = Field::zeros(n_paths, np, n);
    for p in 0..n_paths {
        for k in 0..np {
            let v = &gam[k] * hat.state.vector(p, k) + &gv[k];
            phi.set(p, k, v.as_slice());
            beta.set(p, k, beta_t[k].as_slice());
        }
    }
    (phi, beta)
}

/// Explicit backward LSMC: phi^_k = E[phi^_{k+1} + (A~'phi^_{k+1} + S~3 u2^_k) dt | S_k],
/// beta_k = E[phi^_{k+1} dW^~_k | S_k] / dt.
fn phi_hat_lsmc(solved: &Solved, fol: &[FollowerCoeffs], fp: &FilterPaths, u2h: &Field, state: &Field, degree: usize) -> Result<(Field, Field)> {
    let n = solved.spec.n;
    let np = fol.len();
    let npaths = fp.n_paths();
    let dt = solved.grid.dt();
    let d = state.dim;
    let mut phi = Field::zeros(npaths, np, n);
    let mut beta = Field::zeros(npaths, np, n);
    let mut states = Mat::zeros(npaths, d);
    for k in (0..np - 1).rev() {
        let at = fol[k].atilde.transpose();
        let mut ys = Mat::zeros(npaths, 2 * n);
        for p in 0..npaths {
            let next = phi.vector(p, k + 1);
            let y = &next + (&at * &next + &fol[k].stilde3 * u2h.vector(p, k)) * dt;
            let dwh = fp.dwhat.get(p, k, 0);
            for j in 0..n {
                ys[(p, j)] = y[j];
                ys[(p, n + j)] = next[j] * dwh / dt;
            }
            for j in 0..d {
                states[(p, j)] = state.get(p, k, j);
            }
        }
        let reduced = principal_coordinates(&states);
        let reg = Regression::fit(&reduced, &ys, degree, k)?;
        for p in 0..npaths {
            let row: Vec<f64> = reduced.row(p).iter().cloned().collect();
            let out = reg.predict(&row);
            phi.set(p, k, &out.as_slice()[..n]);
            beta.set(p, k, &out.as_slice()[n..]);
        }
    }
    Ok((phi, beta))
}

/// Standardized principal coordinates of the rows of `m`, dropping
/// directions with variance below 1e-8 of the largest. The polynomial span
/// is unchanged while near-collinear state components are removed.
fn principal_coordinates(m: &Mat) -> Mat {
    let rows = m.nrows() as f64;
    let mut z = m.clone();
    for mut col in z.column_iter_mut() {
        let mean = col.sum() / rows;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / rows).sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            col /= sd;
        } else {
            col.fill(0.0);
        }
    }
    let cov = z.transpose() * &z / rows;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-8 * top && top > 0.0).collect();
    let basis = eig.eigenvectors.select_columns(keep.iter());
    z * basis
}

/// Default regression state (x~^, Y).
fn observation_state(fp: &FilterPaths) -> Field {
    let n = fp.xtilde_hat.dim;
    let mut f = Field::zeros(fp.n_paths(), fp.xtilde_hat.n_points, n + 1);
    for p in 0..fp.n_paths() {
        for k in 0..f.n_points {
            let mut v: Vec<f64> = fp.xtilde_hat.at(p, k).to_vec();
            v.push(fp.y.get(p, k, 0));
            f.set(p, k, &v);
        }
    }
    f
}

/// Per-step tables for replaying the follower's state under a given law.
struct ReplayStep {
    a: Mat,
    b1: Mat,
    b2: Mat,
    c: Mat,
    d1: Mat,
    d2: Mat,
    ct: Vector,
    ni: Mat,
    s1t: Mat,
    st: Mat,
    b1t: Mat,
    dtil_t: Mat,
}

fn replay_steps(solved: &Solved, fol: &[FollowerCoeffs]) -> Vec<ReplayStep> {
    let g = &solved.grid;
    (0..fol.len())
        .map(|k| {
            let co = solved.spec.at(g.t(k));
            let f = &fol[k];
            let dtil = match solved.gains.dtilde1 {
                DTilde1::Zero => Mat::zeros(solved.spec.n, solved.spec.m1),
                DTilde1::MinusD1Scaled => -(&co.d1 * &f.ntilde1_inv),
            };
            ReplayStep {
                ct: co.ctilde.column(0).into_owned(),
                ni: f.ntilde1_inv.clone(),
                s1t: f.stilde1.transpose(),
                st: f.stilde.clone(),
                b1t: co.b1.transpose(),
                dtil_t: dtil.transpose(),
                a: co.a,
                b1: co.b1,
                b2: co.b2,
                c: co.c,
                d1: co.d1,
                d2: co.d2,
            }
        })
        .collect()
}

/// Follower perturbation: extra control added to the law given (k, t, x^).
pub type FollowerPerturbation<'a> = &'a (dyn Fn(usize, f64, &Vector) -> Vector + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawVariant {
    Optimal,
    /// u1 = -law, an injected fault.
    SignFlip,
}

struct ReplayOut {
    u1: Field,
    x: Field,
    xhat: Field,
}

#[allow(clippy::too_many_arguments)]
fn replay_follower(
    solved: &Solved,
    steps: &[ReplayStep],
    fp: &FilterPaths,
    u2: &Field,
    u2h: &Field,
    phi: &Field,
    beta: &Field,
    variant: LawVariant,
    perturb: Option<FollowerPerturbation>,
) -> ReplayOut {
    let spec = &solved.spec;
    let (n, m1) = (spec.n, spec.m1);
    let np = steps.len();
    let ns = np - 1;
    let dt = solved.grid.dt();
    let times = solved.grid.times();
    let per: Vec<[Vec<f64>; 3]> = (0..fp.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out: [Vec<f64>; 3] = Default::default();
            let mut x = spec.x0.clone();
            let mut xh = spec.x0.clone();
            for k in 0..np {
                let s = &steps[k];
                let u2k = u2.vector(p, k);
                let u2hk = u2h.vector(p, k);
                let inner = &s.s1t * &xh + &s.st * &u2hk + &s.b1t * phi.vector(p, k) + &s.dtil_t * beta.vector(p, k);
                let mut u1 = -(&s.ni * inner);
                if variant == LawVariant::SignFlip {
                    u1 = -u1;
                }
                if let Some(f) = perturb {
                    u1 += f(k, times[k], &xh);
                }
                out[0].extend(u1.iter());
                out[1].extend(x.iter());
                out[2].extend(xh.iter());
                if k == ns {
                    break;
                }
                let dw = fp.dw.get(p, k, 0);
                let dwt = fp.dwt.get(p, k, 0);
                let dwh = fp.dwhat.get(p, k, 0);
                let xn = &x
                    + (&s.a * &x + &s.b1 * &u1 + &s.b2 * &u2k) * dt
                    + (&s.c * &x + &s.d1 * &u1 + &s.d2 * &u2k) * dw
                    + &s.ct * dwt;
                xh = &xh + (&s.a * &xh + &s.b1 * &u1 + &s.b2 * &u2hk) * dt + &s.ct * dwh;
                x = xn;
            }
            out
        })
        .collect();
    let mut cols: Vec<Vec<Vec<f64>>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for rec in per {
        for (i, v) in rec.into_iter().enumerate() {
            cols[i].push(v);
        }
    }
    let mut it = cols.into_iter();
    ReplayOut {
        u1: Field::from_paths(it.next().unwrap(), np, m1),
        x: Field::from_paths(it.next().unwrap(), np, n),
        xhat: Field::from_paths(it.next().unwrap(), np, n),
    }
}

fn path_costs(solved: &Solved, x: &Field, u: &Field, player: Player) -> Vec<f64> {
    let tab = CostTables::new(&solved.spec, &solved.grid, player);
    (0..x.n_paths).into_par_iter().map(|p| tab.path_cost(x.path(p), u.path(p), None)).collect()
}

/// The follower's optimal response to a given leader process, replayed on
/// the noise carried by `fp`.
pub fn follower_best_response(solved: &Solved, fp: &FilterPaths, leader: &LeaderProcess, route: PhiHatRoute) -> Result<BestResponse> {
    best_response_with(solved, fp, leader, route, LawVariant::Optimal, None)
}

pub fn best_response_with(
    solved: &Solved,
    fp: &FilterPaths,
    leader: &LeaderProcess,
    route: PhiHatRoute,
    variant: LawVariant,
    perturb: Option<FollowerPerturbation>,
) -> Result<BestResponse> {
    let spec = &solved.spec;
    let np = solved.grid.n_steps() + 1;
    let npaths = fp.n_paths();
    let (u2, u2h) = leader_fields(leader, npaths, np, spec.m2)?;
    let fol = follower_coeffs(solved)?;
    let (phi, beta) = match (route, leader) {
        (PhiHatRoute::Affine, LeaderProcess::TimeFunction(u)) => {
            let hat = AffineHat {
                state: Field::zeros(npaths, np, 1),
                drift: vec![Mat::zeros(1, 1); np],
                diffusion: vec![Vector::zeros(1); np],
                gain: vec![Mat::zeros(spec.m2, 1); np],
                offset: u.clone(),
            };
            phi_hat_affine(solved, &fol, &hat, npaths)
        }
        (PhiHatRoute::Affine, LeaderProcess::Realized { affine: Some(hat), .. }) => phi_hat_affine(solved, &fol, hat, npaths),
        (PhiHatRoute::Affine, LeaderProcess::Realized { affine: None, .. }) => {
            return Err(SlqError::Config("affine phi^ route needs an affine representation of u2^".into()))
        }
        (PhiHatRoute::Lsmc { degree }, lp) => {
            let state = match lp {
                LeaderProcess::Realized { regress_on: Some(s), .. } => s.clone(),
                _ => observation_state(fp),
            };
            phi_hat_lsmc(solved, &fol, fp, &u2h, &state, degree)?
        }
    };
    let steps = replay_steps(solved, &fol);
    let out = replay_follower(solved, &steps, fp, &u2, &u2h, &phi, &beta, variant, perturb);
    let per_path_j1 = path_costs(solved, &out.x, &out.u1, Player::Follower);
    let j1 = CostEstimate::from_samples(&per_path_j1, Player::Follower);
    Ok(BestResponse { u1: out.u1, x: out.x, xhat: out.xhat, phi_hat: phi, beta, per_path_j1, j1 })
}

/// Affine representation of the equilibrium u2^ in the equilibrium X^.
pub fn equilibrium_hat(solved: &Solved, traj: &TrajectorySet) -> AffineHat {
    let nn = 2 * solved.spec.n;
    let sel = Selectors::new(nn);
    let g = &solved.gains;
    AffineHat {
        state: traj.xaug_hat.clone(),
        drift: g.at.iter().map(|a| sel.block(&a.fhat, 1)).collect(),
        diffusion: (0..traj.n_points).map(|k| ctilde_aug(&solved.spec, solved.grid.t(k))).collect(),
        gain: g.at.iter().map(|a| sel.block(&a.u, 0) + sel.block(&a.u, 1)).collect(),
        offset: vec![Vector::zeros(solved.spec.m2); traj.n_points],
    }
}

/// The leader's archived equilibrium process with its affine filter form.
pub fn archived_leader(solved: &Solved, traj: &TrajectorySet) -> LeaderProcess {
    LeaderProcess::Realized {
        u2: traj.u2.clone(),
        u2_hat: Some(traj.u2_hat.clone()),
        adapted: Adaptedness::Full,
        affine: Some(equilibrium_hat(solved, traj)),
        regress_on: Some(traj.xaug_hat.clone()),
    }
}

fn rms_diff(a: &Field, b: &Field) -> f64 {
    let ss: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.data.len() as f64).sqrt()
}

/// RMS distance between the best response to the archived leader process
/// and the equilibrium follower control.
pub fn best_response_self_consistency(solved: &Solved, sim: &Simulation, route: PhiHatRoute) -> Result<f64> {
    let br = follower_best_response(solved, &sim.filters, &archived_leader(solved, &sim.traj), route)?;
    Ok(rms_diff(&br.u1, &sim.traj.u1))
}

// ---------------------------------------------------------------------------
// Deviation tests.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Constant,
    Ramp,
    /// Proportional to the first component of the follower's x^.
    FeedbackXhat,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Constant, Family::Ramp, Family::FeedbackXhat];

    pub fn name(self) -> &'static str {
        match self {
            Family::Constant => "constant",
            Family::Ramp => "ramp",
            Family::FeedbackXhat => "feedback_xhat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Violated,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    pub player: Player,
    pub family: Family,
    pub epsilons: Vec<f64>,
    /// (mean, std_err) of J(eps) - J(0) per epsilon.
    pub delta_j: Vec<(f64, f64)>,
    pub c: f64,
    pub r2: f64,
    pub verdict: Verdict,
}

pub const DEFAULT_EPSILONS: [f64; 5] = [-0.2, -0.1, 0.0, 0.1, 0.2];

/// Fit dJ = c eps^2 through the origin; returns (c, uncentered R^2).
pub fn quadratic_fit(eps: &[f64], dj: &[f64]) -> (f64, f64) {
    let s4: f64 = eps.iter().map(|e| e.powi(4)).sum();
    let s2y: f64 = eps.iter().zip(dj).map(|(e, y)| e * e * y).sum();
    if s4 == 0.0 {
        return (0.0, 0.0);
    }
    let c = s2y / s4;
    let sse: f64 = eps.iter().zip(dj).map(|(e, y)| (y - c * e * e).powi(2)).sum();
    let sst: f64 = dj.iter().map(|y| y * y).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    (c, r2)
}

pub fn classify(delta_j: &[(f64, f64)], c: f64, r2: f64) -> Verdict {
    if delta_j.iter().any(|(m, se)| *m < -SE_MULT * se) {
        Verdict::Violated
    } else if c > 0.0 && r2 >= MIN_R2 {
        Verdict::Consistent
    } else {
        Verdict::Inconclusive
    }
}

fn report(player: Player, family: Family, eps: &[f64], base: &[f64], runs: Vec<Vec<f64>>) -> DeviationReport {
    let delta_j: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let d: Vec<f64> = r.iter().zip(base).map(|(a, b)| a - b).collect();
            linalg::mean_se(&d)
        })
        .collect();
    let means: Vec<f64> = delta_j.iter().map(|d| d.0).collect();
    let (c, r2) = quadratic_fit(eps, &means);
    let verdict = classify(&delta_j, c, r2);
    DeviationReport { player, family, epsilons: eps.to_vec(), delta_j, c, r2, verdict }
}

fn ramp(t: f64, horizon: f64) -> f64 {
    t / horizon
}

/// Replay the same noise with the leader's archived process fixed and
/// u1 = (best response) + eps v.
pub fn follower_deviation_test(solved: &Solved, sim: &Simulation, family: Family, epsilons: &[f64]) -> Result<DeviationReport> {
    let leader = archived_leader(solved, &sim.traj);
    let base = follower_best_response(solved, &sim.filters, &leader, PhiHatRoute::Affine)?;
    let m1 = solved.spec.m1;
    let horizon = solved.grid.horizon();
    let runs = epsilons
        .iter()
        .map(|&eps| {
            if eps == 0.0 {
                return Ok(base.per_path_j1.clone());
            }
            let f = move |_k: usize, t: f64, xh: &Vector| -> Vector {
                let s = match family {
                    Family::Constant => 1.0,
                    Family::Ramp => ramp(t, horizon),
                    Family::FeedbackXhat => xh[0],
                };
                Vector::from_element(m1, eps * s)
            };
            let br = best_response_with(solved, &sim.filters, &leader, PhiHatRoute::Affine, LawVariant::Optimal, Some(&f))?;
            Ok(br.per_path_j1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(Player::Follower, family, epsilons, &base.per_path_j1, runs))
}

/// dJ1 of the sign-flipped law u1 = -u1* against the optimal response.
pub fn sign_flip_check(solved: &Solved, sim: &Simulation) -> Result<(f64, f64)> {
    let leader = archived_leader(solved, &sim.traj);
    let base = follower_best_response(solved, &sim.filters, &leader, PhiHatRoute::Affine)?;
    let flip = best_response_with(solved, &sim.filters, &leader, PhiHatRoute::Affine, LawVariant::SignFlip, None)?;
    let d: Vec<f64> = flip.per_path_j1.iter().zip(&base.per_path_j1).map(|(a, b)| a - b).collect();
    Ok(linalg::mean_se(&d))
}

/// Leader perturbation v = a(t) + b(t) S with S the equilibrium X^, which
/// keeps u2^ affine in S.
fn leader_perturbation(solved: &Solved, family: Family) -> (Vec<Vector>, Vec<Mat>) {
    let (m2, nn) = (solved.spec.m2, 2 * solved.spec.n);
    let h = solved.grid.horizon();
    solved
        .grid
        .times()
        .iter()
        .map(|&t| match family {
            Family::Constant => (Vector::from_element(m2, 1.0), Mat::zeros(m2, nn)),
            Family::Ramp => (Vector::from_element(m2, ramp(t, h)), Mat::zeros(m2, nn)),
            Family::FeedbackXhat => {
                let mut b = Mat::zeros(m2, nn);
                b.column_mut(0).fill(1.0);
                (Vector::zeros(m2), b)
            }
        })
        .unzip()
}

/// Leader costs for u2 = u2* + eps v after the follower re-solves its best
/// response; also returns the perturbation v per path.
fn leader_run(solved: &Solved, sim: &Simulation, a: &[Vector], b: &[Mat], eps: f64) -> Result<(Vec<f64>, Field)> {
    let traj = &sim.traj;
    let mut hat = equilibrium_hat(solved, traj);
    let m2 = solved.spec.m2;
    let mut u2 = traj.u2.clone();
    let mut u2h = traj.u2_hat.clone();
    let mut vf = Field::zeros(traj.n_paths, traj.n_points, m2);
    for k in 0..traj.n_points {
        hat.gain[k] += &b[k] * eps;
        hat.offset[k] += &a[k] * eps;
        for p in 0..traj.n_paths {
            let v = &a[k] + &b[k] * traj.xaug_hat.vector(p, k);
            vf.set(p, k, v.as_slice());
            let w = traj.u2.vector(p, k) + &v * eps;
            u2.set(p, k, w.as_slice());
            let wh = traj.u2_hat.vector(p, k) + &v * eps;
            u2h.set(p, k, wh.as_slice());
        }
    }
    let lp = LeaderProcess::Realized {
        u2: u2.clone(),
        u2_hat: Some(u2h),
        adapted: Adaptedness::Observation,
        affine: Some(hat),
        regress_on: None,
    };
    let br = follower_best_response(solved, &sim.filters, &lp, PhiHatRoute::Affine)?;
    Ok((path_costs(solved, &br.x, &u2, Player::Leader), vf))
}

/// u2 = u2* + eps v with Y-adapted v; the follower re-solves its best
/// response to every perturbed process.
pub fn leader_deviation_test(solved: &Solved, sim: &Simulation, family: Family, epsilons: &[f64]) -> Result<DeviationReport> {
    let (a, b) = leader_perturbation(solved, family);
    let (base, _) = leader_run(solved, sim, &a, &b, 0.0)?;
    let runs = epsilons
        .iter()
        .map(|&eps| if eps == 0.0 { Ok(base.clone()) } else { leader_run(solved, sim, &a, &b, eps).map(|r| r.0) })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(Player::Leader, family, epsilons, &base, runs))
}

/// In a null channel (B2 = D2 = 0) the perturbation changes only the
/// control cost: dJ2 = eps^2/2 int v'N2 v dt. Returns (measured dJ2 mean,
/// its SE, analytic mean).
pub fn null_channel_check(solved: &Solved, sim: &Simulation, family: Family, eps: f64) -> Result<(f64, f64, f64)> {
    let (a, b) = leader_perturbation(solved, family);
    let (base, _) = leader_run(solved, sim, &a, &b, 0.0)?;
    let (pert, vf) = leader_run(solved, sim, &a, &b, eps)?;
    let d: Vec<f64> = pert.iter().zip(&base).map(|(x, y)| x - y).collect();
    let (m, se) = linalg::mean_se(&d);
    let dt = solved.grid.dt();
    let n2: Vec<Mat> = solved.grid.times().iter().map(|&t| solved.spec.n2.at(t)).collect();
    let analytic: Vec<f64> = (0..vf.n_paths)
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..vf.n_points {
                let v = vf.vector(p, k);
                let w = if k == 0 || k == vf.n_points - 1 { 0.5 } else { 1.0 };
                acc += w * v.dot(&(&n2[k] * &v));
            }
            0.5 * eps * eps * acc * dt
        })
        .collect();
    Ok((m, se, linalg::pairwise_sum(&analytic) / analytic.len() as f64))
}

// ---------------------------------------------------------------------------
// Brute-force oracle.

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Standard Nelder-Mead (reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2) from an axis-aligned simplex.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_evals: usize, ftol: f64) -> NelderMeadResult {
    let d = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }
    let mut converged = false;
    while evals.get() < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[d].1);
        if (worst - best).abs() <= ftol * (1.0 + best.abs()) {
            converged = true;
            break;
        }
        let mut cen = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for i in 0..d {
                cen[i] += x[i] / d as f64;
            }
        }
        let along = |s: f64, w: &[f64]| -> Vec<f64> { (0..d).map(|i| cen[i] + s * (w[i] - cen[i])).collect() };
        let xw = simplex[d].0.clone();
        let xr = along(-1.0, &xw);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0, &xw);
            let fe = eval(&xe);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let x = along(-0.5, &xw);
                let fx = eval(&x);
                (x, fx)
            } else {
                let x = along(0.5, &xw);
                let fx = eval(&x);
                (x, fx)
            };
            if fc < worst.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..d).map(|i| x0[i] + 0.5 * (s.0[i] - x0[i])).collect();
                    let fx = eval(&x);
                    *s = (x, fx);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    NelderMeadResult { x, fx, evals: evals.get(), converged }
}

/// Piecewise-constant affine law u1 = K0(j) + K1(j) x^ on `knots` equal
/// time intervals. Parameters per knot: K0 (m1) then K1 (m1 x n, row-major).
#[derive(Debug, Clone)]
pub struct KnotLaw {
    pub knots: usize,
    pub n: usize,
    pub m1: usize,
    pub params: Vec<f64>,
}

impl KnotLaw {
    pub fn per_knot(n: usize, m1: usize) -> usize {
        m1 + m1 * n
    }

    fn knot_of(&self, k: usize, n_steps: usize) -> usize {
        (k * self.knots / n_steps).min(self.knots - 1)
    }
}

/// Flat per-step tables for fast oracle replays.
struct OracleTables {
    n: usize,
    m1: usize,
    a: Vec<Vec<f64>>,
    b1: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    drive: Vec<Vec<f64>>,
    dnoise: Vec<Vec<f64>>,
    ct: Vec<Vec<f64>>,
    q1: Vec<Vec<f64>>,
    n1: Vec<Vec<f64>>,
    g1: Vec<f64>,
    x0: Vec<f64>,
}

fn flat(m: &Mat) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

fn mv(m: &[f64], x: &[f64], out: &mut [f64]) {
    let c = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..c).map(|j| m[i * c + j] * x[j]).sum();
    }
}

fn quad(m: &[f64], x: &[f64]) -> f64 {
    let c = x.len();
    let mut s = 0.0;
    for i in 0..c {
        for j in 0..c {
            s += x[i] * m[i * c + j] * x[j];
        }
    }
    s
}

impl OracleTables {
    fn new(spec: &GameSpec, grid: &TimeGrid, u2: &[Vector]) -> Self {
        let times = grid.times();
        let cs: Vec<_> = times.iter().map(|&t| spec.at(t)).collect();
        OracleTables {
            n: spec.n,
            m1: spec.m1,
            a: cs.iter().map(|c| flat(&c.a)).collect(),
            b1: cs.iter().map(|c| flat(&c.b1)).collect(),
            c: cs.iter().map(|c| flat(&c.c)).collect(),
            d1: cs.iter().map(|c| flat(&c.d1)).collect(),
            drive: cs.iter().zip(u2).map(|(c, u)| (&c.b2 * u).iter().cloned().collect()).collect(),
            dnoise: cs.iter().zip(u2).map(|(c, u)| (&c.d2 * u).iter().cloned().collect()).collect(),
            ct: cs.iter().map(|c| c.ctilde.column(0).iter().cloned().collect()).collect(),
            q1: cs.iter().map(|c| flat(&c.q1)).collect(),
            n1: cs.iter().map(|c| flat(&c.n1)).collect(),
            g1: flat(&spec.g1),
            x0: spec.x0.iter().cloned().collect(),
        }
    }

    /// J1 on one path under a per-step affine law. The running cost uses
    /// the left-point rule, matching the Euler hold of the control.
    fn path_cost(&self, law: &StepLaw, fp: &FilterPaths, p: usize, dt: f64) -> f64 {
        let (n, m1) = (self.n, self.m1);
        let ns = self.a.len() - 1;
        let mut x = self.x0.clone();
        let mut xh = x.clone();
        let (mut u, mut t1, mut t2) = (vec![0.0; m1], vec![0.0; n], vec![0.0; n]);
        let (mut t3, mut t4) = (vec![0.0; n], vec![0.0; n]);
        let mut acc = 0.0;
        for k in 0..ns {
            mv(&law.k1[k], &xh, &mut u);
            for i in 0..m1 {
                u[i] += law.k0[k][i];
            }
            acc += quad(&self.q1[k], &x) + quad(&self.n1[k], &u);
            let dw = fp.dw.get(p, k, 0);
            let dwt = fp.dwt.get(p, k, 0);
            let dwh = fp.dwhat.get(p, k, 0);
            mv(&self.a[k], &x, &mut t1);
            mv(&self.b1[k], &u, &mut t2);
            mv(&self.c[k], &x, &mut t3);
            mv(&self.d1[k], &u, &mut t4);
            for i in 0..n {
                x[i] += (t1[i] + t2[i] + self.drive[k][i]) * dt + (t3[i] + t4[i] + self.dnoise[k][i]) * dw + self.ct[k][i] * dwt;
            }
            mv(&self.a[k], &xh, &mut t1);
            for i in 0..n {
                xh[i] += (t1[i] + t2[i] + self.drive[k][i]) * dt + self.ct[k][i] * dwh;
            }
        }
        0.5 * (acc * dt + quad(&self.g1, &x))
    }
}

/// u1 = k0[k] + k1[k] x^ at every grid step; k1 row-major m1 x n.
#[derive(Debug, Clone)]
pub struct StepLaw {
    pub k0: Vec<Vec<f64>>,
    pub k1: Vec<Vec<f64>>,
}

impl KnotLaw {
    pub fn expand(&self, n_steps: usize) -> StepLaw {
        let pk = Self::per_knot(self.n, self.m1);
        let (k0, k1) = (0..=n_steps)
            .map(|k| {
                let j = self.knot_of(k, n_steps);
                let base = &self.params[j * pk..(j + 1) * pk];
                (base[..self.m1].to_vec(), base[self.m1..].to_vec())
            })
            .unzip();
        StepLaw { k0, k1 }
    }
}

/// The optimal follower law against a deterministic leader control, in
/// per-step affine form: k1 = -N~1^-1 S~1', k0 = -N~1^-1 (S~ u2 + B1' g).
pub fn equilibrium_step_law(solved: &Solved, u2: &[Vector]) -> Result<StepLaw> {
    let fol = follower_coeffs(solved)?;
    let np = fol.len();
    let m2 = solved.spec.m2;
    let (_, g) = solve_gamma(&fol, &vec![Mat::zeros(1, 1); np], &vec![Mat::zeros(m2, 1); np], u2, solved.grid.dt());
    let (k0, k1) = (0..np)
        .map(|k| {
            let f = &fol[k];
            let b1t = solved.spec.b1.at(solved.grid.t(k)).transpose();
            let k1 = -(&f.ntilde1_inv * f.stilde1.transpose());
            let k0 = -(&f.ntilde1_inv * (&f.stilde * &u2[k] + b1t * &g[k]));
            (k0.iter().cloned().collect(), flat(&k1))
        })
        .unzip();
    Ok(StepLaw { k0, k1 })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub j_equilibrium: f64,
    pub j_oracle: f64,
    /// Mean and SE of J_oracle - J_equilibrium per path, out of sample.
    pub diff: (f64, f64),
    pub relative_gap: f64,
    pub in_sample_best: f64,
    pub evals: usize,
    pub stalled: bool,
    pub params: Vec<f64>,
    pub beats_equilibrium: bool,
    pub within_5pct: bool,
}

pub struct OracleOptions {
    pub knots: usize,
    pub restarts: usize,
    pub max_evals: usize,
    pub step: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { knots: 10, restarts: 4, max_evals: 6000, step: 0.5 }
    }
}

/// Minimize the Monte Carlo J1 over knot laws against a deterministic
/// leader control, then compare to the optimal law out of sample.
pub fn brute_force_follower_oracle(
    solved: &Solved,
    u2: &[Vector],
    n_paths: usize,
    seed: u64,
    opts: &OracleOptions,
) -> Result<OracleReport> {
    let spec = &solved.spec;
    let grid = &solved.grid;
    let dt = grid.dt();
    let tabs = OracleTables::new(spec, grid, u2);
    let mc = |fp: &FilterPaths, law: &StepLaw| -> Vec<f64> {
        (0..fp.n_paths()).into_par_iter().map(|p| tabs.path_cost(law, fp, p, dt)).collect()
    };
    let noise_in = paths::generate_noise(seed, n_paths, grid)?;
    let fp_in = paths::simulate_xtilde_and_filter(spec, grid, &noise_in)?;
    let dim = opts.knots * KnotLaw::per_knot(spec.n, spec.m1);
    let mk = |params: &[f64]| KnotLaw { knots: opts.knots, n: spec.n, m1: spec.m1, params: params.to_vec() };
    let ns = grid.n_steps();
    let obj = |params: &[f64]| linalg::pairwise_sum(&mc(&fp_in, &mk(params).expand(ns))) / n_paths as f64;
    let mut x = vec![0.0; dim];
    let mut best = f64::INFINITY;
    let mut evals = 0;
    let mut stalled = true;
    for r in 0..opts.restarts {
        let res = nelder_mead(&obj, &x, opts.step / (1 + r) as f64, opts.max_evals, 1e-10);
        evals += res.evals;
        let improved = res.fx < best - 1e-9 * (1.0 + best.abs());
        if res.fx <= best {
            best = res.fx;
            x = res.x;
        }
        if res.converged && !improved {
            stalled = false;
            break;
        }
    }
    let noise_out = paths::generate_noise(seed.wrapping_add(1), n_paths, grid)?;
    let fp_out = paths::simulate_xtilde_and_filter(spec, grid, &noise_out)?;
    let oracle = mc(&fp_out, &mk(&x).expand(ns));
    let equilibrium = mc(&fp_out, &equilibrium_step_law(solved, u2)?);
    let d: Vec<f64> = oracle.iter().zip(&equilibrium).map(|(a, b)| a - b).collect();
    let diff = linalg::mean_se(&d);
    let j_oracle = linalg::pairwise_sum(&oracle) / n_paths as f64;
    let j_equilibrium = linalg::pairwise_sum(&equilibrium) / n_paths as f64;
    Ok(OracleReport {
        j_equilibrium,
        j_oracle,
        diff,
        relative_gap: (j_oracle - j_equilibrium) / j_equilibrium.abs(),
        in_sample_best: best,
        evals,
        stalled,
        params: x,
        beats_equilibrium: diff.0 < -SE_MULT * diff.1,
        within_5pct: j_oracle <= 1.05 * j_equilibrium,
    })
}

/// J1 of a given knot law on fresh noise; used for sanity checks.
pub fn step_law_cost(solved: &Solved, u2: &[Vector], law: &StepLaw, fp: &FilterPaths) -> f64 {
    let tabs = OracleTables::new(&solved.spec, &solved.grid, u2);
    let dt = solved.grid.dt();
    let v: Vec<f64> = (0..fp.n_paths()).map(|p| tabs.path_cost(law, fp, p, dt)).collect();
    linalg::pairwise_sum(&v) / v.len() as f64
}

// ---------------------------------------------------------------------------
// Gain-mode arbitration.

#[derive(Debug, Clone, Serialize)]
pub struct ModeComparison {
    pub scenario: String,
    pub rederived: f64,
    /// None when the printed gains cannot be formed on this instance.
    pub verbatim: Option<f64>,
    pub verbatim_error: Option<String>,
    pub rederived_wins: bool,
}

pub fn gain_mode_comparison(name: &str, spec: &GameSpec, grid: &TimeGrid, n_paths: usize, seed: u64, dtilde1: DTilde1) -> Result<ModeComparison> {
    let noise = paths::generate_noise(seed, n_paths, grid)?;
    let run = |mode| -> Result<f64> {
        let s = pipeline::solve(spec, grid, SolveOptions { mode, dtilde1 })?;
        let sim = s.simulate(&noise)?;
        Ok(try_leader_stationarity(&s, &sim.traj)?.normalized_rms())
    };
    let rederived = run(GainMode::Rederived)?;
    let (verbatim, verbatim_error) = match run(GainMode::Verbatim) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let rederived_wins = verbatim.map_or(true, |v| rederived <= v);
    Ok(ModeComparison { scenario: name.to_string(), rederived, verbatim, verbatim_error, rederived_wins })
}

pub fn write_mode_comparison(path: &Path, rows: &[ModeComparison]) -> Result<()> {
    let mut w = CsvWriter::create(path, &["scenario", "rederived_residual", "verbatim_residual", "rederived_le_verbatim", "note"])?;
    for r in rows {
        w.row(&[
            r.scenario.clone(),
            fmt_f(r.rederived),
            r.verbatim.map(fmt_f).unwrap_or_else(|| "NA".into()),
            r.rederived_wins.to_string(),
            r.verbatim_error.clone().unwrap_or_default().replace(',', ";"),
        ])?;
    }
    w.finish()
}

pub fn write_deviations(path: &Path, reports: &[DeviationReport]) -> Result<()> {
    let mut w = CsvWriter::create(path, &["player", "family", "epsilon", "delta_j", "std_err", "c", "r2", "verdict"])?;
    for r in reports {
        for (e, (m, se)) in r.epsilons.iter().zip(&r.delta_j) {
            w.row(&[
                r.player.name().to_string(),
                r.family.name().to_string(),
                fmt_f(*e),
                fmt_f(*m),
                fmt_f(*se),
                fmt_f(r.c),
                fmt_f(r.r2),
                format!("{:?}", r.verdict).to_lowercase(),
            ])?;
        }
    }
    w.finish()
}
