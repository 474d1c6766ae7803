//! Backward RK4 integration of the follower Riccati equation and the
//! leader's coupled (P1c, P2c) system.

use std::path::Path;

use crate::coefficients::{compose, leader_rhs, Augmented, Pointwise, Selectors};
use crate::error::{Result, SlqError};
use crate::io;
use crate::linalg::{self, sym, Mat};
use crate::model::{Coeffs, GameSpec, TimeGrid};

pub const BLOWUP_NORM: f64 = 1e12;
pub const A32_MARGIN: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FollowerRiccatiSolution {
    pub times: Vec<f64>,
    pub p1: Vec<Mat>,
    pub ntilde1_min_eig: Vec<f64>,
    pub solved: bool,
}

impl FollowerRiccatiSolution {
    pub fn worst_a32_margin(&self) -> f64 {
        self.ntilde1_min_eig.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct LeaderRiccatiSolution {
    pub times: Vec<f64>,
    pub p1c: Vec<Mat>,
    pub p2c: Vec<Mat>,
    /// Follower P1 integrated alongside, so stage values are exact.
    pub p1: Vec<Mat>,
    pub cond_ntilde2: Vec<f64>,
    pub cond_nbar2: Vec<f64>,
    pub blowup_at: Option<f64>,
}

fn ntilde1_checked(k: &Coeffs, p: &Mat, t: f64) -> Result<(Mat, f64)> {
    let nt = sym(&(&k.n1 + k.d1.transpose() * p * &k.d1));
    let me = linalg::min_eig_sym(&nt);
    if !(me > A32_MARGIN) {
        return Err(SlqError::AssumptionA32Violated { t, min_eig: me });
    }
    Ok((nt, me))
}

/// dP1/dt in expanded form.
pub fn follower_rhs(k: &Coeffs, p: &Mat, t: f64) -> Result<Mat> {
    let (nt, _) = ntilde1_checked(k, p, t)?;
    let s = p * &k.b1 + k.c.transpose() * p * &k.d1;
    let sol = nt.cholesky().ok_or(SlqError::AssumptionA32Violated { t, min_eig: 0.0 })?.solve(&s.transpose());
    Ok(-(p * &k.a) - k.a.transpose() * p - k.c.transpose() * p * &k.c - &k.q1 + &s * sol)
}

/// dP1/dt written with the follower's tilde matrices.
pub fn follower_rhs_compact(k: &Coeffs, p: &Mat, t: f64) -> Result<Mat> {
    let f = crate::coefficients::FollowerCoeffs::build(k, p, t)?;
    Ok(-(p * &k.a) - k.a.transpose() * p - k.c.transpose() * p * &k.c - &k.q1 + &f.sstilde1)
}

fn check_norm(m: &Mat, t: f64) -> Result<()> {
    let nrm = m.amax();
    if !nrm.is_finite() || nrm > BLOWUP_NORM {
        return Err(SlqError::BlowUp { t, norm: nrm });
    }
    Ok(())
}

fn rk4_step<S, F>(state: &S, t: f64, dt: f64, f: &mut F) -> Result<S>
where
    S: Clone + Axpy,
    F: FnMut(f64, &S) -> Result<S>,
{
    let k1 = f(t, state)?;
    let k2 = f(t - 0.5 * dt, &state.axpy(-0.5 * dt, &k1))?;
    let k3 = f(t - 0.5 * dt, &state.axpy(-0.5 * dt, &k2))?;
    let k4 = f(t - dt, &state.axpy(-dt, &k3))?;
    let mut out = state.axpy(-dt / 6.0, &k1);
    out = out.axpy(-dt / 3.0, &k2);
    out = out.axpy(-dt / 3.0, &k3);
    Ok(out.axpy(-dt / 6.0, &k4))
}

/// Tuple of matrices that can form s + a*d.
pub trait Axpy {
    fn axpy(&self, a: f64, d: &Self) -> Self;
}

impl Axpy for Vec<Mat> {
    fn axpy(&self, a: f64, d: &Self) -> Self {
        self.iter().zip(d).map(|(s, x)| s + x * a).collect()
    }
}

pub fn solve_follower_riccati(spec: &GameSpec, grid: &TimeGrid) -> Result<FollowerRiccatiSolution> {
    spec.check_dims()?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let times = grid.times();
    let mut p1 = vec![Mat::zeros(spec.n, spec.n); n + 1];
    let mut me = vec![0.0; n + 1];
    p1[n] = spec.g1.clone();
    let mut rhs = |t: f64, s: &Vec<Mat>| -> Result<Vec<Mat>> { Ok(vec![follower_rhs(&spec.at(t), &s[0], t)?]) };
    for i in (0..n).rev() {
        let t = times[i + 1];
        me[i + 1] = ntilde1_checked(&spec.at(t), &p1[i + 1], t)?.1;
        let next = rk4_step(&vec![p1[i + 1].clone()], t, dt, &mut rhs)?;
        let p = sym(&next[0]);
        check_norm(&p, times[i])?;
        p1[i] = p;
    }
    me[0] = ntilde1_checked(&spec.at(0.0), &p1[0], 0.0)?.1;
    Ok(FollowerRiccatiSolution { times, p1, ntilde1_min_eig: me, solved: true })
}

struct LeaderEval {
    d: Vec<Mat>,
    cond_nt: f64,
    cond_nb: f64,
}

fn leader_eval(spec: &GameSpec, sel: &Selectors, t: f64, s: &[Mat]) -> Result<LeaderEval> {
    let k = spec.at(t);
    let dp1 = follower_rhs(&k, &s[0], t)?;
    let pw = Pointwise::new(spec, t, &s[0])?;
    let c = compose(&pw.aug, &pw.bars.n2_inv, &s[1], &s[2], sel, t)?;
    let (d1, d2) = leader_rhs(&c, &s[1], &s[2], sel);
    Ok(LeaderEval { d: vec![dp1, d1, d2], cond_nt: c.cond_ntilde2, cond_nb: c.cond_nbar2 })
}

pub fn solve_leader_riccati(spec: &GameSpec, grid: &TimeGrid, follower: &FollowerRiccatiSolution) -> Result<LeaderRiccatiSolution> {
    let n = grid.n_steps();
    let nn = 2 * spec.n;
    let dt = grid.dt();
    let times = grid.times();
    if follower.p1.len() != n + 1 {
        return Err(SlqError::DimensionMismatch("follower solution on a different grid".into()));
    }
    let sel = Selectors::new(nn);
    let mut sol = LeaderRiccatiSolution {
        times: times.clone(),
        p1c: vec![Mat::zeros(nn, nn); n + 1],
        p2c: vec![Mat::zeros(nn, nn); n + 1],
        p1: vec![Mat::zeros(spec.n, spec.n); n + 1],
        cond_ntilde2: vec![f64::NAN; n + 1],
        cond_nbar2: vec![f64::NAN; n + 1],
        blowup_at: None,
    };
    let mut g2c = Mat::zeros(nn, nn);
    g2c.view_mut((0, 0), (spec.n, spec.n)).copy_from(&spec.g2);
    sol.p1c[n] = g2c;
    sol.p1[n] = spec.g1.clone();
    let mut rhs = |t: f64, s: &Vec<Mat>| -> Result<Vec<Mat>> { Ok(leader_eval(spec, &sel, t, s)?.d) };
    for i in (0..n).rev() {
        let t = times[i + 1];
        let state = vec![sol.p1[i + 1].clone(), sol.p1c[i + 1].clone(), sol.p2c[i + 1].clone()];
        let ev = leader_eval(spec, &sel, t, &state)?;
        sol.cond_ntilde2[i + 1] = ev.cond_nt;
        sol.cond_nbar2[i + 1] = ev.cond_nb;
        let next = match rk4_step(&state, t, dt, &mut rhs) {
            Ok(s) => s,
            Err(SlqError::BlowUp { t, norm }) => return Err(SlqError::BlowUp { t, norm }),
            Err(e) => return Err(e),
        };
        let (p1, p1c, p2c) = (sym(&next[0]), sym(&next[1]), sym(&next[2]));
        let nrm = p1c.amax().max(p2c.amax());
        if !nrm.is_finite() || nrm > BLOWUP_NORM {
            sol.blowup_at = Some(times[i]);
            return Err(SlqError::LeaderBlowUp { t: times[i], partial: Box::new(sol) });
        }
        check_norm(&p1, times[i])?;
        sol.p1[i] = p1;
        sol.p1c[i] = p1c;
        sol.p2c[i] = p2c;
    }
    let ev = leader_eval(spec, &sel, 0.0, &[sol.p1[0].clone(), sol.p1c[0].clone(), sol.p2c[0].clone()])?;
    sol.cond_ntilde2[0] = ev.cond_nt;
    sol.cond_nbar2[0] = ev.cond_nb;
    Ok(sol)
}

/// Right-hand side of the decoupled first leader equation written as a
/// standard LQ Riccati equation in the augmented state.
pub fn standalone_p1c_rhs(aug: &Augmented, n2: &Mat, p: &Mat, t: f64) -> Result<Mat> {
    let r = n2 + aug.d2.transpose() * p * &aug.d2;
    let l = aug.b2.transpose() * p + aug.d2.transpose() * p * &aug.c1 + aug.b3.transpose();
    let (ri, _) = linalg::inv_cond(&r).ok_or(SlqError::SingularGainMatrix { t, which: "N2 + D2'P1c D2" })?;
    Ok(-(p * &aug.a1 + aug.a1.transpose() * p + aug.c1.transpose() * p * &aug.c1 + &aug.q2 - l.transpose() * ri * l))
}

/// Integrates the stand-alone P1c equation (co-integrating P1).
pub fn solve_p1c_standalone(spec: &GameSpec, grid: &TimeGrid) -> Result<Vec<Mat>> {
    let n = grid.n_steps();
    let nn = 2 * spec.n;
    let dt = grid.dt();
    let times = grid.times();
    let mut out = vec![Mat::zeros(nn, nn); n + 1];
    let mut g2c = Mat::zeros(nn, nn);
    g2c.view_mut((0, 0), (spec.n, spec.n)).copy_from(&spec.g2);
    out[n] = g2c;
    let mut p1 = spec.g1.clone();
    let mut rhs = |t: f64, s: &Vec<Mat>| -> Result<Vec<Mat>> {
        let k = spec.at(t);
        let dp1 = follower_rhs(&k, &s[0], t)?;
        let pw = Pointwise::new(spec, t, &s[0])?;
        Ok(vec![dp1, standalone_p1c_rhs(&pw.aug, &k.n2, &s[1], t)?])
    };
    for i in (0..n).rev() {
        let next = rk4_step(&vec![p1.clone(), out[i + 1].clone()], times[i + 1], dt, &mut rhs)?;
        p1 = sym(&next[0]);
        out[i] = sym(&next[1]);
        check_norm(&out[i], times[i])?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RiccatiResidual {
    /// Interior grid times at which centered differences are taken.
    pub times: Vec<f64>,
    pub follower_compact: Vec<f64>,
    pub follower_full: Vec<f64>,
    pub leader_p1c: Vec<f64>,
    pub leader_p2c: Vec<f64>,
    pub leader_p1c_standalone: Vec<f64>,
}

fn vmax(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

impl RiccatiResidual {
    pub fn max_follower(&self) -> f64 {
        vmax(&self.follower_full).max(vmax(&self.follower_compact))
    }

    pub fn max_leader(&self) -> f64 {
        vmax(&self.leader_p1c).max(vmax(&self.leader_p2c))
    }

    pub fn max_all(&self) -> f64 {
        self.max_follower().max(self.max_leader()).max(vmax(&self.leader_p1c_standalone))
    }
}

/// Centered finite-difference residual of every Riccati equation at the
/// interior grid points (max-abs entry norm).
pub fn riccati_residual(
    follower: &FollowerRiccatiSolution,
    leader: Option<&LeaderRiccatiSolution>,
    spec: &GameSpec,
    grid: &TimeGrid,
) -> Result<RiccatiResidual> {
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut r = RiccatiResidual::default();
    let sel = Selectors::new(2 * spec.n);
    for i in 1..n {
        let t = follower.times[i];
        let k = spec.at(t);
        let fd = (&follower.p1[i + 1] - &follower.p1[i - 1]) / (2.0 * dt);
        let p = &follower.p1[i];
        r.times.push(t);
        r.follower_full.push((&fd - follower_rhs(&k, p, t)?).amax());
        r.follower_compact.push((&fd - follower_rhs_compact(&k, p, t)?).amax());
        if let Some(l) = leader {
            let ev = leader_eval(spec, &sel, t, &[l.p1[i].clone(), l.p1c[i].clone(), l.p2c[i].clone()])?;
            let fd1 = (&l.p1c[i + 1] - &l.p1c[i - 1]) / (2.0 * dt);
            let fd2 = (&l.p2c[i + 1] - &l.p2c[i - 1]) / (2.0 * dt);
            r.leader_p1c.push((&fd1 - &ev.d[1]).amax());
            r.leader_p2c.push((&fd2 - &ev.d[2]).amax());
            let pw = Pointwise::new(spec, t, &l.p1[i])?;
            r.leader_p1c_standalone.push((&fd1 - standalone_p1c_rhs(&pw.aug, &k.n2, &l.p1c[i], t)?).amax());
        }
    }
    Ok(r)
}

pub fn export_csv(dir: &Path, follower: &FollowerRiccatiSolution, leader: Option<&LeaderRiccatiSolution>) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = vec!["P1.csv".to_string()];
    io::write_matrix_series(&dir.join("P1.csv"), &follower.times, &follower.p1)?;
    if let Some(l) = leader {
        io::write_matrix_series(&dir.join("P1c.csv"), &l.times, &l.p1c)?;
        io::write_matrix_series(&dir.join("P2c.csv"), &l.times, &l.p2c)?;
        let mut w = io::CsvWriter::create(&dir.join("gain_conditioning.csv"), &["t", "cond_ntilde2", "cond_nbar2"])?;
        for i in 0..l.times.len() {
            w.row(&[io::fmt_f(l.times[i]), io::fmt_f(l.cond_ntilde2[i]), io::fmt_f(l.cond_nbar2[i])])?;
        }
        w.finish()?;
        files.extend(["P1c.csv", "P2c.csv", "gain_conditioning.csv"].map(String::from));
    }
    Ok(files)
}
