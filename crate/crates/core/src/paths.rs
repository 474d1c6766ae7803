//! Sample-path engine: Brownian increments, the observation filters, the
//! Girsanov density, the P3 backward equation and the closed loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::coefficients::{GainSet, Selectors};
use crate::error::{Result, SlqError};
use crate::linalg::{Mat, Vector};
use crate::lsmc::Regression;
use crate::model::{GameSpec, TimeGrid};
use crate::riccati::LeaderRiccatiSolution;

#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// Increments indexed `p * n_steps + k`.
    pub dw: Vec<f64>,
    pub dwt: Vec<f64>,
}

pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

pub fn generate_noise(seed: u64, n_paths: usize, grid: &TimeGrid) -> Result<NoiseBundle> {
    if n_paths == 0 {
        return Err(SlqError::Config("n_paths must be at least 1".into()));
    }
    let ns = grid.n_steps();
    let sd = grid.dt().sqrt();
    let per: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p);
            let mut a = Vec::with_capacity(ns);
            let mut b = Vec::with_capacity(ns);
            for _ in 0..ns {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                a.push(x * sd);
                b.push(y * sd);
            }
            (a, b)
        })
        .collect();
    let mut dw = Vec::with_capacity(n_paths * ns);
    let mut dwt = Vec::with_capacity(n_paths * ns);
    for (a, b) in per {
        dw.extend(a);
        dwt.extend(b);
    }
    Ok(NoiseBundle { seed, n_paths, n_steps: ns, dt: grid.dt(), dw, dwt })
}

impl NoiseBundle {
    pub fn dw(&self, p: usize, k: usize) -> f64 {
        self.dw[p * self.n_steps + k]
    }

    pub fn dwt(&self, p: usize, k: usize) -> f64 {
        self.dwt[p * self.n_steps + k]
    }

    /// Sum consecutive increments; the result lives on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseBundle> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(SlqError::Config(format!("cannot coarsen {} steps by {factor}", self.n_steps)));
        }
        let ns = self.n_steps / factor;
        let sum = |v: &[f64]| -> Vec<f64> { v.chunks(factor).map(|c| c.iter().sum()).collect() };
        Ok(NoiseBundle {
            seed: self.seed,
            n_paths: self.n_paths,
            n_steps: ns,
            dt: self.dt * factor as f64,
            dw: sum(&self.dw),
            dwt: sum(&self.dwt),
        })
    }

    /// Keep only the first `n` paths.
    pub fn truncate(&self, n: usize) -> NoiseBundle {
        let n = n.min(self.n_paths);
        NoiseBundle {
            seed: self.seed,
            n_paths: n,
            n_steps: self.n_steps,
            dt: self.dt,
            dw: self.dw[..n * self.n_steps].to_vec(),
            dwt: self.dwt[..n * self.n_steps].to_vec(),
        }
    }
}

/// Per-path, per-grid-point vector-valued record.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub dim: usize,
    pub n_paths: usize,
    pub n_points: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(n_paths: usize, n_points: usize, dim: usize) -> Self {
        Field { dim, n_paths, n_points, data: vec![0.0; n_paths * n_points * dim] }
    }

    fn idx(&self, p: usize, k: usize) -> usize {
        (p * self.n_points + k) * self.dim
    }

    pub fn at(&self, p: usize, k: usize) -> &[f64] {
        let i = self.idx(p, k);
        &self.data[i..i + self.dim]
    }

    pub fn get(&self, p: usize, k: usize, c: usize) -> f64 {
        self.data[self.idx(p, k) + c]
    }

    pub fn vector(&self, p: usize, k: usize) -> Vector {
        Vector::from_column_slice(self.at(p, k))
    }

    pub fn set(&mut self, p: usize, k: usize, v: &[f64]) {
        let i = self.idx(p, k);
        self.data[i..i + self.dim].copy_from_slice(v);
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let n = self.n_points * self.dim;
        &self.data[p * n..(p + 1) * n]
    }

    /// Values of component `c` at point `k` across paths.
    pub fn column(&self, k: usize, c: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.get(p, k, c)).collect()
    }

    /// Assemble from per-path buffers of length n_points*dim.
    pub fn from_paths(paths: Vec<Vec<f64>>, n_points: usize, dim: usize) -> Self {
        let n_paths = paths.len();
        let mut data = Vec::with_capacity(n_paths * n_points * dim);
        for p in paths {
            debug_assert_eq!(p.len(), n_points * dim);
            data.extend(p);
        }
        Field { dim, n_paths, n_points, data }
    }
}

/// Which measure the second noise channel is drawn under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Channels are (W, W~) and Y = int h'x~ dt + W~.
    Physical,
    /// Channels are (W, Y) with Y a Brownian motion; W~ = Y - int h'x~ dt.
    Reference,
}

#[derive(Debug, Clone)]
pub struct FilterPaths {
    pub measure: Measure,
    pub xtilde: Field,
    pub y: Field,
    pub xtilde_hat: Field,
    pub zhat: Field,
    pub z: Field,
    pub zinv: Field,
    /// Increment over [t_k, t_{k+1}]; zero at the last point.
    pub dwhat: Field,
    pub dwt: Field,
    pub dw: Field,
}

impl FilterPaths {
    pub fn n_paths(&self) -> usize {
        self.xtilde.n_paths
    }

    pub fn e(&self, p: usize, k: usize) -> Vector {
        self.xtilde.vector(p, k) - self.xtilde_hat.vector(p, k)
    }
}

pub fn simulate_xtilde_and_filter(spec: &GameSpec, grid: &TimeGrid, noise: &NoiseBundle) -> Result<FilterPaths> {
    simulate_filters_under(spec, grid, noise, Measure::Physical)
}

struct FilterCoeffs {
    c1: Mat,
    c2: Vector,
    c3: Vector,
    h: Vector,
}

pub fn simulate_filters_under(spec: &GameSpec, grid: &TimeGrid, noise: &NoiseBundle, measure: Measure) -> Result<FilterPaths> {
    if noise.n_steps != grid.n_steps() {
        return Err(SlqError::DimensionMismatch("noise and grid step counts differ".into()));
    }
    let n = spec.n;
    let ns = grid.n_steps();
    let np = ns + 1;
    let dt = grid.dt();
    let co: Vec<FilterCoeffs> = (0..np)
        .map(|k| {
            let t = grid.t(k);
            FilterCoeffs {
                c1: spec.c1.at(t),
                c2: spec.c2.at(t).column(0).into_owned(),
                c3: spec.c3.at(t).column(0).into_owned(),
                h: spec.h.at(t).column(0).into_owned(),
            }
        })
        .collect();
    let per: Vec<[Vec<f64>; 9]> = (0..noise.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut out: [Vec<f64>; 9] = Default::default();
            let mut xt = spec.xtilde0.clone();
            let mut xh = spec.xtilde0.clone();
            let (mut y, mut lz, mut lzi, mut lzh) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for k in 0..np {
                let c = &co[k];
                let a = c.h.dot(&xt);
                let ah = c.h.dot(&xh);
                let (dw, dwt, dy) = if k < ns {
                    let dw = noise.dw(p, k);
                    match measure {
                        Measure::Physical => {
                            let dwt = noise.dwt(p, k);
                            (dw, dwt, a * dt + dwt)
                        }
                        Measure::Reference => {
                            let dy = noise.dwt(p, k);
                            (dw, dy - a * dt, dy)
                        }
                    }
                } else {
                    (0.0, 0.0, 0.0)
                };
                let dwh = if k < ns { dy - ah * dt } else { 0.0 };
                out[0].extend(xt.iter());
                out[1].push(y);
                out[2].extend(xh.iter());
                out[3].push(lzh.exp());
                out[4].push(lz.exp());
                out[5].push(lzi.exp());
                out[6].push(dwh);
                out[7].push(dwt);
                out[8].push(dw);
                if k == ns {
                    break;
                }
                let xt_next = &xt + &c.c1 * &xt * dt + &c.c2 * dw + &c.c3 * dwt;
                xh = &xh + &c.c1 * &xh * dt + &c.c3 * dwh;
                xt = xt_next;
                y += dy;
                lz += -a * dwt - 0.5 * a * a * dt;
                lzi += a * dy - 0.5 * a * a * dt;
                lzh += -ah * dwh - 0.5 * ah * ah * dt;
            }
            out
        })
        .collect();
    let mut cols: Vec<Vec<Vec<f64>>> = (0..9).map(|_| Vec::with_capacity(noise.n_paths)).collect();
    for rec in per {
        for (i, v) in rec.into_iter().enumerate() {
            cols[i].push(v);
        }
    }
    let mut it = cols.into_iter();
    let mut next = |dim| Field::from_paths(it.next().unwrap(), np, dim);
    Ok(FilterPaths {
        measure,
        xtilde: next(n),
        y: next(1),
        xtilde_hat: next(n),
        zhat: next(1),
        z: next(1),
        zinv: next(1),
        dwhat: next(1),
        dwt: next(1),
        dw: next(1),
    })
}

/// Density Z and its inverse along one path.
pub fn girsanov_density(fp: &FilterPaths, p: usize) -> (Vec<f64>, Vec<f64>) {
    (fp.z.path(p).to_vec(), fp.zinv.path(p).to_vec())
}

/// Solution of the P3 backward equation. P3^ and Q3 vanish identically
/// (see the README), so only P3 is represented.
#[derive(Debug, Clone)]
pub enum P3Solution {
    Zero { dim: usize },
    /// Regression of P3 at each grid point on (x~^, x~ - x~^).
    Regressed { dim: usize, regs: Vec<Option<Regression>> },
}

pub const P3_DEGREE: usize = 2;

impl P3Solution {
    pub fn dim(&self) -> usize {
        match self {
            P3Solution::Zero { dim } | P3Solution::Regressed { dim, .. } => *dim,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, P3Solution::Zero { .. })
    }

    pub fn eval(&self, k: usize, xth: &[f64], e: &[f64]) -> Vector {
        match self {
            P3Solution::Zero { dim } => Vector::zeros(*dim),
            P3Solution::Regressed { dim, regs } => match &regs[k] {
                None => Vector::zeros(*dim),
                Some(r) => {
                    let s: Vec<f64> = xth.iter().chain(e.iter()).cloned().collect();
                    r.predict(&s)
                }
            },
        }
    }

    pub fn eval_path(&self, fp: &FilterPaths, p: usize, k: usize) -> Vector {
        if self.is_zero() {
            return Vector::zeros(self.dim());
        }
        let e = fp.e(p, k);
        self.eval(k, fp.xtilde_hat.at(p, k), e.as_slice())
    }
}

/// Augmented observation-noise column (C~; 0).
pub fn ctilde_aug(spec: &GameSpec, t: f64) -> Vector {
    let mut v = Vector::zeros(2 * spec.n);
    v.rows_mut(0, spec.n).copy_from(&spec.ctilde.at(t).column(0));
    v
}

/// Backward least-squares Monte Carlo for P3 with driver
/// lambda = Lambda3 P3 + P2c Ct h'(x~ - x~^).
pub fn solve_p3_bsde(
    spec: &GameSpec,
    grid: &TimeGrid,
    gains: &GainSet,
    leader: &LeaderRiccatiSolution,
    fp: &FilterPaths,
    degree: usize,
) -> Result<P3Solution> {
    let dim = 2 * spec.n;
    if GameSpec::is_zero(&spec.h) || GameSpec::is_zero(&spec.c2) {
        return Ok(P3Solution::Zero { dim });
    }
    let ns = grid.n_steps();
    let npaths = fp.n_paths();
    let mut regs: Vec<Option<Regression>> = vec![None; ns + 1];
    let mut cur: Vec<Vector> = vec![Vector::zeros(dim); npaths];
    let mut states = Mat::zeros(npaths, 2 * spec.n);
    for k in (0..ns).rev() {
        let t1 = grid.t(k + 1);
        let h1 = spec.h.at(t1).column(0).into_owned();
        let forcing = &leader.p2c[k + 1] * ctilde_aug(spec, t1);
        let lam3 = &gains.at[k + 1].lam3;
        let mut ys = Mat::zeros(npaths, dim);
        for p in 0..npaths {
            let e1 = fp.e(p, k + 1);
            let lam = lam3 * &cur[p] + &forcing * h1.dot(&e1);
            let y = &cur[p] + lam * grid.dt();
            ys.row_mut(p).copy_from(&y.transpose());
            let e0 = fp.e(p, k);
            for j in 0..spec.n {
                states[(p, j)] = fp.xtilde_hat.get(p, k, j);
                states[(p, spec.n + j)] = e0[j];
            }
        }
        let reg = Regression::fit(&states, &ys, degree, k)?;
        for (p, c) in cur.iter_mut().enumerate() {
            *c = reg.predict(states.row(p).transpose().as_slice());
        }
        regs[k] = Some(reg);
    }
    Ok(P3Solution::Regressed { dim, regs })
}

/// Closed-loop trajectories with recovered adjoints.
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    pub n_paths: usize,
    pub n_points: usize,
    pub times: Vec<f64>,
    pub x: Field,
    pub xhat: Field,
    pub xtilde: Field,
    pub y: Field,
    pub z_density: Field,
    pub zinv_density: Field,
    pub xtilde_hat: Field,
    pub zhat: Field,
    pub dwhat: Field,
    pub dw: Field,
    pub dwt: Field,
    pub xaug: Field,
    pub xaug_hat: Field,
    pub u1: Field,
    pub u2: Field,
    pub u2_hat: Field,
    pub p3: Field,
    pub p3_hat: Field,
    pub q3: Field,
    pub phi_aug: Field,
    pub zaug: Field,
    pub ztaug: Field,
    pub phi: Field,
    pub beta: Field,
    pub q: Field,
    pub k: Field,
    pub ktilde: Field,
}

impl TrajectorySet {
    pub fn fields(&self) -> Vec<(&'static str, &Field)> {
        vec![
            ("x", &self.x),
            ("xhat", &self.xhat),
            ("xtilde", &self.xtilde),
            ("Y", &self.y),
            ("Z_density", &self.z_density),
            ("Zinv_density", &self.zinv_density),
            ("xtilde_hat", &self.xtilde_hat),
            ("Zhat", &self.zhat),
            ("innovation_increment", &self.dwhat),
            ("dW", &self.dw),
            ("dWtilde", &self.dwt),
            ("Xaug", &self.xaug),
            ("Xaug_hat", &self.xaug_hat),
            ("u1", &self.u1),
            ("u2", &self.u2),
            ("u2_hat", &self.u2_hat),
            ("P3", &self.p3),
            ("P3hat", &self.p3_hat),
            ("Q3", &self.q3),
            ("Phi", &self.phi_aug),
            ("Zaug", &self.zaug),
            ("Ztaug", &self.ztaug),
            ("phi", &self.phi),
            ("beta", &self.beta),
            ("q", &self.q),
            ("k", &self.k),
            ("ktilde", &self.ktilde),
        ]
    }

    /// The state vector v = (X, X^, P3, P3^) at (p, k).
    pub fn v(&self, p: usize, k: usize) -> Vector {
        let a = self.xaug.at(p, k);
        let b = self.xaug_hat.at(p, k);
        let c = self.p3.at(p, k);
        let d = self.p3_hat.at(p, k);
        Vector::from_iterator(a.len() * 4, a.iter().chain(b).chain(c).chain(d).cloned())
    }

    pub fn write_long_csv(&self, path: &std::path::Path, max_paths: usize) -> Result<()> {
        use crate::io::{fmt_f, CsvWriter};
        let mut w = CsvWriter::create(path, &["path", "step", "variable", "component", "value"])?;
        for p in 0..self.n_paths.min(max_paths) {
            for k in 0..self.n_points {
                for (name, f) in self.fields() {
                    for (c, v) in f.at(p, k).iter().enumerate() {
                        w.row(&[p.to_string(), k.to_string(), name.to_string(), c.to_string(), fmt_f(*v)])?;
                    }
                }
            }
        }
        w.finish()
    }

    pub fn write_binary(&self, path: &std::path::Path) -> Result<()> {
        let fields = self.fields();
        let dump: Vec<_> = fields.iter().map(|(n, f)| crate::io::DumpField { name: n, dim: f.dim, data: &f.data }).collect();
        crate::io::write_binary(path, self.n_paths, self.n_points, &dump)
    }
}

/// Forward Euler-Maruyama of the augmented state X and its filter X^ under
/// the tabulated gains. Adjoints are filled in by
/// `equilibrium::recover_adjoints`.
pub fn simulate_closed_loop(
    spec: &GameSpec,
    grid: &TimeGrid,
    fp: &FilterPaths,
    gains: &GainSet,
    p3: &P3Solution,
) -> Result<TrajectorySet> {
    let n = spec.n;
    let nn = 2 * n;
    let ns = grid.n_steps();
    let np = ns + 1;
    let dt = grid.dt();
    if gains.at.len() != np {
        return Err(SlqError::DimensionMismatch("gains not tabulated on the simulation grid".into()));
    }
    let sel = Selectors::new(nn);
    let x0c = {
        let mut v = Vector::zeros(nn);
        v.rows_mut(0, n).copy_from(&spec.x0);
        v
    };
    let cts: Vec<Vector> = (0..np).map(|k| ctilde_aug(spec, grid.t(k))).collect();
    let (m1, m2) = (spec.m1, spec.m2);
    let per: Vec<[Vec<f64>; 7]> = (0..fp.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out: [Vec<f64>; 7] = Default::default();
            let mut x = x0c.clone();
            let mut xh = x0c.clone();
            let zero_q3 = Vector::zeros(nn);
            for k in 0..np {
                let g = &gains.at[k];
                let p3k = p3.eval_path(fp, p, k);
                let mut v = Vector::zeros(4 * nn);
                v.rows_mut(0, nn).copy_from(&x);
                v.rows_mut(nn, nn).copy_from(&xh);
                v.rows_mut(2 * nn, nn).copy_from(&p3k);
                let vh = &sel.h * &v;
                let u2 = &g.u * &v;
                let u2h = &g.u * &vh;
                let u1 = g.u1(&v, &zero_q3);
                out[0].extend(x.iter());
                out[1].extend(xh.iter());
                out[2].extend(u1.iter());
                out[3].extend(u2.iter());
                out[4].extend(u2h.iter());
                out[5].extend(p3k.iter());
                out[6].extend(std::iter::repeat(0.0).take(nn));
                if k == ns {
                    break;
                }
                let dw = fp.dw.get(p, k, 0);
                let dwt = fp.dwt.get(p, k, 0);
                let dwh = fp.dwhat.get(p, k, 0);
                let xn = &x + &g.f * &v * dt + &g.s * &v * dw + &cts[k] * dwt;
                xh = &xh + &g.fhat * &v * dt + &cts[k] * dwh;
                x = xn;
            }
            debug_assert_eq!(out[2].len(), np * m1);
            debug_assert_eq!(out[3].len(), np * m2);
            out
        })
        .collect();
    let mut cols: Vec<Vec<Vec<f64>>> = (0..7).map(|_| Vec::new()).collect();
    for rec in per {
        for (i, v) in rec.into_iter().enumerate() {
            cols[i].push(v);
        }
    }
    let mut it = cols.into_iter();
    let mut next = |dim| Field::from_paths(it.next().unwrap(), np, dim);
    let xaug = next(nn);
    let xaug_hat = next(nn);
    let u1 = next(m1);
    let u2 = next(m2);
    let u2_hat = next(m2);
    let p3f = next(nn);
    let p3_hat = next(nn);
    let npaths = fp.n_paths();
    let take_first = |f: &Field| -> Field {
        let mut out = Field::zeros(npaths, np, n);
        for p in 0..npaths {
            for k in 0..np {
                out.set(p, k, &f.at(p, k)[..n]);
            }
        }
        out
    };
    Ok(TrajectorySet {
        n_paths: npaths,
        n_points: np,
        times: grid.times(),
        x: take_first(&xaug),
        xhat: take_first(&xaug_hat),
        xtilde: fp.xtilde.clone(),
        y: fp.y.clone(),
        z_density: fp.z.clone(),
        zinv_density: fp.zinv.clone(),
        xtilde_hat: fp.xtilde_hat.clone(),
        zhat: fp.zhat.clone(),
        dwhat: fp.dwhat.clone(),
        dw: fp.dw.clone(),
        dwt: fp.dwt.clone(),
        xaug,
        xaug_hat,
        u1,
        u2,
        u2_hat,
        p3: p3f,
        p3_hat: p3_hat.clone(),
        q3: p3_hat,
        phi_aug: Field::zeros(npaths, np, nn),
        zaug: Field::zeros(npaths, np, nn),
        ztaug: Field::zeros(npaths, np, nn),
        phi: Field::zeros(npaths, np, n),
        beta: Field::zeros(npaths, np, n),
        q: Field::zeros(npaths, np, n),
        k: Field::zeros(npaths, np, n),
        ktilde: Field::zeros(npaths, np, n),
    })
}
