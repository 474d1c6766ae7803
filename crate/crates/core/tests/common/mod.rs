//! Independent oracles shared by the integration and acceptance targets.
//! Nothing here calls into the solver beyond reading plain coefficients.

#![allow(dead_code)]

use nalgebra::DMatrix;
use slq_core::GameSpec;

pub type M = DMatrix<f64>;

/// P(t) for -dP/dt = 2aP + q, P(T) = g.
pub fn linear_closed_form(a: f64, q: f64, g: f64, horizon: f64, t: f64) -> f64 {
    let e = (2.0 * a * (horizon - t)).exp();
    e * g + q / (2.0 * a) * (e - 1.0)
}

/// P(t) for dP/dt = P^2 - P, P(T) = g (logistic in reversed time).
pub fn logistic_closed_form(g: f64, horizon: f64, t: f64) -> f64 {
    let e = (horizon - t).exp();
    g * e / (g * e + 1.0 - g)
}

fn inv(m: &M) -> M {
    m.clone().try_inverse().expect("oracle matrix invertible")
}

/// Complete-information Stackelberg solve written from scratch.
///
/// With h = 0, Ctilde = 0, C2 = C3 = 0 and C = D1 = 0 the follower only sees
/// noise independent of the state, so its control is deterministic and it
/// tracks the mean: u1 = -N1^-1 B1'(P1 xbar + s), with
/// -ds/dt = Ahat's + P1 B2 ubar, s(T) = 0, Ahat = A - B1 N1^-1 B1' P1.
/// The leader solves a mean-field LQ problem: the fluctuation x - xbar is
/// regulated by Pf (standard Riccati with effective weight N2 + D2'Pf D2),
/// and the mean problem carries the follower constraint through an adjoint
/// r with r(0) = 0. The pair (y, s) = Pi (xbar, r) decouples the mean
/// two-point boundary problem.
pub struct CompleteInfoOracle {
    pub times: Vec<f64>,
    pub p1: Vec<M>,
    pub pf: Vec<M>,
    pub pi: Vec<M>,
    spec: GameSpec,
}

/// Coefficients of the laws at one time, in the pipeline's coordinates
/// (x, xhat, p) where p = -r.
pub struct OracleLaws {
    pub u2_x: M,
    pub u2_xhat: M,
    pub u2_p: M,
    pub u1_xhat: M,
    pub u1_p: M,
}

struct Frozen {
    a: M,
    b1: M,
    b2: M,
    d2: M,
    q1: M,
    n1: M,
    q2: M,
    n2: M,
}

impl CompleteInfoOracle {
    fn frozen(spec: &GameSpec, t: f64) -> Frozen {
        Frozen {
            a: spec.a.at(t),
            b1: spec.b1.at(t),
            b2: spec.b2.at(t),
            d2: spec.d2.at(t),
            q1: spec.q1.at(t),
            n1: spec.n1.at(t),
            q2: spec.q2.at(t),
            n2: spec.n2.at(t),
        }
    }

    /// Time derivatives of (P1, Pf, Pi).
    fn rhs(spec: &GameSpec, t: f64, s: &[M; 3]) -> [M; 3] {
        let f = Self::frozen(spec, t);
        let n = f.a.nrows();
        let (p1, pf, pi) = (&s[0], &s[1], &s[2]);
        let n1i = inv(&f.n1);
        let ff = &f.b1 * &n1i * f.b1.transpose();
        let dp1 = -(p1 * &f.a + f.a.transpose() * p1 + &f.q1 - p1 * &ff * p1);
        let rf = &f.n2 + f.d2.transpose() * pf * &f.d2;
        let rfi = inv(&rf);
        let dpf = -(pf * &f.a + f.a.transpose() * pf + &f.q2 - pf * &f.b2 * &rfi * f.b2.transpose() * pf);
        let ahat = &f.a - &ff * p1;
        let z = M::zeros(n, n);
        let blk = |a: &M, b: &M, c: &M, d: &M| {
            let mut m = M::zeros(2 * n, 2 * n);
            m.view_mut((0, 0), (n, n)).copy_from(a);
            m.view_mut((0, n), (n, n)).copy_from(b);
            m.view_mut((n, 0), (n, n)).copy_from(c);
            m.view_mut((n, n), (n, n)).copy_from(d);
            m
        };
        let m2 = f.b2.ncols();
        // ubar = Rf^-1 (G Z - E Y), Z = (xbar, r), Y = (y, s).
        let mut e = M::zeros(m2, 2 * n);
        e.view_mut((0, 0), (m2, n)).copy_from(&f.b2.transpose());
        let mut g = M::zeros(m2, 2 * n);
        g.view_mut((0, n), (m2, n)).copy_from(&(f.b2.transpose() * p1));
        let mut bz = M::zeros(2 * n, m2);
        bz.view_mut((0, 0), (n, m2)).copy_from(&f.b2);
        let mut by = M::zeros(2 * n, m2);
        by.view_mut((n, 0), (n, m2)).copy_from(&(-(p1 * &f.b2)));
        let aa = blk(&ahat, &z, &z, &ahat) + &bz * &rfi * &g;
        let bb = blk(&z, &(-&ff), &ff, &z) - &bz * &rfi * &e;
        let cc = blk(&(-&f.q2), &z, &z, &z) + &by * &rfi * &g;
        let dd = -blk(&ahat.transpose(), &z, &z, &ahat.transpose()) - &by * &rfi * &e;
        let dpi = &cc + &dd * pi - pi * &aa - pi * &bb * pi;
        [dp1, dpf, dpi]
    }

    /// Backward RK4 on `n_steps` uniform steps.
    pub fn solve(spec: &GameSpec, n_steps: usize) -> Self {
        let n = spec.n;
        let horizon = spec.horizon;
        let h = horizon / n_steps as f64;
        let mut pi_t = M::zeros(2 * n, 2 * n);
        pi_t.view_mut((0, 0), (n, n)).copy_from(&spec.g2);
        let mut s: [M; 3] = [spec.g1.clone(), spec.g2.clone(), pi_t];
        let mut out: Vec<[M; 3]> = vec![s.clone()];
        let add = |s: &[M; 3], k: &[M; 3], c: f64| -> [M; 3] { [&s[0] + &k[0] * c, &s[1] + &k[1] * c, &s[2] + &k[2] * c] };
        for i in (0..n_steps).rev() {
            let t1 = horizon * (i + 1) as f64 / n_steps as f64;
            let tm = t1 - 0.5 * h;
            let t0 = horizon * i as f64 / n_steps as f64;
            let k1 = Self::rhs(spec, t1, &s);
            let k2 = Self::rhs(spec, tm, &add(&s, &k1, -0.5 * h));
            let k3 = Self::rhs(spec, tm, &add(&s, &k2, -0.5 * h));
            let k4 = Self::rhs(spec, t0, &add(&s, &k3, -h));
            for j in 0..3 {
                s[j] = &s[j] - (&k1[j] + &k2[j] * 2.0 + &k3[j] * 2.0 + &k4[j]) * (h / 6.0);
            }
            out.push(s.clone());
        }
        out.reverse();
        CompleteInfoOracle {
            times: (0..=n_steps).map(|i| horizon * i as f64 / n_steps as f64).collect(),
            p1: out.iter().map(|x| x[0].clone()).collect(),
            pf: out.iter().map(|x| x[1].clone()).collect(),
            pi: out.iter().map(|x| x[2].clone()).collect(),
            spec: spec.clone(),
        }
    }

    pub fn laws(&self, k: usize) -> OracleLaws {
        let n = self.spec.n;
        let f = Self::frozen(&self.spec, self.times[k]);
        let (p1, pf, pi) = (&self.p1[k], &self.pf[k], &self.pi[k]);
        let rfi = inv(&(&f.n2 + f.d2.transpose() * pf * &f.d2));
        let n1i = inv(&f.n1);
        let b2t = f.b2.transpose();
        let pi11 = pi.view((0, 0), (n, n)).into_owned();
        let pi12 = pi.view((0, n), (n, n)).into_owned();
        let pi21 = pi.view((n, 0), (n, n)).into_owned();
        let pi22 = pi.view((n, n), (n, n)).into_owned();
        let u2_x = -(&rfi * &b2t * pf);
        let u2_xhat = -(&rfi * &b2t * &pi11) - &u2_x;
        // coefficient on r is Rf^-1 B2'(P1 - Pi12); p = -r flips it
        let u2_p = -(&rfi * &b2t * (p1 - &pi12));
        let u1_xhat = -(&n1i * f.b1.transpose() * (p1 + &pi21));
        let u1_p = &n1i * f.b1.transpose() * &pi22;
        OracleLaws { u2_x, u2_xhat, u2_p, u1_xhat, u1_p }
    }
}

/// Pipeline gains folded onto the same coordinates. `u` and `l1` act on
/// v = (x, p, xhat, phat, P3, P3hat); on this instance p = phat.
pub fn pipeline_laws(u: &M, l1: &M, n: usize) -> OracleLaws {
    let c = |m: &M, b: usize| m.columns(b * n, n).into_owned();
    OracleLaws {
        u2_x: c(u, 0),
        u2_xhat: c(u, 2),
        u2_p: c(u, 1) + c(u, 3),
        u1_xhat: c(l1, 0) + c(l1, 2),
        u1_p: c(l1, 1) + c(l1, 3),
    }
}

pub fn law_gap(a: &OracleLaws, b: &OracleLaws) -> f64 {
    [
        (&a.u2_x - &b.u2_x).amax(),
        (&a.u2_xhat - &b.u2_xhat).amax(),
        (&a.u2_p - &b.u2_p).amax(),
        (&a.u1_xhat - &b.u1_xhat).amax(),
        (&a.u1_p - &b.u1_p).amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Scalar game with every coefficient constant; unspecified entries are zero
/// except the unit cost weights.
#[derive(Clone, Copy)]
pub struct Scalar {
    pub a: f64,
    pub c: f64,
    pub c1: f64,
    pub ctilde: f64,
    pub c2: f64,
    pub c3: f64,
    pub b1: f64,
    pub d1: f64,
    pub b2: f64,
    pub d2: f64,
    pub h: f64,
    pub q1: f64,
    pub n1: f64,
    pub g1: f64,
    pub q2: f64,
    pub n2: f64,
    pub g2: f64,
    pub x0: f64,
    pub xtilde0: f64,
    pub horizon: f64,
}

impl Default for Scalar {
    fn default() -> Self {
        Scalar {
            a: 0.0,
            c: 0.0,
            c1: 0.0,
            ctilde: 0.0,
            c2: 0.0,
            c3: 0.0,
            b1: 0.0,
            d1: 0.0,
            b2: 0.0,
            d2: 0.0,
            h: 0.0,
            q1: 1.0,
            n1: 1.0,
            g1: 1.0,
            q2: 1.0,
            n2: 1.0,
            g2: 0.0,
            x0: 1.0,
            xtilde0: 0.0,
            horizon: 1.0,
        }
    }
}

impl Scalar {
    pub fn spec(&self) -> GameSpec {
        use slq_core::linalg::{Mat, Vector};
        use slq_core::CoefficientPath as P;
        let s = |v: f64| P::scalar(v, self.horizon);
        GameSpec {
            n: 1,
            m1: 1,
            m2: 1,
            horizon: self.horizon,
            a: s(self.a),
            c: s(self.c),
            c1: s(self.c1),
            ctilde: s(self.ctilde),
            c2: s(self.c2),
            c3: s(self.c3),
            b1: s(self.b1),
            d1: s(self.d1),
            b2: s(self.b2),
            d2: s(self.d2),
            h: s(self.h),
            q1: s(self.q1),
            n1: s(self.n1),
            g1: Mat::from_element(1, 1, self.g1),
            q2: s(self.q2),
            n2: s(self.n2),
            g2: Mat::from_element(1, 1, self.g2),
            x0: Vector::from_element(1, self.x0),
            xtilde0: Vector::from_element(1, self.xtilde0),
            allow_nonsymmetric_dynamics: false,
        }
    }
}

/// Largest entry gap between two matrix series.
pub fn series_gap(a: &[M], b: &[M]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

impl CompleteInfoOracle {
    /// Mean state along the optimal play, RK4 on the oracle's own grid with
    /// the midpoint gains taken as the average of the two endpoints.
    pub fn mean_path(&self, x0: &slq_core::linalg::Vector) -> Vec<slq_core::linalg::Vector> {
        let n = self.spec.n;
        let h = self.spec.horizon / (self.times.len() - 1) as f64;
        let drift = |k: f64, z: &M| -> M {
            // k may be fractional: blend neighbouring tables
            let lo = k.floor() as usize;
            let w = k - lo as f64;
            let hi = (lo + 1).min(self.times.len() - 1);
            let mix = |v: &[M]| &v[lo] * (1.0 - w) + &v[hi] * w;
            let (p1, pf, pi) = (mix(&self.p1), mix(&self.pf), mix(&self.pi));
            let t = self.times[lo] * (1.0 - w) + self.times[hi] * w;
            let f = Self::frozen(&self.spec, t);
            let ff = &f.b1 * inv(&f.n1) * f.b1.transpose();
            let ahat = &f.a - &ff * &p1;
            let rfi = inv(&(&f.n2 + f.d2.transpose() * &pf * &f.d2));
            let xbar = z.rows(0, n).into_owned();
            let r = z.rows(n, n).into_owned();
            let y = pi.view((0, 0), (n, n)) * &xbar + pi.view((0, n), (n, n)) * &r;
            let s = pi.view((n, 0), (n, n)) * &xbar + pi.view((n, n), (n, n)) * &r;
            let ubar = &rfi * (f.b2.transpose() * &p1 * &r - f.b2.transpose() * &y);
            let dx = &ahat * &xbar - &ff * &s + &f.b2 * ubar;
            let dr = &ahat * &r + &ff * &y;
            let mut out = M::zeros(2 * n, 1);
            out.rows_mut(0, n).copy_from(&dx);
            out.rows_mut(n, n).copy_from(&dr);
            out
        };
        let mut z = M::zeros(2 * n, 1);
        z.rows_mut(0, n).copy_from(x0);
        let mut out = vec![x0.clone()];
        for k in 0..self.times.len() - 1 {
            let kf = k as f64;
            let k1 = drift(kf, &z);
            let k2 = drift(kf + 0.5, &(&z + &k1 * (0.5 * h)));
            let k3 = drift(kf + 0.5, &(&z + &k2 * (0.5 * h)));
            let k4 = drift(kf + 1.0, &(&z + &k3 * h));
            z = &z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            out.push(z.rows(0, n).column(0).into_owned());
        }
        out
    }
}
