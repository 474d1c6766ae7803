//! Derived coefficient families: the follower's tilde matrices, the 2n
//! augmented (calligraphic) blocks, closed-loop bar matrices and the
//! feedback gains.
//!
//! Gains come in two modes. `Rederived` composes the substitution chain
//! Phi = P1 X + P2 X^ + P3, the conditional Z^-solve and the Z-solve into the
//! stationarity condition numerically, on the state vector
//! `v = (X, X^, P3, P3^)` of length 8n. `Verbatim` evaluates the printed
//! Sigma_1..Sigma_12 formulas (with Sigma_1 read as B2'P2 + B2~'(P1+P2)).

use serde::Serialize;

use crate::error::{Result, SlqError};
use crate::linalg::{self, block2, eye, hstack, sym, vstack, zeros, Mat, Vector};
use crate::model::{Coeffs, GameSpec, TimeGrid};

#[derive(Debug, Clone)]
pub struct FollowerCoeffs {
    pub ntilde1: Mat,
    pub ntilde1_inv: Mat,
    pub ntilde1_min_eig: f64,
    pub stilde1: Mat,
    pub stilde: Mat,
    pub stilde2: Mat,
    pub stilde3: Mat,
    pub sstilde1: Mat,
    pub stilde4: Mat,
    pub stilde5: Mat,
    pub stilde6: Mat,
    pub atilde: Mat,
    pub btilde1: Mat,
    pub btilde2: Mat,
}

impl FollowerCoeffs {
    pub fn build(k: &Coeffs, p1: &Mat, t: f64) -> Result<Self> {
        let ntilde1 = sym(&(&k.n1 + k.d1.transpose() * p1 * &k.d1));
        let min_eig = linalg::min_eig_sym(&ntilde1);
        let (ni, c) = linalg::inv_cond(&ntilde1).ok_or(SlqError::SingularNtilde1 { t, cond: linalg::cond(&ntilde1) })?;
        let _ = c;
        let ni = sym(&ni);
        let stilde1 = p1 * &k.b1 + k.c.transpose() * p1 * &k.d1;
        let stilde = k.d1.transpose() * p1 * &k.d2;
        let stilde2 = p1 * &k.b2 + k.c.transpose() * p1 * &k.d2;
        let stilde3 = -(&stilde1 * &ni * &stilde) + &stilde2;
        let sstilde1 = sym(&(&stilde1 * &ni * stilde1.transpose()));
        let stilde4 = sym(&(-(&k.b1 * &ni * k.b1.transpose())));
        let stilde5 = -(&k.d1 * &ni * stilde1.transpose());
        let stilde6 = -(&k.d1 * &ni * &stilde);
        let atilde = &k.a - &k.b1 * &ni * stilde1.transpose();
        let btilde1 = -(&k.b1 * &ni * k.d1.transpose());
        let btilde2 = &k.b2 - &k.b1 * &ni * &stilde;
        Ok(FollowerCoeffs {
            ntilde1,
            ntilde1_inv: ni,
            ntilde1_min_eig: min_eig,
            stilde1,
            stilde,
            stilde2,
            stilde3,
            sstilde1,
            stilde4,
            stilde5,
            stilde6,
            atilde,
            btilde1,
            btilde2,
        })
    }
}

/// Augmented 2n-block matrices at one time.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub a1: Mat,
    pub a2: Mat,
    pub b1: Mat,
    pub b1t: Mat,
    pub b2: Mat,
    pub b2t: Mat,
    pub b3: Mat,
    pub b3t: Mat,
    pub c1: Mat,
    pub c2: Mat,
    pub ct: Mat,
    pub d2: Mat,
    pub d2t: Mat,
    pub q2: Mat,
    pub q2t: Mat,
    pub g2: Mat,
}

impl Augmented {
    /// The dynamics block A2 is diag(A~ - A, A~ - A); see the crate README.
    pub fn build(k: &Coeffs, f: &FollowerCoeffs, g2: &Mat) -> Self {
        let n = k.a.nrows();
        let m2 = k.b2.ncols();
        let z = zeros(n, n);
        let zm2 = zeros(n, m2);
        let da = &f.atilde - &k.a;
        Augmented {
            a1: block2(&k.a, &z, &z, &k.a),
            a2: block2(&da, &z, &z, &da),
            b1: block2(&z, &f.stilde4, &f.stilde4.transpose(), &z),
            b1t: block2(&z, &z, &f.btilde1, &z),
            b2: vstack(&k.b2, &zm2),
            b2t: vstack(&(&f.btilde2 - &k.b2), &zm2),
            b3: vstack(&zm2, &f.stilde2),
            b3t: vstack(&zm2, &(&f.stilde3 - &f.stilde2)),
            c1: block2(&k.c, &z, &z, &z),
            c2: block2(&f.stilde5, &z, &z, &z),
            ct: vstack(&k.ctilde, &zeros(n, 1)),
            d2: vstack(&k.d2, &zm2),
            d2t: vstack(&f.stilde6, &zm2),
            q2: block2(&k.q2, &f.sstilde1, &f.sstilde1, &z),
            q2t: block2(&z, &(-&f.sstilde1), &(-&f.sstilde1), &z),
            g2: block2(g2, &z, &z, &z),
        }
    }
}

/// Closed-loop (bar) matrices at one time.
#[derive(Debug, Clone)]
pub struct Bars {
    pub n2_inv: Mat,
    pub abar1: Mat,
    pub abar2: Mat,
    pub bbar1: Mat,
    pub bbar2: Mat,
    pub bbar1t: Mat,
    pub bbar2t: Mat,
    pub cbar1: Mat,
    pub dbar2: Mat,
    pub cbar2: Mat,
    pub dbar2t: Mat,
    pub qbar2: Mat,
    pub qbar2t: Mat,
}

impl Bars {
    pub fn build(g: &Augmented, n2: &Mat, t: f64) -> Result<Self> {
        let (ni, _) = linalg::inv_cond(n2).ok_or(SlqError::SingularN2 { t })?;
        let ni = sym(&ni);
        let b2s = &g.b2 + &g.b2t;
        let b3s = &g.b3 + &g.b3t;
        let d2s = &g.d2 + &g.d2t;
        Ok(Bars {
            abar1: &g.a1 - &g.b2 * &ni * g.b3.transpose(),
            abar2: &g.a2 - &g.b2 * &ni * g.b3t.transpose() - &g.b2t * &ni * b3s.transpose(),
            bbar1: sym(&(-(&g.b2 * &ni * g.b2.transpose()))),
            bbar2: -(&g.b2 * &ni * g.d2.transpose()),
            bbar1t: &g.b1 - &g.b2 * &ni * g.b2t.transpose() - &g.b2t * &ni * b2s.transpose(),
            bbar2t: &g.b1t - &g.b2 * &ni * g.d2t.transpose() - &g.b2t * &ni * d2s.transpose(),
            cbar1: &g.c1 - &g.d2 * &ni * g.b3.transpose(),
            dbar2: sym(&(-(&g.d2 * &ni * g.d2.transpose()))),
            cbar2: &g.c2 - &g.d2 * &ni * g.b3t.transpose() - &g.d2t * &ni * b3s.transpose(),
            dbar2t: -(&g.d2 * &ni * g.d2t.transpose()) - &g.d2t * &ni * d2s.transpose(),
            qbar2: sym(&(&g.q2 - &g.b3 * &ni * g.b3.transpose())),
            qbar2t: &g.q2t - &g.b3 * &ni * g.b3t.transpose() - &g.b3t * &ni * b3s.transpose(),
            n2_inv: ni,
        })
    }
}

/// Everything derived from (spec, t, P1) at one time.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub t: f64,
    pub k: Coeffs,
    pub fol: FollowerCoeffs,
    pub aug: Augmented,
    pub bars: Bars,
}

impl Pointwise {
    pub fn new(spec: &GameSpec, t: f64, p1: &Mat) -> Result<Self> {
        let k = spec.at(t);
        let fol = FollowerCoeffs::build(&k, p1, t)?;
        let aug = Augmented::build(&k, &fol, &spec.g2);
        let bars = Bars::build(&aug, &k.n2, t)?;
        Ok(Pointwise { t, k, fol, aug, bars })
    }
}

/// Column-block selectors on v = (X, X^, P3, P3^).
pub struct Selectors {
    pub nn: usize,
    pub ex: Mat,
    pub exh: Mat,
    pub ep3: Mat,
    pub ep3h: Mat,
    /// Conditional-expectation map v -> (X^, X^, P3^, P3^).
    pub h: Mat,
}

impl Selectors {
    pub fn new(nn: usize) -> Self {
        let sel = |b: usize| {
            let mut m = zeros(nn, 4 * nn);
            m.view_mut((0, b * nn), (nn, nn)).copy_from(&eye(nn));
            m
        };
        let (ex, exh, ep3, ep3h) = (sel(0), sel(1), sel(2), sel(3));
        let h = vstack(&vstack(&exh, &exh), &vstack(&ep3h, &ep3h));
        Selectors { nn, ex, exh, ep3, ep3h, h }
    }

    pub fn block(&self, m: &Mat, b: usize) -> Mat {
        m.columns(b * self.nn, self.nn).into_owned()
    }
}

/// Result of the rederived composition at one time.
#[derive(Debug, Clone)]
pub struct Composition {
    /// u2 = U v
    pub u: Mat,
    /// drift of X
    pub f: Mat,
    /// dW-diffusion of X
    pub s: Mat,
    /// Z = Mz v, Z^ = Mzh v
    pub mz: Mat,
    pub mzh: Mat,
    /// minus the drift of Phi: -dPhi = (G v + ...) dt
    pub g: Mat,
    pub ntilde2: Mat,
    pub nbar2: Mat,
    pub cond_ntilde2: f64,
    pub cond_nbar2: f64,
}

pub fn ntilde2(p1c: &Mat, aug: &Augmented, n2_inv: &Mat) -> Mat {
    let ds = &aug.d2 + &aug.d2t;
    eye(p1c.nrows()) + p1c * &ds * n2_inv * ds.transpose()
}

/// I + P1 D2 N2^-1 D2'.
pub fn nbar2(p1c: &Mat, aug: &Augmented, n2_inv: &Mat) -> Mat {
    eye(p1c.nrows()) + p1c * &aug.d2 * n2_inv * aug.d2.transpose()
}

/// I + P1 D2 N2^-1 D2~' as printed.
pub fn nbar2_printed(p1c: &Mat, aug: &Augmented, n2_inv: &Mat) -> Mat {
    eye(p1c.nrows()) + p1c * &aug.d2 * n2_inv * aug.d2t.transpose()
}

fn solve_checked(m: &Mat, rhs: &Mat, t: f64, a35: bool) -> Result<(Mat, f64)> {
    let c = linalg::cond(m);
    if !c.is_finite() || c > linalg::COND_CAP {
        return Err(if a35 {
            SlqError::AssumptionA35Violated { t, cond: c }
        } else {
            SlqError::AssumptionA36Violated { t, cond: c }
        });
    }
    let sol = m
        .clone()
        .lu()
        .solve(rhs)
        .ok_or(SlqError::SingularGainMatrix { t, which: if a35 { "Ntilde2" } else { "Nbar2" } })?;
    Ok((sol, c))
}

pub fn compose(aug: &Augmented, n2_inv: &Mat, p1c: &Mat, p2c: &Mat, sel: &Selectors, t: f64) -> Result<Composition> {
    let nn = sel.nn;
    let ni = n2_inv;
    let phi = p1c * &sel.ex + p2c * &sel.exh + &sel.ep3;
    let phih = (p1c + p2c) * &sel.exh + &sel.ep3h;
    let u0 = -(ni
        * (aug.b3.transpose() * &sel.ex
            + aug.b3t.transpose() * &sel.exh
            + aug.b2.transpose() * &phi
            + aug.b2t.transpose() * &phih));
    let s0 = &aug.c1 * &sel.ex + &aug.c2 * &sel.exh + aug.b1t.transpose() * &phih + &aug.d2 * &u0 + &aug.d2t * &u0 * &sel.h;
    let nt = ntilde2(p1c, aug, ni);
    let nb = nbar2(p1c, aug, ni);
    let (a, ct) = solve_checked(&nt, &(p1c * &s0 * &sel.h), t, true)?;
    let i_h = eye(4 * nn) - &sel.h;
    let (b, cb) = solve_checked(&nb, &(p1c * &s0 * &i_h), t, false)?;
    let mzh = a.clone();
    let mz = a + b;
    let u = &u0 - ni * (aug.d2.transpose() * &mz + aug.d2t.transpose() * &mzh);
    let du = &u - &u0;
    let f = &aug.a1 * &sel.ex
        + &aug.a2 * &sel.exh
        + &aug.b1 * &phih
        + &aug.b1t * &mzh
        + &aug.b2 * &u
        + &aug.b2t * &u * &sel.h;
    let s = &s0 + &aug.d2 * &du + &aug.d2t * &du * &sel.h;
    let g = &aug.q2 * &sel.ex
        + &aug.q2t * &sel.exh
        + aug.a1.transpose() * &phi
        + aug.a2.transpose() * &phih
        + aug.c1.transpose() * &mz
        + aug.c2.transpose() * &mzh
        + &aug.b3 * &u
        + &aug.b3t * &u * &sel.h;
    Ok(Composition { u, f, s, mz, mzh, g, ntilde2: nt, nbar2: nb, cond_ntilde2: ct, cond_nbar2: cb })
}

/// Leader Riccati right-hand side from a composition: (dP1/dt, dP2/dt).
pub fn leader_rhs(c: &Composition, p1c: &Mat, p2c: &Mat, sel: &Selectors) -> (Mat, Mat) {
    let fx = sel.block(&c.f, 0);
    let fxh = sel.block(&c.f, 1);
    let gx = sel.block(&c.g, 0);
    let gxh = sel.block(&c.g, 1);
    let d1 = -(gx + p1c * &fx);
    let d2 = -(gxh + p1c * &fxh + p2c * (&fx + &fxh));
    (d1, d2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    Rederived,
    Verbatim,
}

impl std::str::FromStr for GainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rederived" => Ok(GainMode::Rederived),
            "verbatim" => Ok(GainMode::Verbatim),
            _ => Err(format!("unknown gain mode '{s}'")),
        }
    }
}

/// Reading of the D~1 coefficient multiplying beta in the follower's
/// nonanticipating law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DTilde1 {
    Zero,
    MinusD1Scaled,
}

impl std::str::FromStr for DTilde1 {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(DTilde1::Zero),
            "minus_D1_scaled" | "minus-d1-scaled" => Ok(DTilde1::MinusD1Scaled),
            _ => Err(format!("unknown dtilde1 policy '{s}'")),
        }
    }
}

/// Feedback maps at one grid point, all acting on v = (X, X^, P3, P3^).
#[derive(Debug, Clone)]
pub struct Gains {
    pub ntilde2_inv: Mat,
    pub nbar2_inv: Mat,
    pub cond_ntilde2: f64,
    pub cond_nbar2: f64,
    /// Sigma_1 .. Sigma_12 (index 0 is Sigma_1).
    pub sigma: Vec<Mat>,
    /// Coefficient of X inside u2 = -N2^-1 {K_X X + Sigma1 X^ + Sigma2 P3^ + K_P3 P3}.
    pub k_x: Mat,
    pub k_p3: Mat,
    pub u: Mat,
    pub f: Mat,
    pub s: Mat,
    pub fhat: Mat,
    pub mz: Mat,
    pub mzh: Mat,
    pub lam3: Mat,
    pub lam3h: Mat,
    /// u1 = L1 v + L1q Q3 + l1
    pub l1: Mat,
    pub l1q: Mat,
    pub l1c: Vector,
}

impl Gains {
    pub fn u2(&self, v: &Vector) -> Vector {
        &self.u * v
    }

    pub fn u1(&self, v: &Vector, q3: &Vector) -> Vector {
        &self.l1 * v + &self.l1q * q3 + &self.l1c
    }
}

fn follower_law(pw: &Pointwise, u: &Mat, p1c: &Mat, p2c: &Mat, sel: &Selectors, dt1: DTilde1) -> (Mat, Mat, Vector) {
    let n = pw.k.a.nrows();
    let m1 = pw.k.b1.ncols();
    let f = &pw.fol;
    let pp = p1c + p2c;
    let top = hstack(&[&f.stilde1.transpose(), &zeros(m1, n)]);
    let bot_b1 = hstack(&[&zeros(m1, n), &pw.k.b1.transpose()]);
    let phih = &pp * &sel.exh + &sel.ep3h;
    let inner = &top * &sel.exh + &f.stilde * u * &sel.h + &bot_b1 * &phih;
    let l1 = -(&f.ntilde1_inv * inner);
    let dtil = match dt1 {
        DTilde1::Zero => zeros(n, m1),
        DTilde1::MinusD1Scaled => -(&pw.k.d1 * &f.ntilde1_inv),
    };
    let bot_d = hstack(&[&zeros(m1, n), &dtil.transpose()]);
    let l1q = -(&f.ntilde1_inv * &bot_d);
    let l1c = (&l1q * (&pp * &pw.aug.ct)).column(0).into_owned();
    (l1, l1q, l1c)
}

fn assemble(blocks: [&Mat; 4]) -> Mat {
    hstack(&blocks)
}

pub fn gains_rederived(pw: &Pointwise, p1c: &Mat, p2c: &Mat, dt1: DTilde1) -> Result<Gains> {
    let nn = p1c.nrows();
    let sel = Selectors::new(nn);
    let c = compose(&pw.aug, &pw.bars.n2_inv, p1c, p2c, &sel, pw.t)?;
    let n2 = &pw.k.n2;
    let neg_n2_u = -(n2 * &c.u);
    let k_x = sel.block(&neg_n2_u, 0);
    let s1 = sel.block(&neg_n2_u, 1);
    let k_p3 = sel.block(&neg_n2_u, 2);
    let s2 = sel.block(&neg_n2_u, 3);
    let fhat = &c.f * &sel.h;
    let b = |m: &Mat, i| sel.block(m, i);
    let sigma = vec![
        s1,
        s2,
        b(&c.f, 0),
        b(&c.f, 1),
        b(&c.f, 2),
        b(&c.f, 3),
        b(&c.s, 0),
        b(&c.s, 1),
        b(&c.s, 2),
        b(&c.s, 3),
        b(&fhat, 1),
        b(&fhat, 3),
    ];
    let lam3 = b(&c.g, 2) + p1c * b(&c.f, 2);
    let lam3h = b(&c.g, 3) + p1c * b(&c.f, 3) + p2c * (b(&c.f, 2) + b(&c.f, 3));
    let (l1, l1q, l1c) = follower_law(pw, &c.u, p1c, p2c, &sel, dt1);
    let ntilde2_inv = c.ntilde2.clone().lu().try_inverse().ok_or(SlqError::SingularGainMatrix { t: pw.t, which: "Ntilde2" })?;
    let nbar2_inv = c.nbar2.clone().lu().try_inverse().ok_or(SlqError::SingularGainMatrix { t: pw.t, which: "Nbar2" })?;
    Ok(Gains {
        ntilde2_inv,
        nbar2_inv,
        cond_ntilde2: c.cond_ntilde2,
        cond_nbar2: c.cond_nbar2,
        sigma,
        k_x,
        k_p3,
        u: c.u,
        f: c.f,
        s: c.s,
        fhat,
        mz: c.mz,
        mzh: c.mzh,
        lam3,
        lam3h,
        l1,
        l1q,
        l1c,
    })
}

/// Printed Sigma_1 with the ill-formed product B2'P2 B2~'(P1+P2) kept.
/// Conforms only when m2 = 2n.
pub fn sigma1_uncorrected(pw: &Pointwise, p1c: &Mat, p2c: &Mat) -> Result<Mat> {
    let g = &pw.aug;
    let lhs = g.b2.transpose() * p2c;
    let rhs = g.b2t.transpose() * (p1c + p2c);
    if lhs.ncols() != rhs.nrows() {
        return Err(SlqError::DimensionDefect(format!(
            "B2'P2 is {}x{} and B2~'(P1+P2) is {}x{}",
            lhs.nrows(),
            lhs.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    let v = verbatim_parts(pw, p1c, p2c)?;
    Ok(g.b3t.transpose() + lhs * rhs + &v.sigma1_tail)
}

struct VerbatimParts {
    ntilde_inv: Mat,
    nbar_inv: Mat,
    cond_nt: f64,
    cond_nb: f64,
    w1: Mat,
    w2: Mat,
    zx: Mat,
    zp3h_inner: Mat,
    bsum: Mat,
    /// D2' Ntilde^-1 W2 + D2~' Ntilde^-1 W1
    sigma1_tail: Mat,
}

fn verbatim_parts(pw: &Pointwise, p1: &Mat, p2: &Mat) -> Result<VerbatimParts> {
    let g = &pw.aug;
    let b = &pw.bars;
    let t = pw.t;
    let pp = p1 + p2;
    let nt = ntilde2(p1, g, &b.n2_inv);
    let nb = nbar2_printed(p1, g, &b.n2_inv);
    let (ntilde_inv, cond_nt) = linalg::inv_cond(&nt).ok_or(SlqError::AssumptionA35Violated { t, cond: linalg::cond(&nt) })?;
    let (nbar_inv, cond_nb) = linalg::inv_cond(&nb).ok_or(SlqError::AssumptionA36Violated { t, cond: linalg::cond(&nb) })?;
    let bsum = (&b.bbar2 + &b.bbar1t).transpose();
    let w1 = p1 * (&g.c1 + &b.cbar2) + p1 * &bsum * &pp;
    let w2 = p1 * &b.cbar2 + p1 * b.bbar2.transpose() * p2 + p1 * b.bbar1t.transpose() * &pp + p1 * &b.dbar2t * &ntilde_inv * &w1;
    let zx = p1 * &g.c1 + p1 * b.bbar2.transpose() * p1;
    let zp3h_inner = p1 * b.bbar1t.transpose() + p1 * &b.dbar2t * &ntilde_inv * p1 * &bsum;
    let sigma1_tail = g.d2.transpose() * &ntilde_inv * &w2 + g.d2t.transpose() * &ntilde_inv * &w1;
    Ok(VerbatimParts { ntilde_inv, nbar_inv, cond_nt, cond_nb, w1, w2, zx, zp3h_inner, bsum, sigma1_tail })
}

pub fn gains_verbatim(pw: &Pointwise, p1: &Mat, p2: &Mat, dt1: DTilde1) -> Result<Gains> {
    let g = &pw.aug;
    let b = &pw.bars;
    let nn = p1.nrows();
    let sel = Selectors::new(nn);
    let pp = p1 + p2;
    let v = verbatim_parts(pw, p1, p2)?;
    let (nti, nbi) = (&v.ntilde_inv, &v.nbar_inv);
    let p1b2t = p1 * b.bbar2.transpose();
    let k_x = g.b3.transpose() + g.b2.transpose() * p1 + g.d2.transpose() * nbi * p1 * (&g.c1 + b.bbar2.transpose() * p1);
    let s1 = g.b3t.transpose() + g.b2.transpose() * p2 + g.b2t.transpose() * &pp + &v.sigma1_tail;
    let s2 = g.b2t.transpose() + g.d2.transpose() * nbi * &v.zp3h_inner + g.d2t.transpose() * nti * p1 * &v.bsum;
    let k_p3 = g.b2.transpose() + g.d2.transpose() * nbi * &p1b2t;
    let s3 = &b.abar1 + &b.bbar1 * p1 + &b.bbar2 * nbi * &v.zx;
    let s4 = &b.abar2 + &b.bbar1 * p2 + &b.bbar1t * &pp + &b.bbar2 * nbi * &v.w2 + &b.bbar2t * nti * &v.w1;
    let s5 = &b.bbar1 + &b.bbar2 * nbi * &p1b2t;
    let s6 = &b.bbar1t + &b.bbar2 * nbi * &v.zp3h_inner + &b.bbar2t * nti * p1 * &v.bsum;
    let s7 = &g.c1 + b.bbar2.transpose() * p1 + &b.dbar2 * nbi * &v.zx;
    let s8 = &b.cbar2 + b.bbar2.transpose() * p2 + b.bbar1t.transpose() * &pp + &b.dbar2 * nbi * &v.w2 + &b.dbar2t * nti * &v.w1;
    let s9 = b.bbar2.transpose() + &b.dbar2 * nbi * &p1b2t;
    let s10 = b.bbar1t.transpose() + &b.dbar2 * nbi * &v.zp3h_inner + &b.dbar2t * nti * p1 * &v.bsum;
    let s11 = &b.abar1 + &b.abar2 + (&b.bbar1 + &b.bbar1t) * &pp + &b.bbar2 * nbi * &v.zx + &b.bbar2 * nbi * &v.w2 + &b.bbar2t * nti * &v.w1;
    let s12 = &b.bbar1 + &b.bbar1t + &b.bbar2 * nbi * &p1b2t + &b.bbar2 * nbi * &v.zp3h_inner + &b.bbar2t * nti * p1 * &v.bsum;

    let n2i = &b.n2_inv;
    let u = -(n2i * assemble([&k_x, &s1, &k_p3, &s2]));
    let f = assemble([&s3, &s4, &s5, &s6]);
    let s = assemble([&s7, &s8, &s9, &s10]);
    let zero = zeros(nn, nn);
    let fhat = assemble([&zero, &s11, &zero, &s12]);
    let zxh = nbi * &v.w2;
    let mz = assemble([&(nbi * &v.zx), &zxh, &(nbi * &p1b2t), &(nbi * &v.zp3h_inner)]);
    let mzh = assemble([&zero, &(nti * &v.w1), &zero, &(nti * p1 * &v.bsum)]);
    let cterm = g.c1.transpose() + p1 * &b.bbar2;
    let lam3 = b.abar1.transpose() + p1 * &b.bbar1 + &cterm * nbi * b.bbar2.transpose();
    let lam3h = b.abar2.transpose() + p1 * &b.bbar1t + p2 * (&b.bbar1 + &b.bbar1t) + &cterm * nbi * &v.zp3h_inner;
    let (l1, l1q, l1c) = follower_law(pw, &u, p1, p2, &sel, dt1);
    Ok(Gains {
        ntilde2_inv: v.ntilde_inv.clone(),
        nbar2_inv: v.nbar_inv.clone(),
        cond_ntilde2: v.cond_nt,
        cond_nbar2: v.cond_nb,
        sigma: vec![s1, s2, s3, s4, s5, s6, s7, s8, s9, s10, s11, s12],
        k_x,
        k_p3,
        u,
        f,
        s,
        fhat,
        mz,
        mzh,
        lam3,
        lam3h,
        l1,
        l1q,
        l1c,
    })
}

/// Tabulated families on a grid.
#[derive(Debug, Clone)]
pub struct FollowerDerived {
    pub times: Vec<f64>,
    pub at: Vec<FollowerCoeffs>,
}

#[derive(Debug, Clone)]
pub struct AugmentedCoefficients {
    pub times: Vec<f64>,
    pub at: Vec<Augmented>,
    pub x0c: Vector,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopCoefficients {
    pub times: Vec<f64>,
    pub at: Vec<Bars>,
}

#[derive(Debug, Clone)]
pub struct GainSet {
    pub mode: GainMode,
    pub dtilde1: DTilde1,
    pub times: Vec<f64>,
    pub at: Vec<Gains>,
}

pub fn build_follower_derived(spec: &GameSpec, grid: &TimeGrid, p1: &[Mat]) -> Result<FollowerDerived> {
    if p1.len() != grid.n_steps() + 1 {
        return Err(SlqError::DimensionMismatch("P1 not on the simulation grid".into()));
    }
    let times = grid.times();
    let at = times
        .iter()
        .zip(p1)
        .map(|(&t, p)| FollowerCoeffs::build(&spec.at(t), p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(FollowerDerived { times, at })
}

pub fn build_augmented(spec: &GameSpec, fd: &FollowerDerived) -> AugmentedCoefficients {
    let at = fd.times.iter().zip(&fd.at).map(|(&t, f)| Augmented::build(&spec.at(t), f, &spec.g2)).collect();
    let x0c = Vector::from_iterator(2 * spec.n, spec.x0.iter().cloned().chain(std::iter::repeat(0.0).take(spec.n)));
    AugmentedCoefficients { times: fd.times.clone(), at, x0c }
}

pub fn build_bars(aug: &AugmentedCoefficients, spec: &GameSpec) -> Result<ClosedLoopCoefficients> {
    let at = aug
        .times
        .iter()
        .zip(&aug.at)
        .map(|(&t, g)| Bars::build(g, &spec.n2.at(t), t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClosedLoopCoefficients { times: aug.times.clone(), at })
}

/// Gains at every grid point from the follower P1 and leader (P1c, P2c) tables.
pub fn build_gains(
    spec: &GameSpec,
    grid: &TimeGrid,
    p1: &[Mat],
    p1c: &[Mat],
    p2c: &[Mat],
    mode: GainMode,
    dtilde1: DTilde1,
) -> Result<GainSet> {
    let times = grid.times();
    let at = (0..times.len())
        .map(|i| {
            let pw = Pointwise::new(spec, times[i], &p1[i])?;
            match mode {
                GainMode::Rederived => gains_rederived(&pw, &p1c[i], &p2c[i], dtilde1),
                GainMode::Verbatim => gains_verbatim(&pw, &p1c[i], &p2c[i], dtilde1),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GainSet { mode, dtilde1, times, at })
}


/// Write every derived family on the grid, one long-format CSV per matrix
/// (t,row,col,value). Returns the file names.
pub fn dump_coefficients(dir: &std::path::Path, spec: &GameSpec, grid: &TimeGrid, p1: &[Mat], gains: &GainSet) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let times = grid.times();
    let mut series: Vec<(String, Vec<Mat>)> = Vec::new();
    let mut push = |name: String, k: usize, m: Mat| {
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(m),
            None => {
                debug_assert_eq!(k, 0);
                series.push((name, vec![m]));
            }
        }
    };
    for (k, &t) in times.iter().enumerate() {
        let pw = Pointwise::new(spec, t, &p1[k])?;
        let f = &pw.fol;
        for (n, m) in [
            ("Ntilde1", &f.ntilde1),
            ("Stilde1", &f.stilde1),
            ("Stilde", &f.stilde),
            ("Stilde2", &f.stilde2),
            ("Stilde3", &f.stilde3),
            ("SStilde1", &f.sstilde1),
            ("Stilde4", &f.stilde4),
            ("Stilde5", &f.stilde5),
            ("Stilde6", &f.stilde6),
            ("Atilde", &f.atilde),
            ("Btilde1", &f.btilde1),
            ("Btilde2", &f.btilde2),
        ] {
            push(format!("follower_{n}"), k, m.clone());
        }
        let a = &pw.aug;
        for (n, m) in [
            ("A1", &a.a1),
            ("A2", &a.a2),
            ("B1", &a.b1),
            ("B1t", &a.b1t),
            ("B2", &a.b2),
            ("B2t", &a.b2t),
            ("B3", &a.b3),
            ("B3t", &a.b3t),
            ("C1", &a.c1),
            ("C2", &a.c2),
            ("Ct", &a.ct),
            ("D2", &a.d2),
            ("D2t", &a.d2t),
            ("Q2", &a.q2),
            ("Q2t", &a.q2t),
            ("G2", &a.g2),
        ] {
            push(format!("augmented_{n}"), k, m.clone());
        }
        let b = &pw.bars;
        for (n, m) in [
            ("Abar1", &b.abar1),
            ("Abar2", &b.abar2),
            ("Bbar1", &b.bbar1),
            ("Bbar2", &b.bbar2),
            ("Bbar1t", &b.bbar1t),
            ("Bbar2t", &b.bbar2t),
            ("Cbar1", &b.cbar1),
            ("Dbar2", &b.dbar2),
            ("Cbar2", &b.cbar2),
            ("Dbar2t", &b.dbar2t),
            ("Qbar2", &b.qbar2),
            ("Qbar2t", &b.qbar2t),
        ] {
            push(format!("bar_{n}"), k, m.clone());
        }
        let g = &gains.at[k];
        for (i, s) in g.sigma.iter().enumerate() {
            push(format!("gain_Sigma{}", i + 1), k, s.clone());
        }
        for (n, m) in [
            ("Ntilde2_inv", &g.ntilde2_inv),
            ("Nbar2_inv", &g.nbar2_inv),
            ("U", &g.u),
            ("F", &g.f),
            ("S", &g.s),
            ("Fhat", &g.fhat),
            ("Lambda3", &g.lam3),
            ("Lambda3hat", &g.lam3h),
            ("L1", &g.l1),
            ("L1q", &g.l1q),
        ] {
            push(format!("gain_{n}"), k, m.clone());
        }
        push("gain_l1c".into(), k, Mat::from_column_slice(g.l1c.len(), 1, g.l1c.as_slice()));
    }
    let mut files = Vec::new();
    for (name, mats) in series {
        let file = format!("{name}.csv");
        crate::io::write_matrix_series(&dir.join(&file), &times, &mats)?;
        files.push(file);
    }
    Ok(files)
}
