//! Game specification, time grid and the standing-assumption checks.
//!
//! Coefficients are sampled on uniform knots over `[0, T]` and interpolated;
//! the knots do not have to coincide with the simulation grid.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlqError};
use crate::linalg::{self, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(SlqError::Config(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps < 2 {
            return Err(SlqError::Config(format!("n_steps must be >= 2, got {n_steps}")));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Grid point `i`; the last one is `T` exactly.
    pub fn t(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.t(i)).collect()
    }

    pub fn refine(&self, factor: usize) -> TimeGrid {
        TimeGrid { horizon: self.horizon, n_steps: self.n_steps * factor }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    PiecewiseConstant,
    Linear,
}

/// Matrix-valued function of time given by samples on uniform knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPath {
    rows: usize,
    cols: usize,
    horizon: f64,
    samples: Vec<Mat>,
    interp: Interp,
}

impl CoefficientPath {
    pub fn constant(m: Mat, horizon: f64) -> Self {
        CoefficientPath { rows: m.nrows(), cols: m.ncols(), horizon, samples: vec![m], interp: Interp::PiecewiseConstant }
    }

    pub fn scalar(v: f64, horizon: f64) -> Self {
        Self::constant(Mat::from_element(1, 1, v), horizon)
    }

    pub fn sampled(samples: Vec<Mat>, interp: Interp, horizon: f64) -> Result<Self> {
        let first = samples.first().ok_or_else(|| SlqError::Config("empty coefficient path".into()))?;
        let (rows, cols) = first.shape();
        if samples.iter().any(|s| s.shape() != (rows, cols)) {
            return Err(SlqError::DimensionMismatch("coefficient samples differ in shape".into()));
        }
        if samples.iter().any(|s| !linalg::all_finite(s)) {
            return Err(SlqError::NonFinite("coefficient path".into()));
        }
        Ok(CoefficientPath { rows, cols, horizon, samples, interp })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn samples(&self) -> &[Mat] {
        &self.samples
    }

    pub fn interp(&self) -> Interp {
        self.interp
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_constant(&self) -> bool {
        self.samples.windows(2).all(|w| w[0] == w[1])
    }

    fn spacing(&self) -> f64 {
        if self.samples.len() > 1 {
            self.horizon / (self.samples.len() - 1) as f64
        } else {
            self.horizon
        }
    }

    pub fn sample(&self, t: f64) -> Result<Mat> {
        let tol = self.spacing() * 1e-9;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(SlqError::OutOfRange { t, horizon: self.horizon });
        }
        Ok(self.at(t))
    }

    /// Unchecked evaluation; `t` is clamped into `[0, T]`.
    pub fn at(&self, t: f64) -> Mat {
        let k = self.samples.len();
        if k == 1 {
            return self.samples[0].clone();
        }
        let h = self.spacing();
        let s = (t.clamp(0.0, self.horizon)) / h;
        let mut i = s.floor() as usize;
        // snap onto a knot when within round-off so grid points hit samples exactly
        let r = s.round();
        if (s - r).abs() <= 1e-9 {
            let j = (r as usize).min(k - 1);
            return self.samples[j].clone();
        }
        if i >= k - 1 {
            i = k - 2;
        }
        match self.interp {
            Interp::PiecewiseConstant => self.samples[i].clone(),
            Interp::Linear => {
                let w = s - i as f64;
                &self.samples[i] * (1.0 - w) + &self.samples[i + 1] * w
            }
        }
    }
}

/// The LQ game. Brownian motions W and W~ are scalar.
#[derive(Debug, Clone)]
pub struct GameSpec {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub horizon: f64,
    pub a: CoefficientPath,
    pub c: CoefficientPath,
    pub c1: CoefficientPath,
    pub ctilde: CoefficientPath,
    pub c2: CoefficientPath,
    pub c3: CoefficientPath,
    pub b1: CoefficientPath,
    pub d1: CoefficientPath,
    pub b2: CoefficientPath,
    pub d2: CoefficientPath,
    pub h: CoefficientPath,
    pub q1: CoefficientPath,
    pub n1: CoefficientPath,
    pub g1: Mat,
    pub q2: CoefficientPath,
    pub n2: CoefficientPath,
    pub g2: Mat,
    pub x0: Vector,
    pub xtilde0: Vector,
    pub allow_nonsymmetric_dynamics: bool,
}

/// All coefficients evaluated at one time.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub a: Mat,
    pub c: Mat,
    pub c1: Mat,
    pub ctilde: Mat,
    pub c2: Mat,
    pub c3: Mat,
    pub b1: Mat,
    pub d1: Mat,
    pub b2: Mat,
    pub d2: Mat,
    pub h: Mat,
    pub q1: Mat,
    pub n1: Mat,
    pub q2: Mat,
    pub n2: Mat,
}

impl GameSpec {
    pub fn at(&self, t: f64) -> Coeffs {
        Coeffs {
            a: self.a.at(t),
            c: self.c.at(t),
            c1: self.c1.at(t),
            ctilde: self.ctilde.at(t),
            c2: self.c2.at(t),
            c3: self.c3.at(t),
            b1: self.b1.at(t),
            d1: self.d1.at(t),
            b2: self.b2.at(t),
            d2: self.d2.at(t),
            h: self.h.at(t),
            q1: self.q1.at(t),
            n1: self.n1.at(t),
            q2: self.q2.at(t),
            n2: self.n2.at(t),
        }
    }

    fn paths(&self) -> [(&'static str, &CoefficientPath, (usize, usize)); 15] {
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        [
            ("A", &self.a, (n, n)),
            ("C", &self.c, (n, n)),
            ("C1", &self.c1, (n, n)),
            ("Ctilde", &self.ctilde, (n, 1)),
            ("C2", &self.c2, (n, 1)),
            ("C3", &self.c3, (n, 1)),
            ("B1", &self.b1, (n, m1)),
            ("D1", &self.d1, (n, m1)),
            ("B2", &self.b2, (n, m2)),
            ("D2", &self.d2, (n, m2)),
            ("h", &self.h, (n, 1)),
            ("Q1", &self.q1, (n, n)),
            ("N1", &self.n1, (m1, m1)),
            ("Q2", &self.q2, (n, n)),
            ("N2", &self.n2, (m2, m2)),
        ]
    }

    pub fn check_dims(&self) -> Result<()> {
        if self.n == 0 || self.m1 == 0 || self.m2 == 0 {
            return Err(SlqError::DimensionMismatch("n, m1, m2 must be positive".into()));
        }
        for (name, p, shape) in self.paths() {
            if p.shape() != shape {
                return Err(SlqError::DimensionMismatch(format!(
                    "{name} is {:?}, expected {:?}",
                    p.shape(),
                    shape
                )));
            }
            if p.samples().iter().any(|s| !linalg::all_finite(s)) {
                return Err(SlqError::NonFinite(name.into()));
            }
        }
        for (name, m, shape) in [
            ("G1", &self.g1, (self.n, self.n)),
            ("G2", &self.g2, (self.n, self.n)),
        ] {
            if m.shape() != shape {
                return Err(SlqError::DimensionMismatch(format!("{name} is {:?}, expected {:?}", m.shape(), shape)));
            }
            if !linalg::all_finite(m) {
                return Err(SlqError::NonFinite(name.into()));
            }
        }
        for (name, v) in [("x0", &self.x0), ("xtilde0", &self.xtilde0)] {
            if v.len() != self.n {
                return Err(SlqError::DimensionMismatch(format!("{name} has length {}, expected {}", v.len(), self.n)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SlqError::NonFinite(name.into()));
            }
        }
        Ok(())
    }

    /// True when every sample of the named path is exactly zero.
    pub fn is_zero(path: &CoefficientPath) -> bool {
        path.samples().iter().all(|m| m.iter().all(|v| *v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Check {
    Ok,
    ViolatedAt { t: f64 },
    NotYetChecked,
}

impl Check {
    pub fn is_ok(&self) -> bool {
        matches!(self, Check::Ok)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub a31_ok: bool,
    pub a33_ok: bool,
    pub a34_ok: bool,
    pub a32: Check,
    pub a35: Check,
    pub a36: Check,
    /// Smallest eigenvalue of Q1(t), G1.
    pub a31_margin: f64,
    /// Smallest eigenvalue of Q2(t), G2.
    pub a33_margin: f64,
    /// Smallest |eigenvalue| of N2(t) relative to its norm.
    pub a34_margin: f64,
    pub a32_margin: Option<f64>,
    pub a35_margin: Option<f64>,
    pub a36_margin: Option<f64>,
    /// (name, worst ||M - M'||_inf) for every coefficient required to be symmetric.
    pub symmetry_defects: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl AssumptionReport {
    pub fn spec_time_ok(&self) -> bool {
        self.a31_ok && self.a33_ok && self.a34_ok && self.symmetry_errors().is_empty()
    }

    /// Symmetry defects that count as errors (dynamics defects are warnings
    /// when nonsymmetric dynamics are allowed).
    pub fn symmetry_errors(&self) -> Vec<&(String, f64)> {
        self.symmetry_defects.iter().filter(|(name, d)| *d > 0.0 && !name.ends_with("(allowed)")).collect()
    }

    pub fn violated(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.a31_ok {
            v.push("A3.1");
        }
        if matches!(self.a32, Check::ViolatedAt { .. }) {
            v.push("A3.2");
        }
        if !self.a33_ok {
            v.push("A3.3");
        }
        if !self.a34_ok {
            v.push("A3.4");
        }
        if matches!(self.a35, Check::ViolatedAt { .. }) {
            v.push("A3.5");
        }
        if matches!(self.a36, Check::ViolatedAt { .. }) {
            v.push("A3.6");
        }
        v
    }
}

fn psd_margin(m: &Mat) -> f64 {
    linalg::min_eig_sym(m)
}

/// Checks A3.1, A3.3, A3.4 and symmetry at every grid point. Pure.
pub fn validate_spec(spec: &GameSpec, grid: &TimeGrid) -> Result<AssumptionReport> {
    spec.check_dims()?;
    let mut a31 = psd_margin(&spec.g1);
    let mut a33 = psd_margin(&spec.g2);
    let mut a31_ok = linalg::is_psd(&spec.g1);
    let mut a33_ok = linalg::is_psd(&spec.g2);
    let mut a34 = f64::INFINITY;
    let mut a34_t = None;
    let mut defects: Vec<(String, f64)> = Vec::new();
    let mut record = |name: String, d: f64| {
        if let Some(e) = defects.iter_mut().find(|(n, _)| *n == name) {
            e.1 = e.1.max(d);
        } else {
            defects.push((name, d));
        }
    };
    record("G1".into(), linalg::symmetry_defect(&spec.g1));
    record("G2".into(), linalg::symmetry_defect(&spec.g2));
    let dyn_suffix = if spec.allow_nonsymmetric_dynamics { " (allowed)" } else { "" };
    for i in 0..=grid.n_steps() {
        let t = grid.t(i);
        let k = spec.at(t);
        a31 = a31.min(psd_margin(&k.q1));
        a33 = a33.min(psd_margin(&k.q2));
        a31_ok &= linalg::is_psd(&k.q1);
        a33_ok &= linalg::is_psd(&k.q2);
        let ev = linalg::sym(&k.n2).symmetric_eigenvalues();
        let smallest = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let margin = smallest / (1.0 + linalg::spectral_norm(&k.n2));
        if margin < a34 {
            a34 = margin;
            a34_t = Some(t);
        }
        for (name, m) in [("Q1", &k.q1), ("N1", &k.n1), ("Q2", &k.q2), ("N2", &k.n2)] {
            record(name.into(), linalg::symmetry_defect(m));
        }
        for (name, m) in [("A", &k.a), ("C", &k.c), ("C1", &k.c1)] {
            record(format!("{name}{dyn_suffix}"), linalg::symmetry_defect(m));
        }
    }
    let _ = a34_t;
    let mut warnings = Vec::new();
    if !GameSpec::is_zero(&spec.c2) {
        warnings.push("C2 != 0: the observation filter for xtilde omits its gain term and is approximate".into());
    }
    if !GameSpec::is_zero(&spec.c) || !GameSpec::is_zero(&spec.d1) {
        warnings.push("C or D1 != 0: the follower law drops the dW component of phi and is approximate".into());
    }
    for (name, d) in &defects {
        if *d > 0.0 && name.ends_with("(allowed)") {
            warnings.push(format!("{name} nonsymmetric (defect {d:.3e})"));
        }
    }
    Ok(AssumptionReport {
        a31_ok,
        a33_ok,
        a34_ok: a34 > linalg::INV_MARGIN,
        a32: Check::NotYetChecked,
        a35: Check::NotYetChecked,
        a36: Check::NotYetChecked,
        a31_margin: a31,
        a33_margin: a33,
        a34_margin: a34,
        a32_margin: None,
        a35_margin: None,
        a36_margin: None,
        symmetry_defects: defects,
        warnings,
    })
}
