//! Scenario files: a JSON description of a game plus its time grid.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SlqError};
use crate::linalg::{Mat, Vector};
use crate::model::{CoefficientPath, GameSpec, Interp, TimeGrid};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum PathSpec {
    Constant(Vec<Vec<f64>>),
    Sampled { samples: Vec<Vec<Vec<f64>>>, interp: Interp },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub n_steps: usize,
}

/// Controlled state x: dx = (Ax + B1u1 + B2u2)dt + (Cx + D1u1 + D2u2)dW + Ct dW~.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Dynamics {
    #[serde(rename = "A")]
    pub a: PathSpec,
    #[serde(rename = "B1")]
    pub b1: PathSpec,
    #[serde(rename = "B2")]
    pub b2: PathSpec,
    #[serde(rename = "C")]
    pub c: PathSpec,
    #[serde(rename = "D1")]
    pub d1: PathSpec,
    #[serde(rename = "D2")]
    pub d2: PathSpec,
    #[serde(rename = "Ctilde")]
    pub ctilde: PathSpec,
    #[serde(default)]
    pub allow_nonsymmetric: bool,
}

/// Signal dx~ = C1 x~ dt + C2 dW + C3 dW~ and observation dY = h'x~ dt + dW~.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    #[serde(rename = "C1")]
    pub c1: PathSpec,
    #[serde(rename = "C2")]
    pub c2: PathSpec,
    #[serde(rename = "C3")]
    pub c3: PathSpec,
    pub h: PathSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Costs {
    #[serde(rename = "Q1")]
    pub q1: PathSpec,
    #[serde(rename = "N1")]
    pub n1: PathSpec,
    #[serde(rename = "G1")]
    pub g1: Vec<Vec<f64>>,
    #[serde(rename = "Q2")]
    pub q2: PathSpec,
    #[serde(rename = "N2")]
    pub n2: PathSpec,
    #[serde(rename = "G2")]
    pub g2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Initial {
    pub x0: Vec<f64>,
    pub xtilde0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub dims: Dims,
    pub grid: GridSection,
    pub dynamics: Dynamics,
    pub observation: Observation,
    pub costs: Costs,
    pub initial: Initial,
}

fn to_mat(rows: &[Vec<f64>], what: &str) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(SlqError::Config(format!("{what}: ragged or empty matrix")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn path_from(spec: &PathSpec, horizon: f64, what: &str) -> Result<CoefficientPath> {
    match spec {
        PathSpec::Constant(rows) => Ok(CoefficientPath::constant(to_mat(rows, what)?, horizon)),
        PathSpec::Sampled { samples, interp } => {
            let mats = samples.iter().map(|s| to_mat(s, what)).collect::<Result<Vec<_>>>()?;
            CoefficientPath::sampled(mats, *interp, horizon)
        }
    }
}

fn path_to(p: &CoefficientPath) -> PathSpec {
    if p.is_constant() {
        PathSpec::Constant(from_mat(&p.samples()[0]))
    } else {
        PathSpec::Sampled { samples: p.samples().iter().map(from_mat).collect(), interp: p.interp() }
    }
}

impl Scenario {
    pub fn from_spec(name: &str, description: &str, spec: &GameSpec, n_steps: usize) -> Self {
        Scenario {
            name: name.to_string(),
            description: description.to_string(),
            dims: Dims { n: spec.n, m1: spec.m1, m2: spec.m2 },
            grid: GridSection { horizon: spec.horizon, n_steps },
            dynamics: Dynamics {
                a: path_to(&spec.a),
                b1: path_to(&spec.b1),
                b2: path_to(&spec.b2),
                c: path_to(&spec.c),
                d1: path_to(&spec.d1),
                d2: path_to(&spec.d2),
                ctilde: path_to(&spec.ctilde),
                allow_nonsymmetric: spec.allow_nonsymmetric_dynamics,
            },
            observation: Observation {
                c1: path_to(&spec.c1),
                c2: path_to(&spec.c2),
                c3: path_to(&spec.c3),
                h: path_to(&spec.h),
            },
            costs: Costs {
                q1: path_to(&spec.q1),
                n1: path_to(&spec.n1),
                g1: from_mat(&spec.g1),
                q2: path_to(&spec.q2),
                n2: path_to(&spec.n2),
                g2: from_mat(&spec.g2),
            },
            initial: Initial { x0: spec.x0.iter().cloned().collect(), xtilde0: spec.xtilde0.iter().cloned().collect() },
        }
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon
    }

    pub fn to_spec(&self) -> Result<GameSpec> {
        let horizon = self.grid.horizon;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SlqError::Config("horizon must be positive".into()));
        }
        let p = |spec: &PathSpec, what: &str| path_from(spec, horizon, what);
        let (d, o, c) = (&self.dynamics, &self.observation, &self.costs);
        let spec = GameSpec {
            n: self.dims.n,
            m1: self.dims.m1,
            m2: self.dims.m2,
            horizon,
            a: p(&d.a, "A")?,
            c: p(&d.c, "C")?,
            c1: p(&o.c1, "C1")?,
            ctilde: p(&d.ctilde, "Ctilde")?,
            c2: p(&o.c2, "C2")?,
            c3: p(&o.c3, "C3")?,
            b1: p(&d.b1, "B1")?,
            d1: p(&d.d1, "D1")?,
            b2: p(&d.b2, "B2")?,
            d2: p(&d.d2, "D2")?,
            h: p(&o.h, "h")?,
            q1: p(&c.q1, "Q1")?,
            n1: p(&c.n1, "N1")?,
            g1: to_mat(&c.g1, "G1")?,
            q2: p(&c.q2, "Q2")?,
            n2: p(&c.n2, "N2")?,
            g2: to_mat(&c.g2, "G2")?,
            x0: Vector::from_vec(self.initial.x0.clone()),
            xtilde0: Vector::from_vec(self.initial.xtilde0.clone()),
            allow_nonsymmetric_dynamics: d.allow_nonsymmetric,
        };
        spec.check_dims()?;
        Ok(spec)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SlqError::Config(format!("scenario parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| SlqError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| SlqError::Config("scenario is not UTF-8".into()))?;
        Ok((Self::from_json(&text)?, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
