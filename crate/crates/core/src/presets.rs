//! Built-in scenarios.
//!
//! `newsvendor-lq` and `advertising-lq` are linear-quadratic stand-ins named
//! after supply-chain and cooperative-advertising settings; they are not the
//! nonlinear models themselves.

use crate::error::{Result, SlqError};
use crate::linalg::{Mat, Vector};
use crate::model::{CoefficientPath, GameSpec, Interp};
use crate::scenario::Scenario;

const CATALOG: [(&str, &str); 4] = [
    ("scalar-smoke", "n = m1 = m2 = 1 partially observed game for fast checks"),
    ("newsvendor-lq", "n = 2 retailer/supplier inventory game with quadratic holding and order costs"),
    ("advertising-lq", "n = 3 manufacturer/retailer goodwill game with a time-varying leader channel"),
    ("complete-info", "h = 0, no observation noise coupling: conditional means are deterministic"),
];

pub fn list() -> Vec<(&'static str, &'static str)> {
    CATALOG.to_vec()
}

fn m(r: usize, c: usize, v: &[f64]) -> Mat {
    Mat::from_row_slice(r, c, v)
}

struct Builder {
    horizon: f64,
}

impl Builder {
    fn c(&self, r: usize, c: usize, v: &[f64]) -> CoefficientPath {
        CoefficientPath::constant(m(r, c, v), self.horizon)
    }
    fn s(&self, v: f64) -> CoefficientPath {
        CoefficientPath::scalar(v, self.horizon)
    }
}

fn scalar_smoke() -> GameSpec {
    let b = Builder { horizon: 1.0 };
    GameSpec {
        n: 1,
        m1: 1,
        m2: 1,
        horizon: 1.0,
        a: b.s(0.2),
        c: b.s(0.0),
        c1: b.s(-0.5),
        ctilde: b.s(0.3),
        c2: b.s(0.0),
        c3: b.s(0.5),
        b1: b.s(1.0),
        d1: b.s(0.0),
        b2: b.s(0.8),
        d2: b.s(0.4),
        h: b.s(1.0),
        q1: b.s(1.0),
        n1: b.s(1.0),
        g1: m(1, 1, &[1.0]),
        q2: b.s(1.0),
        n2: b.s(1.0),
        g2: m(1, 1, &[0.5]),
        x0: Vector::from_vec(vec![1.0]),
        xtilde0: Vector::from_vec(vec![0.5]),
        allow_nonsymmetric_dynamics: false,
    }
}

fn newsvendor() -> GameSpec {
    let b = Builder { horizon: 1.0 };
    GameSpec {
        n: 2,
        m1: 1,
        m2: 1,
        horizon: 1.0,
        a: b.c(2, 2, &[-0.1, -0.5, -0.5, -0.3]),
        c: b.c(2, 2, &[0.0; 4]),
        c1: b.c(2, 2, &[-0.5, 0.0, 0.0, -0.4]),
        ctilde: b.c(2, 1, &[0.3, 0.2]),
        c2: b.c(2, 1, &[0.0, 0.0]),
        c3: b.c(2, 1, &[0.4, 0.2]),
        b1: b.c(2, 1, &[1.0, 0.0]),
        d1: b.c(2, 1, &[0.0, 0.0]),
        b2: b.c(2, 1, &[-0.6, 0.2]),
        d2: b.c(2, 1, &[0.2, 0.0]),
        h: b.c(2, 1, &[0.5, 0.8]),
        q1: b.c(2, 2, &[1.0, 0.0, 0.0, 0.2]),
        n1: b.s(1.0),
        g1: m(2, 2, &[0.5, 0.0, 0.0, 0.1]),
        q2: b.c(2, 2, &[0.5, 0.0, 0.0, 0.5]),
        n2: b.s(1.5),
        g2: m(2, 2, &[0.3, 0.0, 0.0, 0.0]),
        x0: Vector::from_vec(vec![1.0, 0.5]),
        xtilde0: Vector::from_vec(vec![0.2, -0.1]),
        allow_nonsymmetric_dynamics: false,
    }
}

fn advertising() -> GameSpec {
    let b = Builder { horizon: 1.0 };
    let knots: Vec<Mat> = (0..=10)
        .map(|i| {
            let t = i as f64 / 10.0;
            m(3, 1, &[0.4 * (1.0 - 0.3 * t), 0.0, 0.3])
        })
        .collect();
    GameSpec {
        n: 3,
        m1: 1,
        m2: 1,
        horizon: 1.0,
        a: b.c(3, 3, &[-0.2, 0.1, 0.0, 0.1, -0.1, 0.05, 0.0, 0.05, -0.3]),
        c: b.c(3, 3, &[0.0; 9]),
        c1: b.c(3, 3, &[-0.3, 0.0, 0.0, 0.0, -0.3, 0.0, 0.0, 0.0, -0.3]),
        ctilde: b.c(3, 1, &[0.2, 0.1, 0.1]),
        c2: b.c(3, 1, &[0.0; 3]),
        c3: b.c(3, 1, &[0.3, 0.1, 0.2]),
        b1: b.c(3, 1, &[1.0, 0.2, 0.0]),
        d1: b.c(3, 1, &[0.0; 3]),
        b2: CoefficientPath::sampled(knots, Interp::Linear, 1.0).expect("valid knots"),
        d2: b.c(3, 1, &[0.1, 0.1, 0.0]),
        h: b.c(3, 1, &[0.6, 0.2, 0.4]),
        q1: b.c(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.2]),
        n1: b.s(1.0),
        g1: m(3, 3, &[0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.2]),
        q2: b.c(3, 3, &[0.4, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.1]),
        n2: b.s(1.0),
        g2: m(3, 3, &[0.2, 0.0, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.0]),
        x0: Vector::from_vec(vec![0.5, 1.0, 0.2]),
        xtilde0: Vector::from_vec(vec![0.1, 0.2, 0.3]),
        allow_nonsymmetric_dynamics: false,
    }
}

fn complete_info() -> GameSpec {
    let b = Builder { horizon: 1.0 };
    GameSpec {
        n: 1,
        m1: 1,
        m2: 1,
        horizon: 1.0,
        a: b.s(0.1),
        c: b.s(0.0),
        c1: b.s(-0.2),
        ctilde: b.s(0.0),
        c2: b.s(0.0),
        c3: b.s(0.0),
        b1: b.s(1.0),
        d1: b.s(0.0),
        b2: b.s(0.6),
        d2: b.s(0.3),
        h: b.s(0.0),
        q1: b.s(1.0),
        n1: b.s(1.0),
        g1: m(1, 1, &[1.0]),
        q2: b.s(0.8),
        n2: b.s(1.0),
        g2: m(1, 1, &[0.5]),
        x0: Vector::from_vec(vec![1.0]),
        xtilde0: Vector::from_vec(vec![0.3]),
        allow_nonsymmetric_dynamics: false,
    }
}

pub fn preset(name: &str) -> Result<GameSpec> {
    match name {
        "scalar-smoke" => Ok(scalar_smoke()),
        "newsvendor-lq" => Ok(newsvendor()),
        "advertising-lq" => Ok(advertising()),
        "complete-info" => Ok(complete_info()),
        _ => Err(SlqError::UnknownPreset(name.to_string())),
    }
}

pub const DEFAULT_STEPS: usize = 1000;

pub fn scenario(name: &str) -> Result<Scenario> {
    let spec = preset(name)?;
    let desc = CATALOG.iter().find(|(k, _)| *k == name).map(|(_, d)| *d).unwrap_or("");
    Ok(Scenario::from_spec(name, desc, &spec, DEFAULT_STEPS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_complete() {
        let names: Vec<_> = list().into_iter().map(|(n, _)| n).collect();
        for want in ["scalar-smoke", "newsvendor-lq", "advertising-lq", "complete-info"] {
            assert!(names.contains(&want));
            preset(want).unwrap().check_dims().unwrap();
        }
        assert!(matches!(preset("nope"), Err(SlqError::UnknownPreset(_))));
    }
}
