//! Least-squares regression on a polynomial basis, used for conditional
//! expectations in backward schemes.

use crate::error::{Result, SlqError};
use crate::linalg::{self, Mat, Vector};

pub const RIDGE: f64 = 1e-8;
pub const GRAM_COND_CAP: f64 = 1e10;

/// Monomials of total degree <= `degree` (0, 1 or 2), constant first.
pub fn poly_features(x: &[f64], degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if degree >= 1 {
        out.extend_from_slice(x);
    }
    if degree >= 2 {
        for i in 0..x.len() {
            for j in i..x.len() {
                out.push(x[i] * x[j]);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Regression {
    degree: usize,
    keep: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// rows: kept features (constant first), cols: outputs
    coef: Mat,
}

impl Regression {
    /// Fit `ys[i] ~ basis(states[i])`. `states` is samples x state_dim,
    /// `ys` samples x outputs.
    pub fn fit(states: &Mat, ys: &Mat, degree: usize, step: usize) -> Result<Self> {
        let ns = states.nrows();
        let mut feat = Vec::new();
        let probe: Vec<f64> = vec![0.0; states.ncols()];
        poly_features(&probe, degree, &mut feat);
        let nf = feat.len();
        let mut raw = Mat::zeros(ns, nf);
        let mut row = vec![0.0; states.ncols()];
        for i in 0..ns {
            for (j, r) in row.iter_mut().enumerate() {
                *r = states[(i, j)];
            }
            poly_features(&row, degree, &mut feat);
            for j in 0..nf {
                raw[(i, j)] = feat[j];
            }
        }
        let mut keep = vec![0];
        let mut mean = vec![0.0];
        let mut scale = vec![1.0];
        for j in 1..nf {
            let col = raw.column(j);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ns as f64).sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                keep.push(j);
                mean.push(m);
                scale.push(sd);
            }
        }
        let k = keep.len();
        let mut phi = Mat::zeros(ns, k);
        for i in 0..ns {
            for (c, &j) in keep.iter().enumerate() {
                phi[(i, c)] = if c == 0 { 1.0 } else { (raw[(i, j)] - mean[c]) / scale[c] };
            }
        }
        let gram = phi.transpose() * &phi / ns as f64;
        let cond = linalg::cond(&gram);
        if !cond.is_finite() || cond > GRAM_COND_CAP {
            return Err(SlqError::RegressionIllConditioned { step, cond });
        }
        let lhs = gram + Mat::identity(k, k) * RIDGE;
        let rhs = phi.transpose() * ys / ns as f64;
        let coef = lhs
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(SlqError::RegressionIllConditioned { step, cond })?;
        Ok(Regression { degree, keep, mean, scale, coef })
    }

    pub fn predict(&self, x: &[f64]) -> Vector {
        let mut feat = Vec::new();
        poly_features(x, self.degree, &mut feat);
        let mut out = Vector::zeros(self.coef.ncols());
        for (c, &j) in self.keep.iter().enumerate() {
            let f = if c == 0 { 1.0 } else { (feat[j] - self.mean[c]) / self.scale[c] };
            out += self.coef.row(c).transpose() * f;
        }
        out
    }
}
