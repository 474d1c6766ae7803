//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// PSD tolerance: eigenvalues >= -PSD_TOL * (1 + ||M||_2) pass.
pub const PSD_TOL: f64 = 1e-10;
/// Inverse-existence margin on minimum eigenvalues.
pub const INV_MARGIN: f64 = 1e-10;
/// Condition number above which a matrix counts as singular.
pub const COND_CAP: f64 = 1e12;

pub fn zeros(r: usize, c: usize) -> Mat {
    Mat::zeros(r, c)
}

pub fn eye(n: usize) -> Mat {
    Mat::identity(n, n)
}

pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Infinity-norm of the antisymmetric part, max |m_ij - m_ji|.
pub fn symmetry_defect(m: &Mat) -> f64 {
    (m - m.transpose()).amax()
}

pub fn min_eig_sym(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Eigenvalue PSD test with the fixed relative tolerance.
pub fn is_psd(m: &Mat) -> bool {
    min_eig_sym(m) >= -PSD_TOL * (1.0 + spectral_norm(m))
}

/// 2-norm condition number; infinite for exactly singular input.
pub fn cond(m: &Mat) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.singular_values();
    let lo = sv.min();
    if lo == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / lo
    }
}

/// LU inverse with condition-number reporting. `None` when the condition
/// number exceeds [`COND_CAP`].
pub fn inv_cond(m: &Mat) -> Option<(Mat, f64)> {
    let c = cond(m);
    if !c.is_finite() || c > COND_CAP {
        return None;
    }
    m.clone().lu().try_inverse().map(|inv| (inv, c))
}

pub fn block2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    let (r1, c1) = a.shape();
    let (r2, c2) = d.shape();
    let mut out = Mat::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(a);
    out.view_mut((0, c1), (r1, c2)).copy_from(b);
    out.view_mut((r1, 0), (r2, c1)).copy_from(c);
    out.view_mut((r1, c1), (r2, c2)).copy_from(d);
    out
}

pub fn vstack(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        out.columns_mut(c0, b.ncols()).copy_from(*b);
        c0 += b.ncols();
    }
    out
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Pairwise summation, deterministic for a fixed input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_layout() {
        let a = Mat::from_element(1, 1, 1.0);
        let b = Mat::from_element(1, 1, 2.0);
        let c = Mat::from_element(1, 1, 3.0);
        let d = Mat::from_element(1, 1, 4.0);
        let m = block2(&a, &b, &c, &d);
        assert_eq!(m, Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn psd_tolerance() {
        assert!(is_psd(&Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]))));
        assert!(!is_psd(&Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1e-3]))));
    }

    #[test]
    fn singular_inverse_rejected() {
        assert!(inv_cond(&Mat::zeros(2, 2)).is_none());
        let (inv, c) = inv_cond(&Mat::from_diagonal(&Vector::from_vec(vec![2.0, 4.0]))).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
        assert!((inv[(1, 1)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mean_se_basic() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
