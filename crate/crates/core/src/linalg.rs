//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Thin SVD `M = U diag(s) Vᵀ` with singular values sorted non-increasing.
///
/// Each singular pair is sign-normalized so that the largest-magnitude entry
/// of the left vector is positive.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn sorted_svd(m: &DMatrix<f64>) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vt");
    let s = svd.singular_values;
    let k = s.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let mut u_sorted = DMatrix::zeros(u.nrows(), k);
    let mut v_sorted = DMatrix::zeros(v_t.ncols(), k);
    let mut s_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = u.column(src).into_owned();
        let mut vcol = v_t.row(src).transpose();
        let pivot = ucol
            .iter()
            .copied()
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u_sorted.set_column(dst, &ucol);
        v_sorted.set_column(dst, &vcol);
        s_sorted[dst] = s[src];
    }
    SortedSvd {
        u: u_sorted,
        singular_values: s_sorted,
        v: v_sorted,
    }
}

/// `(S + λI)^{-1/2}` for a symmetric positive semi-definite `S`.
///
/// λ is added to every eigenvalue before the inverse square root.
pub fn inv_sqrt_psd(s: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut scaled = eig.eigenvectors.clone();
    for k in 0..n {
        let shifted = eig.eigenvalues[k] + lambda;
        if shifted < 1e-12 {
            return Err(Error::Singular(format!(
                "eigenvalue {:e} + lambda {lambda} < 1e-12; increase the regularization",
                eig.eigenvalues[k]
            )));
        }
        let f = 1.0 / shifted.sqrt();
        scaled.column_mut(k).scale_mut(f);
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // Fill row-major so the draw order matches the on-disk layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = std * z;
        }
    }
    m
}

/// Matrix with `rows ≤ cols` orthonormal rows, Haar-distributed.
pub fn random_orthonormal_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    assert!(rows <= cols, "need rows <= cols");
    let g = gaussian_matrix(rng, cols, rows, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..rows {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q.transpose()
}

/// Square orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    random_orthonormal_rows(rng, n, n)
}

pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Max absolute entry of `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `‖a − b‖_∞ / max(‖b‖_∞, floor)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(floor);
    max_abs_diff(a, b) / scale
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
