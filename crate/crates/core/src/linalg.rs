//! Thin wrappers over the dense kernels, always run sequentially so that
//! results are bit-identical regardless of how many layers run in parallel.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};

use crate::error::{Error, Result};

pub fn from_row_major_f32(rows: usize, cols: usize, data: &[f32]) -> Mat<f64> {
    debug_assert_eq!(data.len(), rows * cols);
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j] as f64)
}

pub fn from_row_major_f64(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    debug_assert_eq!(data.len(), rows * cols);
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

pub fn to_row_major(a: MatRef<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// `a · b`
pub fn mul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

/// `aᵀ · b`
pub fn mul_tn(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    mul(a.transpose(), b)
}

pub fn frobenius_sq(a: MatRef<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let x = a[(i, j)];
            acc += x * x;
        }
    }
    acc
}

pub fn frobenius(a: MatRef<'_, f64>) -> f64 {
    frobenius_sq(a).sqrt()
}

/// `‖a − b‖²_F`
pub fn diff_frobenius_sq(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let d = a[(i, j)] - b[(i, j)];
            acc += d * d;
        }
    }
    acc
}

pub fn max_abs(a: MatRef<'_, f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].abs());
        }
    }
    m
}

/// `‖aᵀa − I‖_max`
pub fn orthonormality_defect(a: MatRef<'_, f64>) -> f64 {
    let g = mul_tn(a, a);
    let mut worst = 0.0f64;
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn is_all_finite(a: MatRef<'_, f64>) -> bool {
    (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| a[(i, j)].is_finite()))
}

/// Thin SVD `a = U·diag(s)·Vᵀ` with `s` non-increasing.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Mat<f64>,
    pub s: Vec<f64>,
    pub v: Mat<f64>,
}

pub fn thin_svd(a: MatRef<'_, f64>) -> Result<ThinSvd> {
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Decomposition(format!("svd did not converge: {e:?}")))?;
    let s = svd.S().column_vector().iter().copied().collect();
    Ok(ThinSvd {
        u: svd.U().to_owned(),
        s,
        v: svd.V().to_owned(),
    })
}

pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    a.singular_values()
        .map_err(|e| Error::Decomposition(format!("svd did not converge: {e:?}")))
}

/// Flips column pairs so that each column of `u` has its largest-magnitude
/// entry positive (ties go to the lowest row index). `v`, when given, is
/// flipped alongside so `u·diag(s)·vᵀ` is unchanged.
pub fn fix_signs(u: &mut Mat<f64>, mut v: Option<&mut Mat<f64>>) {
    for j in 0..u.ncols() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..u.nrows() {
            let a = u[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.nrows() > 0 && u[(best, j)] < 0.0 {
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
            if let Some(v) = v.as_deref_mut() {
                for i in 0..v.nrows() {
                    v[(i, j)] = -v[(i, j)];
                }
            }
        }
    }
}

/// Extends the orthonormal columns of `basis` to `k` columns by
/// Gram–Schmidt against the standard basis vectors in index order.
pub fn complete_orthonormal(basis: MatRef<'_, f64>, k: usize) -> Mat<f64> {
    let m = basis.nrows();
    assert!(k <= m);
    let mut cols: Vec<Vec<f64>> = (0..basis.ncols())
        .map(|j| (0..m).map(|i| basis[(i, j)]).collect())
        .collect();
    let mut e = 0;
    while cols.len() < k && e < m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        // two passes keep the result orthogonal to working precision
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= dot * ci;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
        e += 1;
    }
    Mat::from_fn(m, cols.len(), |i, j| cols[j][i])
}
