//! Reference methods: whitened truncated SVD, the theoretical-loss ratio
//! allocator of SVD-LLM V2 as its published listing computes it, and an
//! exhaustive sparse-coding oracle.

use faer::linalg::solvers::SolveLstsq;
use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::gram::{whiten, CholeskyFactor};
use crate::linalg;
use crate::tensorio::WeightMatrix;

/// Rank-`r` approximation `Ŵ = left·right`, optimal in whitened space.
#[derive(Debug, Clone)]
pub struct LowRankApprox {
    /// `L⁻ᵀ·U_r·Σ_r^½`, m×r.
    pub left: Mat<f64>,
    /// `Σ_r^½·V_rᵀ`, r×n.
    pub right: Mat<f64>,
    /// `‖W̃ − U_rΣ_rV_rᵀ‖²_F`.
    pub whitened_residual_sq: f64,
}

impl LowRankApprox {
    pub fn reconstruct(&self) -> Mat<f64> {
        linalg::mul(self.left.as_ref(), self.right.as_ref())
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }
}

pub fn truncated_whitened_svd(w: &WeightMatrix, factor: &CholeskyFactor, r: usize) -> Result<LowRankApprox> {
    let l = w.rows().min(w.cols());
    if r == 0 || r > l {
        return Err(Error::InvalidArgument(format!("rank {r} must be in 1..={l}")));
    }
    let wt = whiten(factor, w)?;
    let mut svd = linalg::thin_svd(wt.as_mat())?;
    linalg::fix_signs(&mut svd.u, Some(&mut svd.v));
    let root: Vec<f64> = svd.s[..r].iter().map(|s| s.sqrt()).collect();
    let us = Mat::from_fn(w.rows(), r, |i, j| svd.u[(i, j)] * root[j]);
    let right = Mat::from_fn(r, w.cols(), |i, j| root[i] * svd.v[(j, i)]);
    let left = factor.dewhiten_mat(us.as_ref())?;
    Ok(LowRankApprox {
        left,
        right,
        whitened_residual_sq: svd.s[r..].iter().map(|s| s * s).sum(),
    })
}

/// Rank used by the theoretical-loss listing: `int(m·n·cr / (m+n))`.
pub fn listing_rank(m: usize, n: usize, cr: f64) -> usize {
    ((m * n) as f64 * cr / (m + n) as f64) as usize
}

/// Frobenius norm (not squared) of the whitened residual at the listing's
/// rank. `cr` is the kept fraction here, as in the listing. Rank 0 gives
/// `‖W̃‖_F`.
pub fn theoretical_loss(w: &WeightMatrix, factor: &CholeskyFactor, cr: f64) -> Result<f64> {
    if !(cr > 0.0 && cr < 1.0) {
        return Err(Error::InvalidArgument(format!("cr {cr} must be in (0, 1)")));
    }
    let wt = whiten(factor, w)?;
    let rank = listing_rank(w.rows(), w.cols(), cr).min(w.rows().min(w.cols()));
    let svd = linalg::thin_svd(wt.as_mat())?;
    let trunc = Mat::from_fn(w.rows(), w.cols(), |i, j| {
        (0..rank).map(|q| svd.u[(i, q)] * svd.s[q] * svd.v[(j, q)]).sum::<f64>()
    });
    Ok(linalg::diff_frobenius_sq(wt.as_mat(), trunc.as_ref()).sqrt())
}

/// Ratios for one group from its losses: `|G|·cr·ℓ_i / Σℓ` with
/// `ℓ_i = 1/ln(loss_i)`. Fails when any loss is ≤ 1.
pub fn v2_group_ratios(names: &[&str], losses: &[f64], target_cr: f64) -> Result<Vec<f64>> {
    let mut inv = Vec::with_capacity(losses.len());
    for (name, &loss) in names.iter().zip(losses) {
        // the listing takes log of the raw loss; it is only a valid weight above 1
        if !(loss > 1.0) {
            return Err(Error::V2NormalizationUndefined {
                name: name.to_string(),
                loss,
            });
        }
        inv.push(1.0 / loss.ln());
    }
    let sum: f64 = inv.iter().fold(0.0, |a, b| a + b);
    let len = inv.len() as f64;
    Ok(inv.iter().map(|l| len * target_cr * l / sum).collect())
}

pub struct V2Input<'a> {
    pub group: &'a str,
    pub weight: &'a WeightMatrix,
    pub factor: &'a CholeskyFactor,
}

/// Per-matrix ratios, in input order. Groups are formed by `group` and
/// each is normalized independently.
pub fn v2_cr_allocation(items: &[V2Input<'_>], target_cr: f64) -> Result<Vec<f64>> {
    let losses = items
        .iter()
        .map(|it| theoretical_loss(it.weight, it.factor, target_cr))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; items.len()];
    let mut order: Vec<&str> = Vec::new();
    for it in items {
        if !order.contains(&it.group) {
            order.push(it.group);
        }
    }
    for g in order {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].group == g).collect();
        let names: Vec<&str> = idx.iter().map(|&i| items[i].weight.name()).collect();
        let group_losses: Vec<f64> = idx.iter().map(|&i| losses[i]).collect();
        for (&i, r) in idx.iter().zip(v2_group_ratios(&names, &group_losses, target_cr)?) {
            out[i] = r;
        }
    }
    Ok(out)
}

pub const BRUTE_FORCE_MAX_K: usize = 12;

/// Exact best `s`-sparse code of `w` over the columns of `d`: least squares
/// on every support of size `min(s, k)`. Returns `(code, residual norm)`.
pub fn brute_force_sparse_code(d: MatRef<'_, f64>, w: &[f64], s: usize) -> Result<(Vec<f64>, f64)> {
    let (m, k) = (d.nrows(), d.ncols());
    if k > BRUTE_FORCE_MAX_K {
        return Err(Error::InvalidArgument(format!("k = {k} too large for exhaustive search")));
    }
    if w.len() != m {
        return Err(Error::DimensionMismatch(format!("column of length {} for {m} rows", w.len())));
    }
    let s = s.min(k);
    let wv = Mat::from_fn(m, 1, |i, _| w[i]);
    let mut best = (vec![0.0; k], linalg::frobenius(wv.as_ref()));
    for support in 0u32..(1u32 << k) {
        if support.count_ones() as usize != s || s == 0 {
            continue;
        }
        let cols: Vec<usize> = (0..k).filter(|j| support >> j & 1 == 1).collect();
        let sub = Mat::from_fn(m, s, |i, j| d[(i, cols[j])]);
        let coef = sub.qr().solve_lstsq(&wv);
        let fit = linalg::mul(sub.as_ref(), coef.as_ref());
        let res = linalg::diff_frobenius_sq(wv.as_ref(), fit.as_ref()).sqrt();
        if res < best.1 {
            let mut code = vec![0.0; k];
            for (j, &c) in cols.iter().enumerate() {
                code[c] = coef[(j, 0)];
            }
            best = (code, res);
        }
    }
    Ok(best)
}
