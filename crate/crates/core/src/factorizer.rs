//! Orthogonal-dictionary sparse factorization of a whitened weight.
//!
//! Minimizes `‖W̃ − D·S‖²_F` subject to `DᵀD = I_k` (k ≤ m) and at most `s`
//! nonzeros per column of `S`, by alternating two exact block updates:
//!
//! - coding: with `D` fixed the problem splits per column and
//!   `‖w̃ − D·c‖² = ‖w̃‖² − ‖z‖² + ‖c − z‖²` with `z = Dᵀw̃`, so the optimum
//!   keeps the `s` largest-magnitude entries of `z` (hard thresholding);
//! - dictionary: with `S` fixed the problem is an orthogonal Procrustes
//!   problem, maximize `tr(DᵀM)` for `M = W̃·Sᵀ`, solved by `D = P·Qᵀ` from
//!   the thin SVD `M = P·Λ·Qᵀ`.
//!
//! Both steps are global minimizers of their block, so the loss never
//! increases. After a dictionary update the loss is available in closed
//! form, `‖W̃‖² − 2·Σλ + ‖S‖²`, without forming the residual.

use faer::{Mat, MatRef};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::WhitenedWeight;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum InitMode {
    /// Top-k left singular vectors of `W̃`.
    Svd,
    /// k columns of `W̃` picked by a seeded permutation, orthonormalized.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizerConfig {
    pub ks_ratio: f64,
    pub max_iterations: usize,
    pub init: InitMode,
    /// Stop once `|loss[t-1] − loss[t]| / loss[t-1] ≤ τ`.
    pub early_stop: Option<f64>,
    pub sign_fix: bool,
}

impl Default for FactorizerConfig {
    fn default() -> Self {
        Self {
            ks_ratio: 2.0,
            max_iterations: 20,
            init: InitMode::Svd,
            early_stop: None,
            sign_fix: true,
        }
    }
}

/// Column-orthonormal m×k dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoDictionary {
    atoms: Mat<f64>,
}

/// Orthonormality slack accepted by [`OrthoDictionary::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-5;

impl OrthoDictionary {
    pub fn new(atoms: Mat<f64>) -> Result<Self> {
        if atoms.ncols() > atoms.nrows() {
            return Err(Error::InvalidArgument(format!(
                "dictionary {}x{} is overcomplete",
                atoms.nrows(),
                atoms.ncols()
            )));
        }
        let defect = linalg::orthonormality_defect(atoms.as_ref());
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidArgument(format!(
                "dictionary columns not orthonormal (defect {defect:e})"
            )));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> MatRef<'_, f64> {
        self.atoms.as_ref()
    }

    pub fn m(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn k(&self) -> usize {
        self.atoms.ncols()
    }
}

/// k×n codes with at most `s` stored entries per column, stored by column
/// with row indices strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodes {
    k: usize,
    n: usize,
    s: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseCodes {
    /// Builds codes from per-column `(row, value)` lists.
    pub fn from_columns(k: usize, s: usize, columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = columns.len();
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for (j, mut col) in columns.into_iter().enumerate() {
            if col.len() > s {
                return Err(Error::InvalidArgument(format!(
                    "column {j} has {} entries, more than s = {s}",
                    col.len()
                )));
            }
            col.sort_by_key(|&(r, _)| r);
            for w in col.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::InvalidArgument(format!("column {j}: duplicate row {}", w[0].0)));
                }
            }
            for (r, v) in col {
                if r >= k {
                    return Err(Error::InvalidArgument(format!("column {j}: row {r} >= k = {k}")));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("code column {j}")));
                }
                row_idx.push(r as u32);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self {
            k,
            n,
            s,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(row, value)` pairs of column `j`, rows increasing.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[r.clone()]
            .iter()
            .zip(&self.values[r])
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut out = Mat::zeros(self.k, self.n);
        for j in 0..self.n {
            for (i, v) in self.column(j) {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Largest `s` (with `k = clamp(round(ks_ratio·s), 1, m)`) such that
/// `16mk + 16sn + kn ≤ (1 − target_cr)·16mn`.
pub fn solve_ks(m: usize, n: usize, target_cr: f64, ks_ratio: f64) -> Result<(usize, usize)> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("solve_ks: empty matrix".into()));
    }
    if !(target_cr.is_finite() && target_cr < 1.0) {
        return Err(Error::InvalidArgument(format!("target cr {target_cr} must be < 1")));
    }
    if !(ks_ratio.is_finite() && ks_ratio > 1.0) {
        return Err(Error::InvalidArgument(format!("k/s ratio {ks_ratio} must be > 1")));
    }
    let budget = (1.0 - target_cr) * 16.0 * (m as f64) * (n as f64);
    let k_of = |s: usize| ((ks_ratio * s as f64).round() as usize).clamp(1, m);
    let bits = |k: usize, s: usize| (16 * m * k + 16 * s * n + k * n) as f64;
    // storage grows with s, so the feasible set is a prefix of 1..=m
    let fits = |s: usize| {
        let k = k_of(s);
        s <= k && bits(k, s) <= budget
    };
    if !fits(1) {
        return Err(Error::BudgetTooTight { m, n, target_cr });
    }
    let (mut lo, mut hi) = (1usize, m);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok((k_of(lo), lo))
}

pub fn init_dictionary(
    w: &WhitenedWeight,
    k: usize,
    mode: InitMode,
    sign_fix: bool,
) -> Result<OrthoDictionary> {
    let m = w.rows();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("dictionary size k = {k} must be in 1..={m}")));
    }
    let mut atoms = match mode {
        InitMode::Svd => {
            let svd = linalg::thin_svd(w.as_mat())?;
            let mut u = svd.u;
            // sign-fix the singular vectors before any truncation or completion
            linalg::fix_signs(&mut u, None);
            let keep = k.min(u.ncols());
            let top = u.as_ref().subcols(0, keep).to_owned();
            if keep < k {
                linalg::complete_orthonormal(top.as_ref(), k)
            } else {
                top
            }
        }
        InitMode::Random { seed } => random_orthonormal_subset(w.as_mat(), k, seed)?,
    };
    if sign_fix {
        linalg::fix_signs(&mut atoms, None);
    }
    OrthoDictionary::new(atoms)
}

const RANDOM_INIT_DRAWS: usize = 8;

fn random_orthonormal_subset(w: MatRef<'_, f64>, k: usize, seed: u64) -> Result<Mat<f64>> {
    let (m, n) = (w.nrows(), w.ncols());
    if k > n {
        return Err(Error::Initialization(format!(
            "random init needs k = {k} columns but W has {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..RANDOM_INIT_DRAWS {
        order.shuffle(&mut rng);
        let picked = Mat::from_fn(m, k, |i, j| w[(i, order[j])]);
        let qr = picked.qr();
        let r = qr.thin_R();
        let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
        let top = diag.iter().copied().fold(0.0, f64::max);
        if top > 0.0 && diag.iter().all(|&d| d > 1e-10 * top) {
            return Ok(qr.compute_thin_Q());
        }
    }
    Err(Error::Initialization(format!(
        "no {k} numerically independent columns after {RANDOM_INIT_DRAWS} draws"
    )))
}

/// `H_s`: the `s` largest-magnitude entries of `z` as `(row, value)` with
/// rows increasing. Equal magnitudes keep the lower row.
pub fn hard_threshold(z: &[f64], s: usize) -> Vec<(usize, f64)> {
    if s >= z.len() {
        return z.iter().copied().enumerate().collect();
    }
    if s == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..z.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| z[b].abs().total_cmp(&z[a].abs()).then(a.cmp(&b));
    idx.select_nth_unstable_by(s - 1, by_rank);
    let mut keep = idx[..s].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| (i, z[i])).collect()
}

/// `S = H_s(Dᵀ·W̃)`, column by column.
pub fn sparse_code(d: &OrthoDictionary, w: &WhitenedWeight, s: usize) -> Result<SparseCodes> {
    if d.m() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary has {} rows, weight {}",
            d.m(),
            w.rows()
        )));
    }
    if s == 0 || s > d.k() {
        return Err(Error::InvalidArgument(format!("sparsity s = {s} must be in 1..={}", d.k())));
    }
    let z = linalg::mul_tn(d.atoms(), w.as_mat());
    let columns = (0..z.ncols())
        .map(|j| hard_threshold(z.col_as_slice(j), s))
        .collect();
    SparseCodes::from_columns(d.k(), s, columns)
}

/// Polar factor `P·Qᵀ` of `m` together with its nuclear norm `Σλ`, or
/// `None` when `m` is identically zero.
pub fn orthogonal_polar(m: MatRef<'_, f64>) -> Result<Option<(Mat<f64>, f64)>> {
    if linalg::max_abs(m) == 0.0 {
        return Ok(None);
    }
    let svd = linalg::thin_svd(m)?;
    let polar = linalg::mul(svd.u.as_ref(), svd.v.as_ref().transpose());
    Ok(Some((polar, svd.s.iter().sum())))
}

#[derive(Debug, Clone)]
pub struct ProcrustesStep {
    pub dictionary: OrthoDictionary,
    /// `tr(Dᵀ·M)` for the returned dictionary.
    pub alignment: f64,
    /// `M` was zero and the previous dictionary was kept.
    pub degenerate: bool,
}

/// `D = P·Qᵀ` for `M = W̃·Sᵀ = P·Λ·Qᵀ`.
pub fn procrustes_update(
    w: &WhitenedWeight,
    codes: &SparseCodes,
    previous: &OrthoDictionary,
) -> Result<ProcrustesStep> {
    if codes.n() != w.cols() || codes.k() != previous.k() || previous.m() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "procrustes: W̃ {}x{}, S {}x{}, D {}x{}",
            w.rows(),
            w.cols(),
            codes.k(),
            codes.n(),
            previous.m(),
            previous.k()
        )));
    }
    let cross = linalg::mul(w.as_mat(), codes.to_dense().as_ref().transpose());
    match orthogonal_polar(cross.as_ref())? {
        Some((atoms, nuclear)) => Ok(ProcrustesStep {
            dictionary: OrthoDictionary::new(atoms)?,
            alignment: nuclear,
            degenerate: false,
        }),
        None => Ok(ProcrustesStep {
            dictionary: previous.clone(),
            alignment: 0.0,
            degenerate: true,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Tolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationTrace {
    /// Whitened loss `‖W̃ − D_t·S_t‖²_F` after each iteration.
    pub losses: Vec<f64>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    /// Iterations whose Procrustes step saw `M = 0`.
    pub degenerate_updates: usize,
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub dictionary: OrthoDictionary,
    pub codes: SparseCodes,
    pub trace: FactorizationTrace,
}

impl Factorization {
    pub fn reconstruct(&self) -> Mat<f64> {
        linalg::mul(self.dictionary.atoms(), self.codes.to_dense().as_ref())
    }
}

pub fn factorize(w: &WhitenedWeight, cfg: &FactorizerConfig, k: usize, s: usize) -> Result<Factorization> {
    if k == 0 || k > w.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={}", w.rows())));
    }
    if s == 0 || s > k {
        return Err(Error::InvalidArgument(format!("s = {s} must be in 1..={k}")));
    }
    if cfg.max_iterations == 0 {
        return Err(Error::InvalidArgument("max_iterations must be positive".into()));
    }
    if !linalg::is_all_finite(w.as_mat()) {
        return Err(Error::NonFinite("whitened weight".into()));
    }
    let total = linalg::frobenius_sq(w.as_mat());
    let mut dictionary = init_dictionary(w, k, cfg.init, cfg.sign_fix)?;
    let mut losses = Vec::with_capacity(cfg.max_iterations);
    let mut degenerate_updates = 0;
    let mut stop_reason = StopReason::MaxIterations;
    let mut codes = None;

    for _ in 0..cfg.max_iterations {
        let s_codes = sparse_code(&dictionary, w, s)?;
        let step = procrustes_update(w, &s_codes, &dictionary)?;
        let alignment = if step.degenerate {
            degenerate_updates += 1;
            // M = 0 so tr(DᵀM) = 0 for any D
            0.0
        } else {
            step.alignment
        };
        dictionary = step.dictionary;
        let loss = (total - 2.0 * alignment + s_codes.squared_norm()).max(0.0);
        codes = Some(s_codes);

        let prev = losses.last().copied();
        losses.push(loss);
        if let (Some(tol), Some(prev)) = (cfg.early_stop, prev) {
            let converged = if prev > 0.0 {
                (prev - loss).abs() / prev <= tol
            } else {
                true
            };
            if converged {
                stop_reason = StopReason::Tolerance;
                break;
            }
        }
    }

    Ok(Factorization {
        dictionary,
        codes: codes.expect("at least one iteration"),
        trace: FactorizationTrace {
            iterations_run: losses.len(),
            losses,
            stop_reason,
            degenerate_updates,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        linalg::from_row_major_f64(rows, cols, v)
    }

    #[test]
    fn threshold_keeps_two_largest() {
        assert_eq!(hard_threshold(&[3.0, -5.0, 1.0], 2), vec![(0, 3.0), (1, -5.0)]);
        assert_eq!(hard_threshold(&[0.0, 0.0, 0.0], 2), vec![(0, 0.0), (1, 0.0)]);
    }

    #[test]
    fn threshold_ties_keep_lowest_row() {
        assert_eq!(hard_threshold(&[1.0, -2.0, 2.0, 2.0], 2), vec![(1, -2.0), (2, 2.0)]);
        assert_eq!(hard_threshold(&[1.0, 1.0, 1.0], 1), vec![(0, 1.0)]);
    }

    #[test]
    fn solve_ks_square_64() {
        assert_eq!(solve_ks(64, 64, 0.2, 2.0).unwrap(), (32, 16));
    }

    #[test]
    fn solve_ks_degenerate_budget() {
        assert!(matches!(
            solve_ks(64, 64, 0.999, 2.0),
            Err(Error::BudgetTooTight { .. })
        ));
    }

    #[test]
    fn solve_ks_clamps_k() {
        // ratio 10: s = 1 already wants k = 10 > m = 4
        let (k, s) = solve_ks(4, 1000, 0.1, 10.0).unwrap();
        assert_eq!(k, 4);
        assert!(s <= k);
        let bits = 16 * 4 * k + 16 * s * 1000 + k * 1000;
        assert!(bits as f64 <= 0.9 * 16.0 * 4000.0);
        assert!((16 * 4 * 4 + 16 * (s + 1) * 1000 + 4 * 1000) as f64 > 0.9 * 16.0 * 4000.0 || s == k);
    }

    #[test]
    fn svd_init_identity() {
        let w = WhitenedWeight::from_mat(Mat::identity(5, 5));
        let d = init_dictionary(&w, 5, InitMode::Svd, true).unwrap();
        assert!(linalg::orthonormality_defect(d.atoms()) < 1e-12);
        // every column is a signed unit vector; the sign fix makes it +e_i
        for j in 0..5 {
            let col: Vec<f64> = (0..5).map(|i| d.atoms()[(i, j)]).collect();
            let ones = col.iter().filter(|v| (**v - 1.0).abs() < 1e-12).count();
            assert_eq!(ones, 1, "column {j}: {col:?}");
        }
        let perm_is_identity = (0..5).all(|j| (d.atoms()[(j, j)] - 1.0).abs() < 1e-12);
        assert!(perm_is_identity);
    }

    #[test]
    fn svd_init_completes_wide_dictionary_for_short_inputs() {
        // n = 2 < k = 3 <= m = 4
        let w = WhitenedWeight::from_mat(mat(4, 2, &[1., 0., 0., 2., 1., 1., 0., 0.]));
        let d = init_dictionary(&w, 3, InitMode::Svd, true).unwrap();
        assert_eq!(d.k(), 3);
        assert!(linalg::orthonormality_defect(d.atoms()) < 1e-12);
    }

    #[test]
    fn random_init_is_deterministic_and_checks_rank() {
        let w = WhitenedWeight::from_mat(Mat::from_fn(6, 10, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0));
        let a = init_dictionary(&w, 4, InitMode::Random { seed: 9 }, true).unwrap();
        let b = init_dictionary(&w, 4, InitMode::Random { seed: 9 }, true).unwrap();
        assert_eq!(a, b);
        let rank1 = WhitenedWeight::from_mat(Mat::from_fn(4, 6, |i, j| (i + 1) as f64 * (j + 1) as f64));
        assert!(matches!(
            init_dictionary(&rank1, 2, InitMode::Random { seed: 1 }, true),
            Err(Error::Initialization(_))
        ));
        assert!(init_dictionary(&w, 7, InitMode::Svd, true).is_err());
    }

    #[test]
    fn polar_of_identity_and_signed_diagonal() {
        let (p, nuc) = orthogonal_polar(Mat::<f64>::identity(3, 3).as_ref()).unwrap().unwrap();
        assert!(linalg::diff_frobenius_sq(p.as_ref(), Mat::<f64>::identity(3, 3).as_ref()) < 1e-24);
        assert!((nuc - 3.0).abs() < 1e-12);
        let (p, nuc) = orthogonal_polar(mat(2, 2, &[2., 0., 0., -3.]).as_ref()).unwrap().unwrap();
        assert!(linalg::diff_frobenius_sq(p.as_ref(), mat(2, 2, &[1., 0., 0., -1.]).as_ref()) < 1e-24);
        assert!((nuc - 5.0).abs() < 1e-12);
        assert!(orthogonal_polar(Mat::<f64>::zeros(3, 2).as_ref()).unwrap().is_none());
    }

    #[test]
    fn zero_weight_keeps_dictionary() {
        let w = WhitenedWeight::from_mat(Mat::zeros(4, 3));
        let d = OrthoDictionary::new(Mat::identity(4, 2)).unwrap();
        let codes = sparse_code(&d, &w, 1).unwrap();
        let step = procrustes_update(&w, &codes, &d).unwrap();
        assert!(step.degenerate);
        assert_eq!(step.dictionary, d);
        let f = factorize(&w, &FactorizerConfig::default(), 2, 1);
        // the svd of a zero matrix still gives an orthonormal basis
        let f = f.unwrap();
        assert_eq!(f.trace.losses.last().copied(), Some(0.0));
        assert_eq!(f.trace.degenerate_updates, f.trace.iterations_run);
    }

    #[test]
    fn orthogonal_input_is_exact_after_one_iteration() {
        let q = linalg::thin_svd(Mat::from_fn(6, 6, |i, j| ((i * 5 + j * 3) % 7) as f64 + if i == j { 3.0 } else { 0.0 }).as_ref())
            .unwrap()
            .u;
        let w = WhitenedWeight::from_mat(q);
        let f = factorize(&w, &FactorizerConfig::default(), 6, 6).unwrap();
        assert!(f.trace.losses[0] < 1e-10);
        let explicit = linalg::diff_frobenius_sq(w.as_mat(), f.reconstruct().as_ref());
        assert!(explicit < 1e-10);
    }

    #[test]
    fn early_stop_uses_relative_change() {
        let w = WhitenedWeight::from_mat(Mat::from_fn(8, 12, |i, j| ((i * 13 + j * 7) % 17) as f64 - 8.0));
        let cfg = FactorizerConfig {
            early_stop: Some(1e-3),
            max_iterations: 200,
            ..Default::default()
        };
        let f = factorize(&w, &cfg, 4, 2).unwrap();
        let l = &f.trace.losses;
        if f.trace.stop_reason == StopReason::Tolerance {
            let n = l.len();
            assert!((l[n - 2] - l[n - 1]).abs() / l[n - 2] <= 1e-3);
            for t in 1..n - 1 {
                assert!((l[t - 1] - l[t]).abs() / l[t - 1] > 1e-3);
            }
        } else {
            assert_eq!(l.len(), 200);
        }
    }

    #[test]
    fn argument_errors() {
        let w = WhitenedWeight::from_mat(Mat::identity(3, 3));
        let d = OrthoDictionary::new(Mat::identity(3, 2)).unwrap();
        assert!(sparse_code(&d, &w, 3).is_err());
        assert!(sparse_code(&d, &w, 0).is_err());
        assert!(factorize(&w, &FactorizerConfig::default(), 4, 1).is_err());
        assert!(factorize(&w, &FactorizerConfig::default(), 2, 3).is_err());
        assert!(OrthoDictionary::new(Mat::from_fn(2, 2, |_, _| 1.0)).is_err());
    }
}
