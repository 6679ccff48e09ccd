//! Calibration Gram accumulation, Cholesky factorization with ridge
//! fallback, and the whitening / dewhitening transforms.
//!
//! With `G = XᵀX = L·Lᵀ`, the functional error of any approximation `Ŵ`
//! satisfies `‖X(W − Ŵ)‖²_F = ‖Lᵀ(W − Ŵ)‖²_F`, so compression can work on
//! the whitened weight `W̃ = Lᵀ·W` with a plain Frobenius objective. A
//! dictionary learned in whitened space maps back through `A = L⁻ᵀ·D`.

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::solve_upper_triangular_in_place;
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensorio::{Tensor, WeightMatrix};

/// Running `G = XᵀX` over activation chunks, in f64.
#[derive(Debug, Clone)]
pub struct GramState {
    gram: Mat<f64>,
    samples: u64,
}

impl GramState {
    pub fn new(dim: usize) -> Self {
        Self {
            gram: Mat::zeros(dim, dim),
            samples: 0,
        }
    }

    /// Wraps an already accumulated Gram matrix (e.g. loaded from disk).
    pub fn from_gram(gram: Mat<f64>, samples: u64) -> Result<Self> {
        if gram.nrows() != gram.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "gram must be square, got {}x{}",
                gram.nrows(),
                gram.ncols()
            )));
        }
        if !linalg::is_all_finite(gram.as_ref()) {
            return Err(Error::NonFinite("gram".into()));
        }
        Ok(Self { gram, samples })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn gram(&self) -> MatRef<'_, f64> {
        self.gram.as_ref()
    }

    /// Adds `chunkᵀ·chunk` for an N_c×m activation block.
    pub fn accumulate(&mut self, chunk: MatRef<'_, f64>) -> Result<()> {
        if chunk.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "activation width {} != gram dim {}",
                chunk.ncols(),
                self.dim()
            )));
        }
        if !linalg::is_all_finite(chunk) {
            return Err(Error::NonFinite("activation chunk".into()));
        }
        matmul(
            self.gram.as_mut(),
            Accum::Add,
            chunk.transpose(),
            chunk,
            1.0,
            Par::Seq,
        );
        // mirror the lower triangle so G stays exactly symmetric
        let m = self.dim();
        for j in 0..m {
            for i in (j + 1)..m {
                self.gram[(j, i)] = self.gram[(i, j)];
            }
        }
        self.samples += chunk.nrows() as u64;
        Ok(())
    }

    /// Row-major N_c×m block.
    pub fn accumulate_rows(&mut self, rows: usize, data: &[f64]) -> Result<()> {
        let m = self.dim();
        if rows.checked_mul(m) != Some(data.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{} values is not {rows} rows of width {m}",
                data.len()
            )));
        }
        self.accumulate(linalg::from_row_major_f64(rows, m, data).as_ref())
    }

    pub fn mean_diagonal(&self) -> f64 {
        let m = self.dim();
        if m == 0 {
            return 0.0;
        }
        (0..m).map(|i| self.gram[(i, i)]).sum::<f64>() / m as f64
    }

    /// `G` as an f64 m×m tensor.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.dim();
        Tensor::from_f64(vec![m, m], &linalg::to_row_major(self.gram.as_ref()))
            .expect("square gram")
    }
}

/// Ridge escalation: `ε = initial·mean(diag G)`, multiplied by `growth`
/// until it exceeds `max·mean(diag G)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgePolicy {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for RidgePolicy {
    fn default() -> Self {
        Self {
            initial: 1e-8,
            growth: 10.0,
            max: 1e-2,
        }
    }
}

/// Pivots below this fraction of mean(diag G) count as a failed
/// factorization: rank-deficient Grams otherwise "succeed" on rounding noise.
pub const PIVOT_FLOOR: f64 = 1e-10;

/// Lower-triangular `L` with `L·Lᵀ = G + ridge_used·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Mat<f64>,
    ridge_used: f64,
}

impl CholeskyFactor {
    /// `L = I`: no calibration, whitening is the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            lower: Mat::identity(dim, dim),
            ridge_used: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> MatRef<'_, f64> {
        self.lower.as_ref()
    }

    pub fn ridge_used(&self) -> f64 {
        self.ridge_used
    }

    /// `Lᵀ·W`
    pub fn whiten_mat(&self, w: MatRef<'_, f64>) -> Result<Mat<f64>> {
        if w.nrows() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "whiten: factor dim {} vs weight rows {}",
                self.dim(),
                w.nrows()
            )));
        }
        Ok(linalg::mul_tn(self.lower.as_ref(), w))
    }

    /// `L⁻ᵀ·B` by back substitution on the upper-triangular `Lᵀ`.
    pub fn dewhiten_mat(&self, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "dewhiten: factor dim {} vs rows {}",
                self.dim(),
                b.nrows()
            )));
        }
        let mut out = b.to_owned();
        solve_upper_triangular_in_place(self.lower.transpose(), out.as_mut(), Par::Seq);
        Ok(out)
    }
}

/// Factorizes `G`, escalating a diagonal ridge per `policy` when the plain
/// factorization fails or produces a pivot below [`PIVOT_FLOOR`].
pub fn cholesky(state: &GramState, policy: &RidgePolicy) -> Result<CholeskyFactor> {
    if state.samples() == 0 {
        return Err(Error::GramNotFactorizable("no calibration samples".into()));
    }
    let m = state.dim();
    let scale = state.mean_diagonal();
    if !(scale > 0.0) {
        return Err(Error::GramNotFactorizable("gram has zero trace".into()));
    }
    let floor = PIVOT_FLOOR * scale;

    let attempt = |ridge: f64| -> Option<Mat<f64>> {
        let mut g = state.gram.clone();
        for i in 0..m {
            g[(i, i)] += ridge;
        }
        let llt = g.llt(Side::Lower).ok()?;
        let l = llt.L().to_owned();
        (0..m)
            .all(|i| l[(i, i)].is_finite() && l[(i, i)] * l[(i, i)] >= floor)
            .then_some(l)
    };

    if let Some(lower) = attempt(0.0) {
        return Ok(CholeskyFactor {
            lower,
            ridge_used: 0.0,
        });
    }
    let mut rel = policy.initial;
    while rel <= policy.max * (1.0 + 1e-12) {
        let ridge = rel * scale;
        if let Some(lower) = attempt(ridge) {
            return Ok(CholeskyFactor {
                lower,
                ridge_used: ridge,
            });
        }
        rel *= policy.growth;
    }
    Err(Error::GramNotFactorizable(format!(
        "failed up to ridge {:e}·mean(diag G)",
        policy.max
    )))
}

/// `W̃ = Lᵀ·W`, kept in f64 for the factorizer.
#[derive(Debug, Clone)]
pub struct WhitenedWeight(Mat<f64>);

impl WhitenedWeight {
    /// Treats `m` as already whitened.
    pub fn from_mat(m: Mat<f64>) -> Self {
        Self(m)
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        self.0.as_ref()
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }
}

pub fn whiten(factor: &CholeskyFactor, w: &WeightMatrix) -> Result<WhitenedWeight> {
    Ok(WhitenedWeight(factor.whiten_mat(w.to_mat().as_ref())?))
}

/// `A = L⁻ᵀ·D`, computed by triangular solve.
pub fn dewhiten_dictionary(
    factor: &CholeskyFactor,
    dictionary: &crate::factorizer::OrthoDictionary,
) -> Result<Mat<f64>> {
    factor.dewhiten_mat(dictionary.atoms())
}
