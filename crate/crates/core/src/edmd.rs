//! EDMD fits, the consistency index and its worst-case certificate.
//!
//! All inner products are the empirical ones on the data columns. For
//! `A = Psi(X)` and `B = Psi(X+)` the forward and backward fits are
//! `K_F = B A^+`, `K_B = A B^+` and the consistency index is
//! `lambda_max(I - K_F K_B)`.
//!
//! `I - K_F K_B` is generally not symmetric, but with `B = U S V^T` (thin SVD)
//! it is similar to `R^T R`, `R = (I - P_A) V`, where `P_A` projects onto the
//! row space of `A`. Eigenvalues are taken from that symmetric form; each
//! missing rank direction of `B` adds an eigenvalue 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::AugmentedSnapshots;
use crate::error::{KcfError, Result};
use crate::linalg::{pinv, sym_eigen_desc, truncated_svd, DEFAULT_PINV_RCOND, DEFAULT_RANK_TOL};
use crate::observables::NormalDictionary;

/// Row-rank diagnostics for a pair of dictionary matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFlags {
    pub row_rank_ok_x: bool,
    pub row_rank_ok_xplus: bool,
    pub rank_x: usize,
    pub rank_xplus: usize,
    /// `sigma_min / sigma_max` of `Psi(X)` and `Psi(X+)`.
    pub min_singular_values: (f64, f64),
}

fn rank_flags(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> RankFlags {
    let sa = truncated_svd(a, rcond);
    let sb = truncated_svd(b, rcond);
    let rel = |s: &[f64], rows: usize| {
        if s.len() < rows || s.is_empty() || s[0] == 0.0 {
            0.0
        } else {
            s[rows - 1] / s[0]
        }
    };
    let s = a.nrows();
    RankFlags {
        row_rank_ok_x: sa.rank() == s && rel(&sa.all_sigma, s) > DEFAULT_RANK_TOL,
        row_rank_ok_xplus: sb.rank() == s && rel(&sb.all_sigma, s) > DEFAULT_RANK_TOL,
        rank_x: sa.rank(),
        rank_xplus: sb.rank(),
        min_singular_values: (rel(&sa.all_sigma, s), rel(&sb.all_sigma, s)),
    }
}

fn check_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(KcfError::DimensionMismatch(format!(
            "Psi(X) is {}x{} but Psi(X+) is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.ncols() == 0 || a.nrows() == 0 {
        return Err(KcfError::DegenerateData("empty dictionary matrix".into()));
    }
    if a.iter().all(|&v| v == 0.0) {
        return Err(KcfError::DegenerateData(
            "Psi(X) is identically zero".into(),
        ));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(KcfError::DegenerateData(
            "dictionary matrix has non-finite entries".into(),
        ));
    }
    Ok(())
}

/// Least-squares solution of `min ||Psi(X+) - K Psi(X)||_F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdmdFit {
    pub k: DMatrix<f64>,
    pub rank_report: RankFlags,
}

/// `K = Psi(X+) Psi(X)^+`. Rank deficiency is logged, not rejected.
pub fn fit_edmd(psi_x: &DMatrix<f64>, psi_xplus: &DMatrix<f64>) -> Result<EdmdFit> {
    fit_edmd_with(psi_x, psi_xplus, DEFAULT_PINV_RCOND)
}

pub fn fit_edmd_with(
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
    rcond: f64,
) -> Result<EdmdFit> {
    check_pair(psi_x, psi_xplus)?;
    let rank_report = rank_flags(psi_x, psi_xplus, rcond);
    if !rank_report.row_rank_ok_x {
        log::warn!(
            "Psi(X) has rank {} < {}; the EDMD matrix is not unique",
            rank_report.rank_x,
            psi_x.nrows()
        );
    }
    Ok(EdmdFit {
        k: psi_xplus * pinv(psi_x, rcond),
        rank_report,
    })
}

/// `w^T K psi_x`: the EDMD prediction of the function `w^T Psi` one step ahead.
pub fn predict_function(fit: &EdmdFit, w: &DVector<f64>, psi_x: &DVector<f64>) -> Result<f64> {
    let s = fit.k.nrows();
    if w.len() != s || psi_x.len() != s {
        return Err(KcfError::DimensionMismatch(format!(
            "expected vectors of length {s}, got {} and {}",
            w.len(),
            psi_x.len()
        )));
    }
    Ok((w.transpose() * &fit.k * psi_x)[(0, 0)])
}

/// Residual `Psi(X+) - K Psi(X)` with its column norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResidual {
    pub residual: DMatrix<f64>,
    pub column_norms: Vec<f64>,
}

impl ProjectionResidual {
    pub fn frobenius(&self) -> f64 {
        self.residual.norm()
    }
}

pub fn projection_residual(
    fit: &EdmdFit,
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
) -> ProjectionResidual {
    let residual = psi_xplus - &fit.k * psi_x;
    let column_norms = residual.column_iter().map(|c| c.norm()).collect();
    ProjectionResidual {
        residual,
        column_norms,
    }
}

/// `||w^T (B - K A)|| / ||w^T B||`: relative one-step error of the function
/// `w^T Psi` under the predictor `K`. `None` when the denominator vanishes.
pub fn relative_prediction_error(
    w: &DVector<f64>,
    k: &DMatrix<f64>,
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
) -> Option<f64> {
    let truth = w.transpose() * psi_xplus;
    let denom = truth.norm();
    if denom == 0.0 {
        return None;
    }
    Some((truth - w.transpose() * k * psi_x).norm() / denom)
}

/// Numerical details kept next to the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexDiagnostics {
    /// Largest eigenvalue before clamping to `[0, 1]`.
    pub raw_index: f64,
    /// Largest real part of the eigenvalues of `I - K_F K_B` formed
    /// literally with pseudo-inverses; `None` when the eigenvalue iteration
    /// does not converge.
    pub literal_index: Option<f64>,
    /// Relative asymmetry of the literal `I - K_F K_B`.
    pub literal_asymmetry: f64,
    /// Eigenvalues of the consistency matrix, descending, clamped.
    pub eigenvalues: Vec<f64>,
}

/// Consistency index with trace bounds and the maximizing function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub index: f64,
    pub sqrt_index: f64,
    pub trace_lower: f64,
    pub trace_upper: f64,
    /// Coefficients `w` of the function `w^T Psi` with the largest relative
    /// one-step error; unit norm, first nonzero entry positive.
    pub worst_coeffs: Vec<f64>,
    pub rank_flags: RankFlags,
    pub diagnostics: IndexDiagnostics,
    #[serde(skip)]
    pub k_f: DMatrix<f64>,
    #[serde(skip)]
    pub k_b: DMatrix<f64>,
}

impl ConsistencyReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `lambda_max(I - K_F K_B)` for `A = Psi(X)`, `B = Psi(X+)`.
pub fn consistency_index(
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
) -> Result<ConsistencyReport> {
    consistency_index_with(psi_x, psi_xplus, DEFAULT_PINV_RCOND)
}

pub fn consistency_index_with(
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
    rcond: f64,
) -> Result<ConsistencyReport> {
    check_pair(psi_x, psi_xplus)?;
    let s = psi_x.nrows();
    let rank_flags = rank_flags(psi_x, psi_xplus, rcond);
    if !(rank_flags.row_rank_ok_x && rank_flags.row_rank_ok_xplus) {
        log::warn!(
            "dictionary matrices are not full row rank (ranks {} and {} of {s}); index is advisory",
            rank_flags.rank_x,
            rank_flags.rank_xplus
        );
    }
    let sym = symmetric_form(psi_x, psi_xplus, rcond);
    let (values, vectors) = sym_eigen_desc(&sym.s);
    let missing = s - sym.sigma.len();
    let mut eigenvalues: Vec<f64> = values.clone();
    eigenvalues.extend(std::iter::repeat_n(1.0, missing));
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let raw_index = eigenvalues.first().copied().unwrap_or(1.0);
    let clamped: Vec<f64> = eigenvalues.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let index = clamped[0];
    let trace: f64 = clamped.iter().sum();

    let worst = worst_coefficients(&sym, &values, &vectors);

    let k_f = psi_xplus * pinv(psi_x, rcond);
    let k_b = psi_x * pinv(psi_xplus, rcond);
    let literal = DMatrix::identity(s, s) - &k_f * &k_b;
    let literal_index = nalgebra::Schur::try_new(literal.clone(), f64::EPSILON, 1000 * s.max(1))
        .map(|schur| {
            schur
                .complex_eigenvalues()
                .iter()
                .map(|c| c.re)
                .fold(f64::NEG_INFINITY, f64::max)
        });

    Ok(ConsistencyReport {
        index,
        sqrt_index: index.sqrt(),
        // the min guards a one-ulp overshoot of the rounded mean
        trace_lower: (trace / s as f64).min(index),
        trace_upper: trace,
        worst_coeffs: worst.iter().copied().collect(),
        rank_flags,
        diagnostics: IndexDiagnostics {
            raw_index,
            literal_index,
            literal_asymmetry: crate::linalg::asymmetry(&literal),
            eigenvalues: clamped,
        },
        k_f,
        k_b,
    })
}

struct SymmetricForm {
    /// `R^T R`, `r x r`.
    s: DMatrix<f64>,
    /// Left singular vectors of `B`, `s x r`.
    u: DMatrix<f64>,
    sigma: DVector<f64>,
}

fn symmetric_form(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> SymmetricForm {
    let qa = truncated_svd(a, rcond).v;
    let sb = truncated_svd(b, rcond);
    let proj = qa.transpose() * &sb.v;
    let r = &sb.v - &qa * proj;
    SymmetricForm {
        s: r.transpose() * r,
        u: sb.u,
        sigma: sb.sigma,
    }
}

/// Maps the top eigenspace of `R^T R` to coefficient space, `w = U S^-1 y`,
/// and picks a deterministic representative.
fn worst_coefficients(sym: &SymmetricForm, values: &[f64], vectors: &DMatrix<f64>) -> DVector<f64> {
    let s = sym.u.nrows();
    if values.is_empty() {
        // B has rank zero: every function has zero denominator
        let mut e = DVector::zeros(s);
        e[0] = 1.0;
        return e;
    }
    let top = values[0];
    let tol = 1e-10 * top.abs().max(1e-300) + 1e-14;
    let mult = values.iter().take_while(|&&v| top - v <= tol).count();
    let mut inv_sigma = sym.u.clone();
    for (c, sv) in sym.sigma.iter().enumerate() {
        inv_sigma.column_mut(c).scale_mut(1.0 / sv);
    }
    let span = &inv_sigma * vectors.columns(0, mult);
    let w = if mult == 1 {
        span.column(0).into_owned()
    } else {
        pick_from_span(&span)
    };
    normalize_sign(w)
}

/// Unit vector in `span(cols)` with the largest absolute first coordinate,
/// moving to later coordinates when the span is orthogonal to earlier ones.
fn pick_from_span(cols: &DMatrix<f64>) -> DVector<f64> {
    let q = truncated_svd(cols, 1e-12).u;
    for i in 0..q.nrows() {
        let row = q.row(i).transpose();
        if row.norm() > 1e-12 {
            return &q * row;
        }
    }
    q.column(0).into_owned()
}

fn normalize_sign(mut w: DVector<f64>) -> DVector<f64> {
    let n = w.norm();
    if n > 0.0 {
        w /= n;
    }
    let scale = w.amax();
    if let Some(first) = w.iter().copied().find(|v| v.abs() > 1e-12 * scale) {
        if first < 0.0 {
            w.neg_mut();
        }
    }
    w
}

/// Invariance proximity of `span(Phi)` on augmented data: the consistency
/// report for `Phi(Z)` and `Phi(Z+)`; `sqrt_index` is the proximity.
pub fn invariance_proximity(
    nd: &NormalDictionary,
    aug: &AugmentedSnapshots,
) -> Result<ConsistencyReport> {
    let (a, b) = dictionary_matrices(nd, aug)?;
    consistency_index(&a, &b)
}

/// `(Phi(Z), Phi(Z+))`.
pub fn dictionary_matrices(
    nd: &NormalDictionary,
    aug: &AugmentedSnapshots,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((nd.eval_matrix(&aug.z)?, nd.eval_matrix(&aug.z_plus)?))
}
