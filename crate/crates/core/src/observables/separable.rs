//! Separable decompositions `Phi(x, u) = G(u) H(x)` and the structural checks
//! on `G`: column rank and normality.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::StateFeatures;
use crate::error::{KcfError, Result};
use crate::linalg::{pinv, rank, truncated_svd, DEFAULT_PINV_RCOND};

/// Scalar function of the input or of the state.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One product term `p(u) q(x)`.
#[derive(Clone)]
pub struct SeparableTerm {
    pub p: ScalarFn,
    pub q: ScalarFn,
}

impl SeparableTerm {
    pub fn new(
        p: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        q: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            p: Arc::new(p),
            q: Arc::new(q),
        }
    }
}

/// For each basis function `phi_i`, its product terms: `phi_i = sum_j p_j(u) q_j(x)`.
#[derive(Clone)]
pub struct SeparableTermList {
    pub state_dim: usize,
    pub functions: Vec<Vec<SeparableTerm>>,
}

impl fmt::Debug for SeparableTermList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let counts: Vec<usize> = self.functions.iter().map(Vec::len).collect();
        f.debug_struct("SeparableTermList")
            .field("state_dim", &self.state_dim)
            .field("terms_per_function", &counts)
            .finish()
    }
}

impl SeparableTermList {
    pub fn s(&self) -> usize {
        self.functions.len()
    }

    pub fn total_terms(&self) -> usize {
        self.functions.iter().map(Vec::len).sum()
    }

    /// `phi(x, u)` evaluated term by term.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.s(),
            self.functions
                .iter()
                .map(|terms| terms.iter().map(|t| (t.p)(u) * (t.q)(x)).sum::<f64>()),
        )
    }

    fn state_factors(&self) -> Vec<ScalarFn> {
        self.functions
            .iter()
            .flat_map(|terms| terms.iter().map(|t| t.q.clone()))
            .collect()
    }
}

/// Output of [`decompose_separable`].
#[derive(Clone)]
pub struct SeparableDecomposition {
    terms: SeparableTermList,
    /// `l' x T`: `H'(x) = combine * q(x)` where `q` stacks all state factors.
    combine: DMatrix<f64>,
    /// `T x l'`: row `j` is `v_j^T` with `q_j = v_j^T H'`.
    coeffs: DMatrix<f64>,
    /// Indices of the state factors chosen as basis, when the basis is a
    /// subset of the factors themselves.
    pub basis_indices: Option<Vec<usize>>,
}

impl fmt::Debug for SeparableDecomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeparableDecomposition")
            .field("l", &self.l())
            .field("s", &self.terms.s())
            .field("basis_indices", &self.basis_indices)
            .finish()
    }
}

impl SeparableDecomposition {
    /// Dimension of the state-factor span.
    pub fn l(&self) -> usize {
        self.combine.nrows()
    }

    /// `G(u)`, `s x l'`, built row by row as `sum_j p_j(u) v_j^T`.
    pub fn g(&self, u: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.terms.s(), self.l());
        let mut idx = 0;
        for (i, terms) in self.terms.functions.iter().enumerate() {
            for t in terms {
                let p = (t.p)(u);
                for c in 0..self.l() {
                    g[(i, c)] += p * self.coeffs[(idx, c)];
                }
                idx += 1;
            }
        }
        g
    }

    /// `H'(x)`.
    pub fn h(&self, x: &[f64]) -> DVector<f64> {
        let q = DVector::from_iterator(
            self.coeffs.nrows(),
            self.terms.state_factors().iter().map(|f| f(x)),
        );
        &self.combine * q
    }

    /// `H'` as a state dictionary.
    pub fn state_features(&self) -> DecomposedFeatures {
        DecomposedFeatures {
            n: self.terms.state_dim,
            factors: self.terms.state_factors(),
            combine: self.combine.clone(),
        }
    }
}

/// `H'` produced by a separable decomposition.
#[derive(Clone)]
pub struct DecomposedFeatures {
    n: usize,
    factors: Vec<ScalarFn>,
    combine: DMatrix<f64>,
}

impl fmt::Debug for DecomposedFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "DecomposedFeatures(n={}, l={})",
            self.n,
            self.combine.nrows()
        )
    }
}

impl StateFeatures for DecomposedFeatures {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.combine.nrows()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let q = DVector::from_iterator(self.factors.len(), self.factors.iter().map(|f| f(x)));
        out.copy_from_slice((&self.combine * q).as_slice());
    }
}

/// Builds a basis `H'` for the span of all state factors and the matching
/// `G(u)` so that `Phi(x, u) = G(u) H'(x)`.
///
/// The dimension of the span is the numerical rank (relative tolerance
/// `rtol`) of the factor evaluations on `probe_states` (`n x P`). When the
/// in-order greedy selection of factors finds exactly that many independent
/// factors, `H'` consists of those factors; otherwise it is the leading
/// singular directions.
pub fn decompose_separable(
    terms: &SeparableTermList,
    probe_states: &DMatrix<f64>,
    rtol: f64,
) -> Result<SeparableDecomposition> {
    let factors = terms.state_factors();
    let total = factors.len();
    if total == 0 {
        return Err(KcfError::Config("term list is empty".into()));
    }
    if probe_states.nrows() != terms.state_dim {
        return Err(KcfError::DimensionMismatch(format!(
            "probe states have {} rows, expected {}",
            probe_states.nrows(),
            terms.state_dim
        )));
    }
    let probes = probe_states.ncols();
    if probes < total {
        return Err(KcfError::RankDeficientProbe(format!(
            "{probes} probe states for {total} state factors"
        )));
    }
    let cols: Vec<Vec<f64>> = probe_states
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    let q_eval = DMatrix::from_fn(total, probes, |i, j| factors[i](&cols[j]));
    let dim = rank(&q_eval, rtol);
    if dim == 0 {
        return Err(KcfError::RankDeficientProbe(
            "all state factors vanish on the probes".into(),
        ));
    }

    let selected = greedy_rows(&q_eval, rtol);
    let (combine, basis_indices) = if selected.len() == dim {
        let mut c = DMatrix::zeros(dim, total);
        for (r, &i) in selected.iter().enumerate() {
            c[(r, i)] = 1.0;
        }
        (c, Some(selected))
    } else {
        let svd = truncated_svd(&q_eval, rtol);
        (svd.u.transpose(), None)
    };
    let basis_eval = &combine * &q_eval;
    let coeffs = &q_eval * pinv(&basis_eval, DEFAULT_PINV_RCOND);
    Ok(SeparableDecomposition {
        terms: terms.clone(),
        combine,
        coeffs,
        basis_indices,
    })
}

/// In-order selection of rows that are not (numerically) in the span of the
/// rows already selected.
fn greedy_rows(a: &DMatrix<f64>, rtol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut picked = Vec::new();
    for i in 0..a.nrows() {
        let row = a.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = row.clone();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&r);
                r.axpy(-c, b, 1.0);
            }
        }
        let rn = r.norm();
        if rn > rtol.sqrt() * norm {
            basis.push(r / rn);
            picked.push(i);
        }
    }
    picked
}

/// Result of [`check_rank_condition`].
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub full_rank: bool,
    /// Inputs at which `G(u)` lost column rank.
    pub failing_inputs: Vec<Vec<f64>>,
    /// Smallest `sigma_min / sigma_max` seen over the samples.
    pub worst_ratio: f64,
}

/// Checks that `G(u)` has full column rank on each sample: the smallest
/// singular value must exceed `tol` times the largest.
pub fn check_rank_condition(
    g: &dyn Fn(&[f64]) -> DMatrix<f64>,
    u_samples: &[Vec<f64>],
    tol: f64,
) -> RankReport {
    let mut failing = Vec::new();
    let mut worst = f64::INFINITY;
    for u in u_samples {
        let gu = g(u);
        let ratio = column_rank_ratio(&gu);
        worst = worst.min(ratio);
        if !(ratio > tol) {
            failing.push(u.clone());
        }
    }
    RankReport {
        full_rank: failing.is_empty(),
        failing_inputs: failing,
        worst_ratio: worst,
    }
}

/// `sigma_min / sigma_max` over the columns; zero when rank deficient by shape.
pub(crate) fn column_rank_ratio(g: &DMatrix<f64>) -> f64 {
    if g.ncols() == 0 {
        return 1.0;
    }
    if g.nrows() < g.ncols() {
        return 0.0;
    }
    let sv = g.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0.0;
    }
    sv.min() / max
}

/// Result of [`verify_normality`].
#[derive(Debug, Clone)]
pub struct NormalityReport {
    /// Normal on the sampled inputs.
    pub normal: bool,
    /// RMS residual of the stacked system `W G(u_i) = I`.
    pub residual: f64,
    /// Least-squares `W`, `l x s`.
    pub w: DMatrix<f64>,
    /// `E = [W; B]` putting `G` into normal form, when normal.
    pub transform: Option<DMatrix<f64>>,
}

/// Tests whether some fixed `W` satisfies `W G(u_i) = I` for every sample,
/// i.e. whether the control-independent extensions of `span(H)` lie in the
/// space. The verdict only covers the sampled inputs.
pub fn verify_normality(
    g: &dyn Fn(&[f64]) -> DMatrix<f64>,
    u_samples: &[Vec<f64>],
    tol: f64,
) -> Result<NormalityReport> {
    let first = u_samples.first().ok_or_else(|| {
        KcfError::Config("verify_normality needs at least one input sample".into())
    })?;
    let (s, l) = g(first).shape();
    let k = u_samples.len();
    let mut stacked = DMatrix::zeros(s, k * l);
    let mut target = DMatrix::zeros(l, k * l);
    for (i, u) in u_samples.iter().enumerate() {
        let gu = g(u);
        if gu.shape() != (s, l) {
            return Err(KcfError::DimensionMismatch(
                "G(u) changes shape across samples".into(),
            ));
        }
        stacked.view_mut((0, i * l), (s, l)).copy_from(&gu);
        target.view_mut((0, i * l), (l, l)).fill_with_identity();
    }
    let w: DMatrix<f64> = &target * pinv(&stacked, DEFAULT_PINV_RCOND);
    let residual = (&w * &stacked - &target).norm() / ((k * l) as f64).sqrt();
    let normal = residual <= tol;
    let transform = if normal {
        Some(normalizing_transform(&w, s, l))
    } else {
        None
    };
    Ok(NormalityReport {
        normal,
        residual,
        w,
        transform,
    })
}

/// `[W; B]` with `B = [0, I]` when that is invertible, otherwise `B` spans the
/// orthogonal complement of the rows of `W`.
fn normalizing_transform(w: &DMatrix<f64>, s: usize, l: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(s, s);
    e.view_mut((0, 0), (l, s)).copy_from(w);
    if s == l {
        return e;
    }
    let w11 = w.view((0, 0), (l, l)).into_owned();
    if column_rank_ratio(&w11) > 1e-8 {
        e.view_mut((l, l), (s - l, s - l)).fill_with_identity();
        return e;
    }
    let full = w.clone().transpose().svd(true, false);
    let u = full.u.expect("left vectors");
    // u is s x min(s, l); complete it to an orthonormal basis
    let mut basis: Vec<DVector<f64>> = u.column_iter().map(|c| c.into_owned()).collect();
    for i in 0..s {
        if basis.len() == s {
            break;
        }
        let mut v = DVector::zeros(s);
        v[i] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            basis.push(v / n);
        }
    }
    for (r, b) in basis.iter().skip(l).enumerate() {
        e.row_mut(l + r).copy_from(&b.transpose());
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::example_poly_dictionary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(p: fn(&[f64]) -> f64, q: fn(&[f64]) -> f64) -> SeparableTerm {
        SeparableTerm::new(p, q)
    }

    fn example_terms() -> SeparableTermList {
        SeparableTermList {
            state_dim: 2,
            functions: vec![
                vec![t(|_| 1.0, |x| x[0])],
                vec![t(|_| 1.0, |x| x[1])],
                vec![t(|_| 1.0, |x| x[0] * x[0])],
                vec![t(|_| 1.0, |_| 1.0)],
                vec![t(|u| u[0], |x| x[0])],
                vec![t(|u| u[0], |_| 1.0)],
                vec![t(|u| u[0] * u[0], |_| 1.0)],
                vec![t(|u| u[0].sin(), |_| 1.0)],
            ],
        }
    }

    fn probes(n: usize, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, count, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn example_decomposes_to_four_state_factors() {
        let terms = example_terms();
        let dec = decompose_separable(&terms, &probes(2, 20, 1), 1e-8).unwrap();
        assert_eq!(dec.l(), 4);
        assert_eq!(dec.basis_indices.as_deref(), Some(&[0, 1, 2, 3][..]));
        // G(u) must equal [I; G~(u)] of the hand-written dictionary
        let nd = example_poly_dictionary();
        for u in [-1.0, 0.0, 0.5, 2.0] {
            assert!((dec.g(&[u]) - nd.g_at(&[u])).amax() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let u = [rng.gen_range(-4.0..4.0)];
            let phi = terms.eval(&x, &u);
            let rec = dec.g(&u) * dec.h(&x);
            assert!((&phi - rec).amax() <= 1e-8 * (1.0 + phi.amax()));
        }
    }

    #[test]
    fn single_term() {
        let terms = SeparableTermList {
            state_dim: 1,
            functions: vec![vec![SeparableTerm::new(|u| u[0].cos(), |x| 3.0 * x[0])]],
        };
        let dec = decompose_separable(&terms, &probes(1, 5, 2), 1e-8).unwrap();
        assert_eq!(dec.l(), 1);
        let (x, u) = ([0.4], [1.1_f64]);
        assert!((dec.g(&u)[(0, 0)] * dec.h(&x)[0] - u[0].cos() * 1.2).abs() < 1e-14);
        // G = g and H' = h up to a common scale
        let ratio = dec.g(&u)[(0, 0)] / u[0].cos();
        assert!((dec.g(&[0.3])[(0, 0)] / 0.3_f64.cos() - ratio).abs() < 1e-12);
    }

    #[test]
    fn duplicate_state_factors_collapse() {
        let terms = SeparableTermList {
            state_dim: 2,
            functions: vec![
                vec![SeparableTerm::new(|u| u[0], |x| x[0])],
                vec![SeparableTerm::new(|u| u[0] * u[0], |x| x[0])],
            ],
        };
        let dec = decompose_separable(&terms, &probes(2, 10, 3), 1e-8).unwrap();
        assert_eq!(dec.l(), 1);
    }

    #[test]
    fn too_few_probes() {
        let err = decompose_separable(&example_terms(), &probes(2, 5, 1), 1e-8).unwrap_err();
        assert!(matches!(err, KcfError::RankDeficientProbe(_)));
    }

    #[test]
    fn normal_form_has_full_rank() {
        let nd = example_poly_dictionary();
        let samples: Vec<Vec<f64>> = (0..=80).map(|k| vec![-4.0 + 0.1 * k as f64]).collect();
        let report = check_rank_condition(&|u| nd.g_at(u), &samples, 1e-8);
        assert!(report.full_rank);
        assert!(report.failing_inputs.is_empty());
    }

    #[test]
    fn scalar_g_fails_at_zero() {
        let samples = vec![vec![-1.0], vec![0.0], vec![2.0]];
        let report = check_rank_condition(&|u| DMatrix::from_element(1, 1, u[0]), &samples, 1e-8);
        assert!(!report.full_rank);
        assert_eq!(report.failing_inputs, vec![vec![0.0]]);
    }

    #[test]
    fn already_normal_gives_identity_w() {
        let nd = example_poly_dictionary();
        let samples: Vec<Vec<f64>> = (0..9).map(|k| vec![-2.0 + 0.5 * k as f64]).collect();
        let rep = verify_normality(&|u| nd.g_at(u), &samples, 1e-8).unwrap();
        assert!(rep.normal);
        assert!(rep.residual < 1e-12);
        let mut expected = DMatrix::zeros(4, 8);
        expected.view_mut((0, 0), (4, 4)).fill_with_identity();
        assert!((&rep.w - expected).amax() < 1e-10);
    }

    #[test]
    fn mixed_basis_is_recognised_as_normal() {
        let nd = example_poly_dictionary();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = DMatrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let samples: Vec<Vec<f64>> = (0..12).map(|k| vec![-3.0 + 0.5 * k as f64]).collect();
        let g = |u: &[f64]| &m * nd.g_at(u);
        let rep = verify_normality(&g, &samples, 1e-8).unwrap();
        assert!(rep.normal, "residual {}", rep.residual);
        let e = rep.transform.unwrap();
        assert!(e.clone().try_inverse().is_some());
        for u in &samples {
            let eg = &e * g(u);
            assert!((eg.view((0, 0), (4, 4)) - DMatrix::<f64>::identity(4, 4)).amax() < 1e-8);
        }
    }

    #[test]
    fn polynomial_column_is_not_normal() {
        let samples = vec![vec![1.0], vec![2.0], vec![3.0]];
        let g = |u: &[f64]| DMatrix::from_column_slice(2, 1, &[u[0], u[0] * u[0]]);
        let rep = verify_normality(&g, &samples, 1e-8).unwrap();
        assert!(!rep.normal);
        assert!(rep.residual > 1e-3);
        assert!(rep.transform.is_none());
    }

    #[test]
    fn normality_verdict_is_basis_covariant() {
        let nd = example_poly_dictionary();
        let samples: Vec<Vec<f64>> = (0..10).map(|k| vec![-2.0 + 0.45 * k as f64]).collect();
        let bad = |u: &[f64]| {
            // drop the identity block: rows become u-dependent
            let mut g = nd.g_at(u);
            g.view_mut((0, 0), (4, 4)).scale_mut(u[0]);
            g
        };
        let base_good = verify_normality(&|u| nd.g_at(u), &samples, 1e-8)
            .unwrap()
            .normal;
        let base_bad = verify_normality(&bad, &samples, 1e-8).unwrap().normal;
        assert!(base_good && !base_bad);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let m = DMatrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
            let good = verify_normality(&|u| &m * nd.g_at(u), &samples, 1e-8).unwrap();
            let badr = verify_normality(&|u| &m * bad(u), &samples, 1e-8).unwrap();
            assert_eq!(good.normal, base_good);
            assert_eq!(badr.normal, base_bad);
        }
    }
}
