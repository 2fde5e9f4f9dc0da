//! Dictionaries of observables.
//!
//! A state dictionary `H: R^n -> R^l` and an input matrix function
//! `G~: R^m -> R^{(s-l) x l}` combine into a dictionary in normal form,
//!
//! ```text
//! Phi(x, u) = [ I ; G~(u) ] H(x)      (s > l)
//! Phi(x, u) = H(x)                    (s = l)
//! ```
//!
//! whose top block never depends on the input. Evaluation on data matrices
//! produces one column per snapshot.

mod analytic;
pub mod descriptor;
pub mod network;
pub mod parametric;
pub mod separable;

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{KcfError, Result};

pub use analytic::{
    example_poly_dictionary, FnStateFeatures, InputFn, InputTerm, InputTerms, Monomials,
};
pub use descriptor::DictionaryDescriptor;
pub use network::{Activation, FamilyKind, Network};
pub use parametric::{ParametricDictionary, ParametricSpec};
pub use separable::{
    check_rank_condition, decompose_separable, verify_normality, NormalityReport, RankReport,
    SeparableDecomposition, SeparableTermList,
};

/// A vector of scalar observables on the state space.
pub trait StateFeatures: Debug + Send + Sync {
    fn state_dim(&self) -> usize;

    /// Number of observables `l`.
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn tags(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("h{i}")).collect()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    /// Column-wise evaluation, `l x N`.
    fn eval_columns(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), data.ncols());
        let mut buf = vec![0.0; self.dim()];
        for (j, col) in data.column_iter().enumerate() {
            let x: Vec<f64> = col.iter().copied().collect();
            self.eval_into(&x, &mut buf);
            out.column_mut(j).copy_from_slice(&buf);
        }
        out
    }
}

/// A matrix-valued function of the input.
pub trait InputMatrixFn: Debug + Send + Sync {
    fn input_dim(&self) -> usize;

    /// `(rows, cols)` of the value.
    fn shape(&self) -> (usize, usize);

    fn eval(&self, u: &[f64]) -> DMatrix<f64>;

    /// Evaluates at every column of `inputs`.
    fn eval_many(&self, inputs: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        inputs
            .column_iter()
            .map(|c| self.eval(&c.iter().copied().collect::<Vec<_>>()))
            .collect()
    }
}

/// Evaluates a state dictionary on a data matrix (`n x N` in, `l x N` out).
pub fn eval_matrix(dict: &dyn StateFeatures, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if data.nrows() != dict.state_dim() {
        return Err(KcfError::DimensionMismatch(format!(
            "dictionary expects {} rows, data has {}",
            dict.state_dim(),
            data.nrows()
        )));
    }
    Ok(dict.eval_columns(data))
}

/// A dictionary `Phi(x, u) = [I; G~(u)] H(x)` in normal form.
#[derive(Debug, Clone)]
pub struct NormalDictionary {
    pub h: Arc<dyn StateFeatures>,
    pub gtilde: Option<Arc<dyn InputMatrixFn>>,
    input_dim: usize,
}

impl NormalDictionary {
    pub fn new(
        h: Arc<dyn StateFeatures>,
        gtilde: Option<Arc<dyn InputMatrixFn>>,
        input_dim: usize,
    ) -> Result<Self> {
        if let Some(g) = &gtilde {
            let (rows, cols) = g.shape();
            if cols != h.dim() {
                return Err(KcfError::DimensionMismatch(format!(
                    "G~ has {cols} columns but H has {} elements",
                    h.dim()
                )));
            }
            if rows == 0 {
                return Err(KcfError::DimensionMismatch(
                    "G~ must have at least one row".into(),
                ));
            }
            if g.input_dim() != input_dim {
                return Err(KcfError::DimensionMismatch(format!(
                    "G~ takes {} inputs, expected {input_dim}",
                    g.input_dim()
                )));
            }
        }
        Ok(Self {
            h,
            gtilde,
            input_dim,
        })
    }

    /// State-only dictionary (`s = l`).
    pub fn state_only(h: Arc<dyn StateFeatures>, input_dim: usize) -> Self {
        Self {
            h,
            gtilde: None,
            input_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.h.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Dimension `l` of the state dictionary.
    pub fn l(&self) -> usize {
        self.h.dim()
    }

    /// Dimension `s` of the normal dictionary.
    pub fn s(&self) -> usize {
        self.l() + self.gtilde.as_ref().map_or(0, |g| g.shape().0)
    }

    /// `G~(u)`, or `None` when `s = l`.
    pub fn gtilde_at(&self, u: &[f64]) -> Option<DMatrix<f64>> {
        self.gtilde.as_ref().map(|g| g.eval(u))
    }

    /// The full `s x l` matrix `G(u) = [I; G~(u)]`.
    pub fn g_at(&self, u: &[f64]) -> DMatrix<f64> {
        let l = self.l();
        let mut g = DMatrix::zeros(self.s(), l);
        g.view_mut((0, 0), (l, l)).fill_with_identity();
        if let Some(gt) = self.gtilde_at(u) {
            g.view_mut((l, 0), (gt.nrows(), l)).copy_from(&gt);
        }
        g
    }

    /// `Phi(x, u)`.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let hx = DVector::from_vec(self.h.eval(x));
        match self.gtilde_at(u) {
            None => hx,
            Some(gt) => {
                let bottom = gt * &hx;
                let mut out = DVector::zeros(self.s());
                out.rows_mut(0, hx.len()).copy_from(&hx);
                out.rows_mut(hx.len(), bottom.len()).copy_from(&bottom);
                out
            }
        }
    }

    /// Evaluates on an augmented data matrix `Z = [X; U]` (`(n+m) x N`),
    /// returning `s x N`.
    pub fn eval_matrix(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = (self.state_dim(), self.input_dim);
        if z.nrows() != n + m {
            return Err(KcfError::DimensionMismatch(format!(
                "normal dictionary expects {} rows (n + m), data has {}",
                n + m,
                z.nrows()
            )));
        }
        let x = z.rows(0, n).into_owned();
        self.eval_split(&x, &z.rows(n, m).into_owned())
    }

    /// Same as [`eval_matrix`](Self::eval_matrix) with `X` and `U` given separately.
    pub fn eval_split(&self, x: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != u.ncols() {
            return Err(KcfError::DimensionMismatch(
                "X and U column counts differ".into(),
            ));
        }
        let hx = eval_matrix(self.h.as_ref(), x)?;
        let Some(g) = &self.gtilde else {
            return Ok(hx);
        };
        let (l, s) = (self.l(), self.s());
        let mut out = DMatrix::zeros(s, x.ncols());
        out.rows_mut(0, l).copy_from(&hx);
        for (j, gt) in g.eval_many(u).into_iter().enumerate() {
            let bottom = gt * hx.column(j);
            out.view_mut((l, j), (s - l, 1)).copy_from(&bottom);
        }
        Ok(out)
    }

    pub fn tags(&self) -> Vec<String> {
        let mut tags = self.h.tags();
        for r in 0..self.s() - self.l() {
            tags.push(format!("g{}*H", r + 1));
        }
        tags
    }
}

/// Coefficients of the control-independent extension `h_e(x, u) = h(x) 1(u)`
/// of `h = h_coeffs^T H` in the basis `Phi`: `[h_coeffs; 0]`.
pub fn control_independent_extension(
    h_coeffs: &DVector<f64>,
    nd: &NormalDictionary,
) -> Result<DVector<f64>> {
    if h_coeffs.len() != nd.l() {
        return Err(KcfError::DimensionMismatch(format!(
            "coefficient vector has length {}, H has {} elements",
            h_coeffs.len(),
            nd.l()
        )));
    }
    let mut out = DVector::zeros(nd.s());
    out.rows_mut(0, nd.l()).copy_from(h_coeffs);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn monomial_evaluation() {
        let h = Monomials::new(2, vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![0, 0]]);
        let data = DMatrix::from_column_slice(2, 1, &[2.0, 3.0]);
        let out = eval_matrix(&h, &data).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn constant_row_is_ones() {
        let h = Monomials::new(2, vec![vec![0, 0]]);
        let data = DMatrix::from_fn(2, 7, |i, j| (i * 7 + j) as f64 - 3.0);
        assert!(eval_matrix(&h, &data).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_data_gives_empty_matrix() {
        let nd = example_poly_dictionary();
        let out = nd.eval_matrix(&DMatrix::zeros(3, 0)).unwrap();
        assert_eq!(out.shape(), (8, 0));
    }

    #[test]
    fn wrong_rows_is_dimension_mismatch() {
        let nd = example_poly_dictionary();
        assert!(matches!(
            nd.eval_matrix(&DMatrix::zeros(2, 4)),
            Err(KcfError::DimensionMismatch(_))
        ));
        let h = Monomials::new(2, vec![vec![1, 0]]);
        assert!(eval_matrix(&h, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn example_dictionary_matches_direct_formula() {
        let nd = example_poly_dictionary();
        assert_eq!((nd.s(), nd.l()), (8, 4));
        let (x1, x2, u) = (0.7, -1.3, 0.4_f64);
        let phi = nd.eval(&[x1, x2], &[u]);
        let want = [x1, x2, x1 * x1, 1.0, x1 * u, u, u * u, u.sin()];
        for (a, b) in phi.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn top_block_is_exactly_h() {
        let nd = example_poly_dictionary();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let u = [rng.gen_range(-4.0..4.0)];
            let phi = nd.eval(&x, &u);
            let h = nd.h.eval(&x);
            assert_eq!(phi.rows(0, 4).as_slice(), h.as_slice());
        }
    }

    #[test]
    fn extension_pads_with_zeros() {
        let nd = example_poly_dictionary();
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let ext = control_independent_extension(&e1, &nd).unwrap();
        assert_eq!(ext.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(control_independent_extension(&DVector::zeros(3), &nd).is_err());
    }

    #[test]
    fn extension_does_not_depend_on_input() {
        let nd = example_poly_dictionary();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let ext = control_independent_extension(&w, &nd).unwrap();
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let h = w.dot(&DVector::from_vec(nd.h.eval(&x)));
            let values: Vec<f64> = (0..9)
                .map(|k| ext.dot(&nd.eval(&x, &[-4.0 + k as f64])))
                .collect();
            assert!(values.iter().all(|&v| v == values[0]));
            assert!((values[0] - h).abs() <= 1e-15 * (1.0 + h.abs()));
        }
    }

    #[test]
    fn extension_is_linear() {
        let nd = example_poly_dictionary();
        let h1 = DVector::from_vec(vec![1.0, 2.0, 0.0, -1.0]);
        let h2 = DVector::from_vec(vec![0.5, 0.0, 3.0, 1.0]);
        let (a, b) = (2.5, -0.75);
        let lhs = control_independent_extension(&(&h1 * a + &h2 * b), &nd).unwrap();
        let rhs = control_independent_extension(&h1, &nd).unwrap() * a
            + control_independent_extension(&h2, &nd).unwrap() * b;
        assert_eq!(lhs, rhs);
    }
}
