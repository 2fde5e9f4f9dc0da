use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LiftedPredictor, StateReadout};
use crate::dynamics::AugmentedSnapshots;
use crate::edmd::{consistency_index, fit_edmd, ConsistencyReport, EdmdFit};
use crate::error::{KcfError, Result};
use crate::linalg::{matrix_rows, opt_matrix_rows, spd_solve, DEFAULT_RANK_TOL};
use crate::observables::descriptor::DictionaryDescriptor;
use crate::observables::separable::column_rank_ratio;
use crate::observables::NormalDictionary;

/// `H(x+) ~ A(u) H(x)` with `A(u) = A11 + A12 G~(u)`.
#[derive(Debug, Clone)]
pub struct SeparableModel {
    pub dictionary: NormalDictionary,
    pub descriptor: Option<DictionaryDescriptor>,
    pub a11: DMatrix<f64>,
    pub a12: Option<DMatrix<f64>>,
    /// Invariance proximity of the fit the model came from.
    pub source_index: f64,
    pub readout: Option<StateReadout>,
}

/// Splits an augmented EDMD matrix at `l` and keeps the top block row.
pub fn extract_normal(
    fit: &EdmdFit,
    nd: &NormalDictionary,
    source_index: f64,
) -> Result<SeparableModel> {
    let (l, s) = (nd.l(), nd.s());
    if fit.k.shape() != (s, s) {
        return Err(KcfError::DimensionMismatch(format!(
            "EDMD matrix is {}x{}, dictionary has s = {s}",
            fit.k.nrows(),
            fit.k.ncols()
        )));
    }
    let a11 = fit.k.view((0, 0), (l, l)).into_owned();
    let a12 = (s > l).then(|| fit.k.view((0, l), (l, s - l)).into_owned());
    Ok(SeparableModel {
        dictionary: nd.clone(),
        descriptor: None,
        a11,
        a12,
        source_index,
        readout: None,
    })
}

/// `(G^T G)^-1 G^T A G` at `u`, for any basis `G(u)` of full column rank.
pub fn extract_pseudoinverse(
    a: &DMatrix<f64>,
    g_eval: &dyn Fn(&[f64]) -> DMatrix<f64>,
    u: &[f64],
) -> Result<DMatrix<f64>> {
    let g = g_eval(u);
    if a.shape() != (g.nrows(), g.nrows()) {
        return Err(KcfError::DimensionMismatch(format!(
            "A is {}x{} but G(u) has {} rows",
            a.nrows(),
            a.ncols(),
            g.nrows()
        )));
    }
    if !(column_rank_ratio(&g) > DEFAULT_RANK_TOL) {
        return Err(KcfError::RankDeficientAtInput { input: u.to_vec() });
    }
    let gtg = g.transpose() * &g;
    Ok(spd_solve(&gtg, &(g.transpose() * a * &g)))
}

impl SeparableModel {
    /// Fits EDMD on `Phi(Z), Phi(Z+)`, measures the proximity and extracts
    /// the model, choosing the state readout from the fixed head.
    pub fn identify(
        desc: &DictionaryDescriptor,
        aug: &AugmentedSnapshots,
    ) -> Result<(Self, ConsistencyReport)> {
        let nd = desc.build()?;
        let (a, b) = crate::edmd::dictionary_matrices(&nd, aug)?;
        let fit = fit_edmd(&a, &b)?;
        let report = consistency_index(&a, &b)?;
        let mut model = extract_normal(&fit, &nd, report.sqrt_index)?;
        model.readout = Some(StateReadout::choose(
            &desc.fixed_head_coords()?,
            nd.h.as_ref(),
            &aug.x(),
        )?);
        model.descriptor = Some(desc.clone());
        Ok((model, report))
    }

    pub fn l(&self) -> usize {
        self.a11.nrows()
    }

    pub fn s(&self) -> usize {
        self.dictionary.s()
    }

    /// `A(u)`, `l x l`.
    pub fn a_of(&self, u: &[f64]) -> DMatrix<f64> {
        match (&self.a12, self.dictionary.gtilde_at(u)) {
            (Some(a12), Some(gt)) => &self.a11 + a12 * gt,
            _ => self.a11.clone(),
        }
    }

    /// `v_h^T A(u) H(x)`: one-step prediction of `h = v_h^T H`.
    pub fn predict_observable(&self, v_h: &DVector<f64>, x: &[f64], u: &[f64]) -> Result<f64> {
        if v_h.len() != self.l() {
            return Err(KcfError::DimensionMismatch(format!(
                "coefficient vector has length {}, expected {}",
                v_h.len(),
                self.l()
            )));
        }
        let hx = DVector::from_vec(self.dictionary.h.eval(x));
        Ok(v_h.dot(&(self.a_of(u) * hx)))
    }

    pub fn to_data(&self) -> Result<SeparableModelData> {
        let dictionary = self.descriptor.clone().ok_or_else(|| {
            KcfError::Config("model has no dictionary descriptor to serialize".into())
        })?;
        Ok(SeparableModelData {
            l: self.l(),
            s: self.s(),
            a11: self.a11.clone(),
            a12: self.a12.clone(),
            dictionary,
            source_index: self.source_index,
            readout: self.readout.clone(),
        })
    }

    pub fn from_data(d: &SeparableModelData) -> Result<Self> {
        let nd = d.dictionary.build()?;
        if nd.l() != d.l || nd.s() != d.s || d.a11.shape() != (d.l, d.l) {
            return Err(KcfError::Config(
                "model matrices do not match the dictionary".into(),
            ));
        }
        match &d.a12 {
            Some(a12) if a12.shape() != (d.l, d.s - d.l) => {
                return Err(KcfError::Config("A12 has the wrong shape".into()));
            }
            None if d.s > d.l => return Err(KcfError::Config("A12 missing for s > l".into())),
            _ => {}
        }
        Ok(Self {
            dictionary: nd,
            descriptor: Some(d.dictionary.clone()),
            a11: d.a11.clone(),
            a12: d.a12.clone(),
            source_index: d.source_index,
            readout: d.readout.clone(),
        })
    }
}

impl LiftedPredictor for SeparableModel {
    fn kind(&self) -> &'static str {
        "separable"
    }

    fn state_dim(&self) -> usize {
        self.dictionary.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.dictionary.input_dim()
    }

    fn lift(&self, x0: &[f64]) -> DVector<f64> {
        DVector::from_vec(self.dictionary.h.eval(x0))
    }

    fn step_lifted(&self, z: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>> {
        Ok(self.a_of(u) * z)
    }

    fn readout(&self) -> Option<&StateReadout> {
        self.readout.as_ref()
    }
}

/// On-disk form of [`SeparableModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableModelData {
    pub l: usize,
    pub s: usize,
    #[serde(rename = "A11", with = "matrix_rows")]
    pub a11: DMatrix<f64>,
    #[serde(rename = "A12", with = "opt_matrix_rows", default)]
    pub a12: Option<DMatrix<f64>>,
    pub dictionary: DictionaryDescriptor,
    pub source_index: f64,
    #[serde(default)]
    pub readout: Option<StateReadout>,
}
