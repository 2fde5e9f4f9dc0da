//! Lifted models: the input-state separable model and the linear, bilinear
//! and switched baselines, with rollouts and JSON persistence.

mod baselines;
mod separable;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KcfError, Result};
use crate::linalg::{matrix_rows, pinv, DEFAULT_PINV_RCOND};
use crate::observables::StateFeatures;

pub use baselines::{
    bilinear_regressor, fit_bilinear_baseline, fit_bilinear_matrices, fit_linear_baseline,
    fit_linear_matrices, switched_from_constant_inputs, BilinearLiftedModel, LinearLiftedModel,
    SwitchedLinearModel,
};
pub use separable::{extract_normal, extract_pseudoinverse, SeparableModel};

/// How states are read from a lifted vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StateReadout {
    /// `state[coords[i]] = z[i]`; the head covers every state coordinate and
    /// the first occurrence wins.
    FixedHead { coords: Vec<usize> },
    /// `state = D z`, fitted by least squares on training states.
    Decoder {
        #[serde(with = "matrix_rows")]
        matrix: DMatrix<f64>,
        /// `||X - D H(X)||_F / ||X||_F` on the training data.
        training_residual: f64,
    },
}

impl StateReadout {
    /// Fixed-head readout when `head` lists every state coordinate.
    pub fn from_head(head: &[usize], n: usize) -> Option<Self> {
        let covered = (0..n).all(|c| head.contains(&c));
        covered.then(|| StateReadout::FixedHead {
            coords: head.to_vec(),
        })
    }

    /// Least-squares decoder from `H(X)` to `X`.
    pub fn fit_decoder(h: &dyn StateFeatures, x: &DMatrix<f64>) -> Result<Self> {
        let hx = crate::observables::eval_matrix(h, x)?;
        let matrix = x * pinv(&hx, DEFAULT_PINV_RCOND);
        let denom = x.norm();
        let training_residual = if denom > 0.0 {
            (x - &matrix * &hx).norm() / denom
        } else {
            0.0
        };
        Ok(StateReadout::Decoder {
            matrix,
            training_residual,
        })
    }

    /// Fixed head when possible, otherwise a decoder fitted on `x`.
    pub fn choose(head: &[usize], h: &dyn StateFeatures, x: &DMatrix<f64>) -> Result<Self> {
        match Self::from_head(head, h.state_dim()) {
            Some(r) => Ok(r),
            None => Self::fit_decoder(h, x),
        }
    }

    pub fn read(&self, z: &DVector<f64>) -> Vec<f64> {
        match self {
            StateReadout::FixedHead { coords } => {
                let n = coords.iter().max().map_or(0, |c| c + 1);
                let mut x = vec![0.0; n];
                for (i, &c) in coords.iter().enumerate().rev() {
                    x[c] = z[i];
                }
                x
            }
            StateReadout::Decoder { matrix, .. } => (matrix * z).iter().copied().collect(),
        }
    }
}

/// Lifted trajectory and the states read from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub lifted: Vec<DVector<f64>>,
    pub states: Vec<Vec<f64>>,
}

/// Anything that predicts state trajectories from an initial state and inputs.
pub trait LiftedPredictor {
    fn kind(&self) -> &'static str;

    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// `z0` from the initial state.
    fn lift(&self, x0: &[f64]) -> DVector<f64>;

    /// One lifted step under input `u`.
    fn step_lifted(&self, z: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>>;

    fn readout(&self) -> Option<&StateReadout>;

    /// Open-loop rollout: `len(inputs) + 1` lifted vectors and states.
    fn rollout(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<Rollout> {
        if x0.len() != self.state_dim() {
            return Err(KcfError::DimensionMismatch(format!(
                "initial state has length {}, expected {}",
                x0.len(),
                self.state_dim()
            )));
        }
        let readout = self
            .readout()
            .ok_or_else(|| KcfError::Config("model has no state readout".into()))?;
        let mut z = self.lift(x0);
        let mut lifted = Vec::with_capacity(inputs.len() + 1);
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(readout.read(&z));
        lifted.push(z.clone());
        for (k, u) in inputs.iter().enumerate() {
            if u.len() != self.input_dim() {
                return Err(KcfError::DimensionMismatch(format!(
                    "input {k} has length {}, expected {}",
                    u.len(),
                    self.input_dim()
                )));
            }
            z = self.step_lifted(&z, u)?;
            if let Some(c) = z.iter().position(|v| !v.is_finite()) {
                return Err(KcfError::NonFiniteState {
                    step: k,
                    coordinate: c,
                });
            }
            states.push(readout.read(&z));
            lifted.push(z.clone());
        }
        Ok(Rollout { lifted, states })
    }
}

/// Any model, as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelFile {
    Separable(separable::SeparableModelData),
    Linear(baselines::LinearModelData),
    Bilinear(baselines::BilinearModelData),
}

/// A loaded model of any kind.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Separable(SeparableModel),
    Linear(LinearLiftedModel),
    Bilinear(BilinearLiftedModel),
}

impl AnyModel {
    pub fn predictor(&self) -> &dyn LiftedPredictor {
        match self {
            AnyModel::Separable(m) => m,
            AnyModel::Linear(m) => m,
            AnyModel::Bilinear(m) => m,
        }
    }

    pub fn to_file(&self) -> Result<ModelFile> {
        Ok(match self {
            AnyModel::Separable(m) => ModelFile::Separable(m.to_data()?),
            AnyModel::Linear(m) => ModelFile::Linear(m.to_data()?),
            AnyModel::Bilinear(m) => ModelFile::Bilinear(m.to_data()?),
        })
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        Ok(match file {
            ModelFile::Separable(d) => AnyModel::Separable(SeparableModel::from_data(d)?),
            ModelFile::Linear(d) => AnyModel::Linear(LinearLiftedModel::from_data(d)?),
            ModelFile::Bilinear(d) => AnyModel::Bilinear(BilinearLiftedModel::from_data(d)?),
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file()?)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }
}
