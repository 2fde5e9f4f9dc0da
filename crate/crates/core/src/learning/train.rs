use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    baseline_loss_grad, scale_rows_mut, trace_loss_grad, BaselineKind, LossMode, DEFAULT_RIDGE,
};
use crate::dynamics::{AugmentedSnapshots, SnapshotSet};
use crate::edmd::consistency_index;
use crate::error::{KcfError, Result};
use crate::linalg::hstack;
use crate::observables::parametric::{ParametricDictionary, ParametricSpec};

/// Consecutive non-finite batches tolerated before training stops.
pub const MAX_CONSECUTIVE_NON_FINITE: usize = 3;

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

fn default_train_fraction() -> f64 {
    0.5
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture, sizes `s` and `l`, and coordinate scaling.
    pub dictionary: ParametricSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_mode: LossMode,
    /// Relative ridge of the training loss.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Leading fraction of the snapshots used for training; the rest
    /// validates.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(KcfError::Config(m.to_string()));
        self.dictionary.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive");
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return err("learning rates must satisfy 0 < lr_end <= lr_start");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err("train_fraction must lie in (0, 1)");
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return err("ridge must be non-negative");
        }
        if self.loss_mode != LossMode::Trace {
            return err("only the trace loss has a gradient; max_eig is an evaluation mode");
        }
        Ok(())
    }

    /// Linear interpolation from `lr_start` (first epoch) to `lr_end` (last).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * t
    }

    /// Number of training columns for `n` snapshots.
    pub fn train_len(&self, n: usize) -> usize {
        ((n as f64 * self.train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }
}

/// Adam with the usual moment decays.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// What a training run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Objective {
    /// Trace surrogate of the consistency index; validated by the max-eig index.
    Consistency,
    /// Residual of the linear or bilinear lifted regression, computed in
    /// scaled coordinates.
    Baseline { kind: BaselineKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean batch loss; `None` when every batch was non-finite.
    pub train_loss: Option<f64>,
    /// Held-out metric after the epoch.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub seed: u64,
    pub train_len: usize,
    pub validation_len: usize,
    pub initial_validation: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the kept checkpoint; `None` keeps the initial parameters.
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
    /// `sqrt` of the consistency index of the kept dictionary, clamped to
    /// `[0, 1]`; `None` when it cannot be evaluated.
    pub train_proximity: Option<f64>,
    pub test_proximity: Option<f64>,
    pub non_finite_batches: usize,
    pub aborted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

impl TrainReport {
    /// One row per epoch: `epoch,learning_rate,train_loss,validation`.
    pub fn epochs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        let mut out = String::from("epoch,learning_rate,train_loss,validation\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{},{}\n",
                e.epoch,
                e.learning_rate,
                opt(e.train_loss),
                opt(e.validation)
            ));
        }
        out
    }
}

/// Loss and parameter gradient of `objective` on one batch.
pub fn batch_loss_grad(
    dict: &ParametricDictionary,
    objective: Objective,
    ridge: f64,
    data: &SnapshotSet,
) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    let x = hstack(&[&data.x, &data.x_plus]);
    let u = hstack(&[&data.u, &data.u]);
    let (phi, cache) = dict.forward(&x, &u)?;
    let a = phi.columns(0, n).into_owned();
    let b = phi.columns(n, n).into_owned();
    let (loss, ga, gb) = match objective {
        Objective::Consistency => trace_loss_grad(&a, &b, ridge)?,
        Objective::Baseline { kind } => {
            let (a, b, us, scale) = scaled_baseline_inputs(dict, a, b, &data.u);
            let (loss, mut ga, mut gb) = baseline_loss_grad(kind, &a, &b, &us, ridge)?;
            scale_rows_mut(&mut ga, &scale);
            scale_rows_mut(&mut gb, &scale);
            (loss, ga, gb)
        }
    };
    let grad = dict.backward(&cache, &hstack(&[&ga, &gb]));
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(KcfError::NonFiniteGradient {
            param_norm: super::loss::param_norm(dict.params()),
        });
    }
    Ok((loss, grad))
}

/// Head rows and inputs expressed in the scaled coordinates of the dictionary.
fn scaled_baseline_inputs(
    dict: &ParametricDictionary,
    mut a: DMatrix<f64>,
    mut b: DMatrix<f64>,
    u: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let sp = &dict.spec;
    let mut scale = vec![1.0; a.nrows()];
    if !sp.x_scale.is_empty() {
        for (r, &c) in sp.fixed_head.iter().enumerate() {
            scale[r] = sp.x_scale[c];
        }
    }
    scale_rows_mut(&mut a, &scale);
    scale_rows_mut(&mut b, &scale);
    let mut us = u.clone();
    scale_rows_mut(&mut us, &sp.u_scale);
    (a, b, us, scale)
}

fn dictionary_pair(
    dict: &ParametricDictionary,
    data: &SnapshotSet,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (a, _) = dict.forward(&data.x, &data.u)?;
    let (b, _) = dict.forward(&data.x_plus, &data.u)?;
    Ok((a, b))
}

fn proximity(dict: &ParametricDictionary, data: &SnapshotSet) -> Option<f64> {
    let (a, b) = dictionary_pair(dict, data).ok()?;
    Some(consistency_index(&a, &b).ok()?.index.clamp(0.0, 1.0).sqrt())
}

/// Held-out metric: the plain max-eig index, or the baseline residual.
fn validation_metric(
    dict: &ParametricDictionary,
    objective: Objective,
    ridge: f64,
    data: &SnapshotSet,
) -> Option<f64> {
    let (a, b) = dictionary_pair(dict, data).ok()?;
    let v = match objective {
        Objective::Consistency => consistency_index(&a, &b).ok()?.index,
        Objective::Baseline { kind } => {
            let (a, b, us, _) = scaled_baseline_inputs(dict, a, b, &data.u);
            baseline_loss_grad(kind, &a, &b, &us, ridge).ok()?.0
        }
    };
    v.is_finite().then_some(v)
}

/// Learns a normal-form dictionary by minimizing the trace surrogate of the
/// consistency index on the training part of `data`.
pub fn train(
    config: &TrainConfig,
    data: &AugmentedSnapshots,
) -> Result<(ParametricDictionary, TrainReport)> {
    let init = ParametricDictionary::new(config.dictionary.clone(), config.seed)?;
    train_from(config, init, Objective::Consistency, &data.split())
}

/// Trains a state-only dictionary (`s = l`) for a lifted baseline, starting
/// from the same `H` weights as the dictionary of [`train`].
pub fn train_baseline(
    config: &TrainConfig,
    kind: BaselineKind,
    data: &AugmentedSnapshots,
) -> Result<(ParametricDictionary, TrainReport)> {
    let mut spec = config.dictionary.clone();
    spec.s = spec.l;
    let init = ParametricDictionary::new(spec, config.seed)?;
    train_from(config, init, Objective::Baseline { kind }, &data.split())
}

/// Training loop shared by all objectives: shuffled mini-batches, Adam with a
/// linear schedule, best-by-validation checkpointing.
pub fn train_from(
    config: &TrainConfig,
    mut dict: ParametricDictionary,
    objective: Objective,
    data: &SnapshotSet,
) -> Result<(ParametricDictionary, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    if data.len() < 2 {
        return Err(KcfError::DegenerateData(
            "need at least two snapshots".into(),
        ));
    }
    let (train_set, val_set) = data.split_at(config.train_len(data.len()));
    if config.batch_size > train_set.len() {
        return Err(KcfError::Config(format!(
            "batch_size {} exceeds the {} training snapshots",
            config.batch_size,
            train_set.len()
        )));
    }
    let ridge = config.ridge;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(dict.num_params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let initial_validation = validation_metric(&dict, objective, ridge, &val_set);
    let mut best = (None, initial_validation, dict.params().to_vec());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut non_finite_batches = 0;
    let mut consecutive = 0;
    let mut aborted = None;

    'outer: for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks_exact(config.batch_size) {
            match batch_loss_grad(&dict, objective, ridge, &train_set.select(batch)) {
                Ok((loss, grad)) => {
                    adam.step(dict.params_mut(), &grad, lr);
                    sum += loss;
                    count += 1;
                    consecutive = 0;
                }
                Err(err) => {
                    non_finite_batches += 1;
                    consecutive += 1;
                    log::warn!("epoch {epoch}: skipped batch ({err})");
                    if consecutive > MAX_CONSECUTIVE_NON_FINITE {
                        aborted = Some(format!(
                            "{consecutive} consecutive non-finite batches at epoch {epoch}: {err}"
                        ));
                        epochs.push(EpochRecord {
                            epoch,
                            learning_rate: lr,
                            train_loss: (count > 0).then(|| sum / count as f64),
                            validation: None,
                        });
                        break 'outer;
                    }
                }
            }
        }
        let validation = validation_metric(&dict, objective, ridge, &val_set);
        if let Some(v) = validation {
            if best.1.is_none_or(|b| v < b) {
                best = (Some(epoch), Some(v), dict.params().to_vec());
            }
        }
        log::debug!(
            "epoch {epoch}: lr {lr:.3e} loss {:?} validation {validation:?}",
            (count > 0).then(|| sum / count as f64)
        );
        epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: (count > 0).then(|| sum / count as f64),
            validation,
        });
    }

    dict.set_params(&best.2)?;
    let report = TrainReport {
        objective,
        seed: config.seed,
        train_len: train_set.len(),
        validation_len: val_set.len(),
        initial_validation,
        epochs,
        best_epoch: best.0,
        best_validation: best.1,
        train_proximity: proximity(&dict, &train_set),
        test_proximity: proximity(&dict, &val_set),
        non_finite_batches,
        aborted,
        wall_time_secs: Some(started.elapsed().as_secs_f64()),
    };
    Ok((dict, report))
}
