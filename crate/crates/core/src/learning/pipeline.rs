use serde::{Deserialize, Serialize};

use super::loss::{BaselineKind, LossMode, DEFAULT_RIDGE};
use super::train::{train, train_baseline, TrainConfig, TrainReport};
use crate::dynamics::{to_augmented, ControlSystem, ExperimentPlan, InputMode, SnapshotSet};
use crate::edmd::ConsistencyReport;
use crate::error::{KcfError, Result};
use crate::eval::{compare_models, test_cases, Comparison, TestProtocol};
use crate::model::{
    fit_bilinear_baseline, fit_linear_baseline, BilinearLiftedModel, LinearLiftedModel,
    SeparableModel,
};
use crate::observables::descriptor::{DictionaryDescriptor, Dims};
use crate::observables::network::{Activation, FamilyKind};
use crate::observables::parametric::{ParametricDictionary, ParametricSpec};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    /// Uses this dictionary as is instead of training one.
    #[serde(default)]
    pub frozen: Option<DictionaryDescriptor>,
    /// Trains separate state dictionaries for the baselines; otherwise they
    /// reuse `H` of the separable dictionary.
    #[serde(default = "yes")]
    pub train_baselines: bool,
    #[serde(default)]
    pub test: Option<TestProtocol>,
}

impl PipelineConfig {
    /// Desk-scale DC motor setup: `s = 20`, `l = 4`, residual networks with
    /// two blocks of width 32, 150 epochs of batch 200 with the learning
    /// rate going from 5e-4 to 1e-6, and the 600-step test of
    /// [`TestProtocol::dc_motor`].
    pub fn dc_motor(seed: u64) -> Self {
        let family = FamilyKind::ResidualMlp {
            blocks: 2,
            width: 32,
            activation: Activation::Relu,
        };
        Self {
            train: TrainConfig {
                dictionary: ParametricSpec {
                    n: 2,
                    m: 1,
                    l: 4,
                    s: 20,
                    h_family: family.clone(),
                    g_family: family,
                    fixed_head: vec![0, 1],
                    x_scale: vec![0.1, 0.004],
                    u_scale: vec![0.25],
                },
                epochs: 150,
                batch_size: 200,
                lr_start: 5e-4,
                lr_end: 1e-6,
                seed,
                loss_mode: LossMode::Trace,
                ridge: DEFAULT_RIDGE,
                train_fraction: 0.5,
            },
            frozen: None,
            train_baselines: true,
            test: Some(TestProtocol::dc_motor(seed)),
        }
    }

    /// 1000 constant-input experiments of 10 steps.
    pub fn dc_motor_plan(seed: u64) -> ExperimentPlan {
        ExperimentPlan {
            num_experiments: 1000,
            steps_per_experiment: 10,
            seed,
            input_mode: InputMode::Constant,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub separable: SeparableModel,
    pub consistency: ConsistencyReport,
    pub dictionary_report: Option<TrainReport>,
    pub linear: LinearLiftedModel,
    pub bilinear: BilinearLiftedModel,
    pub baseline_reports: Vec<TrainReport>,
    pub comparison: Option<Comparison>,
}

/// `H` alone, as a state-only descriptor (`s = l`).
pub fn state_only(desc: &DictionaryDescriptor) -> Result<DictionaryDescriptor> {
    Ok(match desc {
        DictionaryDescriptor::Analytic {
            dims,
            fixed_head,
            h,
            ..
        } => DictionaryDescriptor::Analytic {
            dims: Dims { s: dims.l, ..*dims },
            fixed_head: fixed_head.clone(),
            h: h.clone(),
            gtilde: None,
        },
        DictionaryDescriptor::Parametric { .. } => {
            let pd = desc.to_parametric().expect("parametric variant")?;
            let h_len = pd.h_network().map_or(0, |n| n.num_params());
            let mut spec = pd.spec.clone();
            spec.s = spec.l;
            let reduced = ParametricDictionary::with_params(spec, pd.params()[..h_len].to_vec())?;
            DictionaryDescriptor::from_parametric(&reduced)
        }
    })
}

/// Trains (or takes) a dictionary, extracts the separable model from the
/// training split, fits both baselines with the same lifted dimension and,
/// when a system and test protocol are given, compares held-out rollouts.
pub fn pipeline(
    config: &PipelineConfig,
    data: &SnapshotSet,
    system: Option<&ControlSystem>,
) -> Result<PipelineOutcome> {
    config.train.validate()?;
    let aug = to_augmented(data)?;
    let (train_set, _) = data.split_at(config.train.train_len(data.len()));
    let train_aug = to_augmented(&train_set)?;

    let (desc, dictionary_report) = match &config.frozen {
        Some(d) => (d.clone(), None),
        None => {
            let (dict, report) = train(&config.train, &aug)?;
            if let Some(reason) = &report.aborted {
                log::error!("dictionary training aborted: {reason}");
                return Err(KcfError::NonFiniteLoss {
                    loss: f64::NAN,
                    param_norm: super::loss::param_norm(dict.params()),
                });
            }
            (DictionaryDescriptor::from_parametric(&dict), Some(report))
        }
    };
    let (separable, consistency) = SeparableModel::identify(&desc, &train_aug)?;

    let mut baseline_reports = Vec::new();
    let mut baseline_desc = |kind: BaselineKind| -> Result<DictionaryDescriptor> {
        if config.frozen.is_some() || !config.train_baselines {
            return state_only(&desc);
        }
        let (dict, report) = train_baseline(&config.train, kind, &aug)?;
        baseline_reports.push(report);
        Ok(DictionaryDescriptor::from_parametric(&dict))
    };
    let linear = fit_linear_baseline(&baseline_desc(BaselineKind::Linear)?, &train_set)?;
    let bilinear =
        fit_bilinear_baseline(&baseline_desc(BaselineKind::Bilinear)?, &train_set, false)?;

    let comparison = match (system, &config.test) {
        (Some(sys), Some(protocol)) => {
            let cases = test_cases(sys, protocol)?;
            let models: [(&str, &dyn crate::model::LiftedPredictor); 3] = [
                ("separable", &separable),
                ("linear", &linear),
                ("bilinear", &bilinear),
            ];
            Some(compare_models(&cases, &models).0)
        }
        _ => None,
    };
    Ok(PipelineOutcome {
        separable,
        consistency,
        dictionary_report,
        linear,
        bilinear,
        baseline_reports,
        comparison,
    })
}
