//! Open-loop rollout comparison of lifted models against a simulator.

use serde::{Deserialize, Serialize};

use crate::dynamics::{random_input_signal, ControlSystem};
use crate::error::{KcfError, Result};
use crate::model::LiftedPredictor;

fn default_steps() -> usize {
    600
}

fn default_hold() -> usize {
    1
}

/// Test signal and initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestProtocol {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Steps each random input value is held.
    #[serde(default = "default_hold")]
    pub hold: usize,
    pub seed: u64,
    /// Every initial state is driven by the same input signal. Empty means
    /// the centre of the state box.
    #[serde(default)]
    pub initial_states: Vec<Vec<f64>>,
}

impl TestProtocol {
    pub fn new(seed: u64, initial_states: Vec<Vec<f64>>) -> Self {
        Self {
            steps: default_steps(),
            hold: default_hold(),
            seed,
            initial_states,
        }
    }

    /// 600 steps of a hold-1 signal from `[0, -125]` and `[0, 125]`.
    pub fn dc_motor(seed: u64) -> Self {
        Self::new(seed, vec![vec![0.0, -125.0], vec![0.0, 125.0]])
    }
}

/// One ground-truth test trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub x0: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
}

pub fn test_cases(sys: &ControlSystem, protocol: &TestProtocol) -> Result<Vec<TestCase>> {
    if protocol.steps == 0 || protocol.hold == 0 {
        return Err(KcfError::Config(
            "test steps and hold must be positive".into(),
        ));
    }
    let inputs = random_input_signal(sys, protocol.steps, protocol.hold, protocol.seed);
    let starts = if protocol.initial_states.is_empty() {
        vec![sys
            .state_box
            .iter()
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()]
    } else {
        protocol.initial_states.clone()
    };
    starts
        .into_iter()
        .map(|x0| {
            let traj = sys.simulate(&x0, &inputs)?;
            Ok(TestCase {
                x0,
                inputs: inputs.clone(),
                truth: traj.states,
            })
        })
        .collect()
}

/// Rollout error of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub name: String,
    pub kind: String,
    /// Per-state RMSE pooled over all cases and predicted steps; `None`
    /// when a rollout failed.
    pub rmse: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ModelScore {
    /// RMSE of one state coordinate, `+inf` for a failed rollout.
    pub fn rmse_of(&self, state: usize) -> f64 {
        self.rmse.as_ref().map_or(f64::INFINITY, |r| r[state])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub state_dim: usize,
    pub scores: Vec<ModelScore>,
}

impl Comparison {
    pub fn score(&self, name: &str) -> Option<&ModelScore> {
        self.scores.iter().find(|s| s.name == name)
    }

    /// `model,kind,state,rmse` rows.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("model,kind,state,rmse\n");
        for s in &self.scores {
            for i in 0..self.state_dim {
                let v = s
                    .rmse
                    .as_ref()
                    .map_or(String::from("nan"), |r| format!("{:e}", r[i]));
                out.push_str(&format!("{},{},x{},{}\n", s.name, s.kind, i + 1, v));
            }
        }
        out
    }
}

/// Predicted states per model and case (`None` for failed rollouts).
pub type Predictions = Vec<Vec<Option<Vec<Vec<f64>>>>>;

/// Rolls every model out on every case and pools squared errors over the
/// predicted steps `1..=steps`.
pub fn compare_models(
    cases: &[TestCase],
    models: &[(&str, &dyn LiftedPredictor)],
) -> (Comparison, Predictions) {
    let n = cases.first().map_or(0, |c| c.x0.len());
    let mut scores = Vec::new();
    let mut predictions = Vec::new();
    for (name, model) in models {
        let mut sq = vec![0.0; n];
        let mut count = 0usize;
        let mut failure = None;
        let mut per_case = Vec::new();
        for case in cases {
            match model.rollout(&case.x0, &case.inputs) {
                Ok(r) => {
                    for (pred, truth) in r.states.iter().zip(&case.truth).skip(1) {
                        for i in 0..n {
                            sq[i] += (pred[i] - truth[i]).powi(2);
                        }
                        count += 1;
                    }
                    per_case.push(Some(r.states));
                }
                Err(err) => {
                    failure.get_or_insert_with(|| err.to_string());
                    per_case.push(None);
                }
            }
        }
        let rmse = (failure.is_none() && count > 0)
            .then(|| sq.iter().map(|v| (v / count as f64).sqrt()).collect());
        scores.push(ModelScore {
            name: name.to_string(),
            kind: model.kind().to_string(),
            rmse,
            failure,
        });
        predictions.push(per_case);
    }
    (
        Comparison {
            state_dim: n,
            scores,
        },
        predictions,
    )
}

/// Plot-ready trajectories: `case,step,u1..,x1_true..,<model>_x1..`.
pub fn trajectories_csv(cases: &[TestCase], names: &[&str], predictions: &Predictions) -> String {
    let n = cases.first().map_or(0, |c| c.x0.len());
    let m = cases
        .first()
        .and_then(|c| c.inputs.first())
        .map_or(0, Vec::len);
    let mut header = vec!["case".to_string(), "step".to_string()];
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=n).map(|i| format!("x{i}_true")));
    for name in names {
        header.extend((1..=n).map(|i| format!("{name}_x{i}")));
    }
    let mut out = header.join(",");
    out.push('\n');
    for (c, case) in cases.iter().enumerate() {
        for (k, truth) in case.truth.iter().enumerate() {
            let mut row = vec![c.to_string(), k.to_string()];
            match case.inputs.get(k) {
                Some(u) => row.extend(u.iter().map(|v| format!("{v:e}"))),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            row.extend(truth.iter().map(|v| format!("{v:e}")));
            for per_model in predictions {
                match &per_model[c] {
                    Some(states) => row.extend(states[k].iter().map(|v| format!("{v:e}"))),
                    None => row.extend(std::iter::repeat_n(String::from("nan"), n)),
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    out
}
