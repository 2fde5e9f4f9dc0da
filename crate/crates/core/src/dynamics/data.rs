use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ControlSystem, Interval};
use crate::error::{KcfError, Result};

/// Snapshot matrices `X`, `X+`, `U` (one column per snapshot). `U+` is `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub x: DMatrix<f64>,
    pub x_plus: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub stats: DatasetStats,
}

/// Bookkeeping from dataset generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rejected_experiments: usize,
    pub out_of_box_states: usize,
}

/// Augmented snapshots `Z = [X; U]`, `Z+ = [X+; U]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSnapshots {
    pub z: DMatrix<f64>,
    pub z_plus: DMatrix<f64>,
    pub state_dim: usize,
    pub input_dim: usize,
}

/// How inputs are drawn inside one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputMode {
    /// One input value for the whole experiment.
    Constant,
    /// A fresh input value every `hold_steps` steps.
    PiecewiseConstant { hold_steps: usize },
}

/// Parameters for [`run_experiments`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub num_experiments: usize,
    pub steps_per_experiment: usize,
    pub seed: u64,
    pub input_mode: InputMode,
}

impl SnapshotSet {
    pub fn new(x: DMatrix<f64>, x_plus: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        let n = x.ncols();
        if x_plus.ncols() != n || u.ncols() != n {
            return Err(KcfError::DimensionMismatch(format!(
                "snapshot column counts differ: X {}, X+ {}, U {}",
                n,
                x_plus.ncols(),
                u.ncols()
            )));
        }
        if x.nrows() != x_plus.nrows() {
            return Err(KcfError::DimensionMismatch(format!(
                "X has {} rows but X+ has {}",
                x.nrows(),
                x_plus.nrows()
            )));
        }
        Ok(Self {
            x,
            x_plus,
            u,
            stats: DatasetStats::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    /// `U+`, identical to `U`.
    pub fn u_plus(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Columns `[0, k)` and `[k, N)`.
    pub fn split_at(&self, k: usize) -> (SnapshotSet, SnapshotSet) {
        let k = k.min(self.len());
        let rest = self.len() - k;
        let part = |start: usize, len: usize| SnapshotSet {
            x: self.x.columns(start, len).into_owned(),
            x_plus: self.x_plus.columns(start, len).into_owned(),
            u: self.u.columns(start, len).into_owned(),
            stats: DatasetStats::default(),
        };
        (part(0, k), part(k, rest))
    }

    /// Keeps the listed columns, in order.
    pub fn select(&self, cols: &[usize]) -> SnapshotSet {
        SnapshotSet {
            x: self.x.select_columns(cols),
            x_plus: self.x_plus.select_columns(cols),
            u: self.u.select_columns(cols),
            stats: DatasetStats::default(),
        }
    }

    /// Checks `X+[:, i] == T(X[:, i], U[:, i])` bit-for-bit for every column.
    pub fn replays_on(&self, sys: &ControlSystem) -> bool {
        (0..self.len()).all(|i| {
            let x: Vec<f64> = self.x.column(i).iter().copied().collect();
            let u: Vec<f64> = self.u.column(i).iter().copied().collect();
            let next = sys.raw_step(&x, &u);
            next.iter()
                .zip(self.x_plus.column(i).iter())
                .all(|(a, b)| a == b)
        })
    }
}

impl AugmentedSnapshots {
    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self) -> DMatrix<f64> {
        self.z.rows(0, self.state_dim).into_owned()
    }

    pub fn x_plus(&self) -> DMatrix<f64> {
        self.z_plus.rows(0, self.state_dim).into_owned()
    }

    pub fn u(&self) -> DMatrix<f64> {
        self.z.rows(self.state_dim, self.input_dim).into_owned()
    }

    /// Recovers the snapshot matrices.
    pub fn split(&self) -> SnapshotSet {
        SnapshotSet {
            x: self.x(),
            x_plus: self.x_plus(),
            u: self.u(),
            stats: DatasetStats::default(),
        }
    }

    pub fn select(&self, cols: &[usize]) -> AugmentedSnapshots {
        AugmentedSnapshots {
            z: self.z.select_columns(cols),
            z_plus: self.z_plus.select_columns(cols),
            state_dim: self.state_dim,
            input_dim: self.input_dim,
        }
    }
}

/// Stacks `Z = [X; U]` and `Z+ = [X+; U]`.
pub fn to_augmented(ss: &SnapshotSet) -> Result<AugmentedSnapshots> {
    let n = ss.len();
    if ss.x_plus.ncols() != n || ss.u.ncols() != n {
        return Err(KcfError::DimensionMismatch(
            "snapshot column counts differ".into(),
        ));
    }
    let stack = |top: &DMatrix<f64>| crate::linalg::vstack(&[top, &ss.u]);
    Ok(AugmentedSnapshots {
        z: stack(&ss.x),
        z_plus: stack(&ss.x_plus),
        state_dim: ss.state_dim(),
        input_dim: ss.input_dim(),
    })
}

fn draw_in_box(rng: &mut ChaCha8Rng, bounds: &[Interval]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
        .collect()
}

/// Draws an input sequence of `len` values, uniform over `input_box`,
/// refreshed every `hold` steps.
pub(crate) fn draw_inputs(
    rng: &mut ChaCha8Rng,
    input_box: &[Interval],
    len: usize,
    hold: usize,
) -> Vec<Vec<f64>> {
    let hold = hold.max(1);
    let mut inputs = Vec::with_capacity(len);
    let mut current = Vec::new();
    for k in 0..len {
        if k % hold == 0 {
            current = draw_in_box(rng, input_box);
        }
        inputs.push(current.clone());
    }
    inputs
}

/// Piecewise-constant random input signal from a named seed.
pub fn random_input_signal(
    sys: &ControlSystem,
    len: usize,
    hold: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_inputs(&mut rng, &sys.input_box, len, hold)
}

/// Runs independent experiments from uniformly drawn initial conditions and
/// collects every consecutive `(x_k, u_k, x_{k+1})` triple.
///
/// Experiments that hit a non-finite state are dropped whole and counted in
/// `stats.rejected_experiments`.
pub fn run_experiments(sys: &ControlSystem, plan: &ExperimentPlan) -> Result<SnapshotSet> {
    if plan.num_experiments == 0 || plan.steps_per_experiment == 0 {
        return Err(KcfError::Config(
            "experiment counts must be at least 1".into(),
        ));
    }
    let hold = match plan.input_mode {
        InputMode::Constant => plan.steps_per_experiment,
        InputMode::PiecewiseConstant { hold_steps } => {
            if hold_steps == 0 {
                return Err(KcfError::Config("hold_steps must be at least 1".into()));
            }
            hold_steps
        }
    };
    let (n, m, steps) = (sys.state_dim, sys.input_dim, plan.steps_per_experiment);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut xs = Vec::with_capacity(plan.num_experiments * steps * n);
    let mut xps = Vec::with_capacity(plan.num_experiments * steps * n);
    let mut us = Vec::with_capacity(plan.num_experiments * steps * m);
    let mut stats = DatasetStats::default();
    for _ in 0..plan.num_experiments {
        let x0 = draw_in_box(&mut rng, &sys.state_box);
        let inputs = draw_inputs(&mut rng, &sys.input_box, steps, hold);
        match sys.simulate(&x0, &inputs) {
            Ok(traj) => {
                stats.out_of_box_states += traj.out_of_box;
                for k in 0..steps {
                    xs.extend_from_slice(&traj.states[k]);
                    xps.extend_from_slice(&traj.states[k + 1]);
                    us.extend_from_slice(&traj.inputs[k]);
                }
            }
            Err(KcfError::NonFiniteState { step, .. }) => {
                log::warn!("{}: experiment diverged at step {step}; dropped", sys.name);
                stats.rejected_experiments += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let cols = xs.len() / n.max(1);
    let mut ss = SnapshotSet::new(
        DMatrix::from_vec(n, cols, xs),
        DMatrix::from_vec(n, cols, xps),
        DMatrix::from_vec(m, cols, us),
    )?;
    ss.stats = stats;
    Ok(ss)
}
