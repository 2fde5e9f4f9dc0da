//! Discrete-time control systems `x+ = T(x, u)`, their augmented form
//! `(x, u) -> (T(x, u), u)`, trajectory simulation and snapshot generation.

mod builtins;
mod data;
pub mod io;

use std::fmt;
use std::sync::Arc;

use log::warn;

use crate::error::{KcfError, Result};

pub use builtins::{
    builtin, dc_motor_rhs, example_poly, DcMotorParams, InputNonlinearity, PolyParams,
    BUILTIN_SYSTEMS, DC_MOTOR_DT,
};
pub use data::{
    random_input_signal, run_experiments, to_augmented, AugmentedSnapshots, DatasetStats,
    ExperimentPlan, InputMode, SnapshotSet,
};

/// Right-hand side of a controlled ODE, `xdot = f(x, u)`.
pub type OdeRhs = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Step map of a discrete-time control system.
pub type StepMap = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Closed interval bounds for one coordinate.
pub type Interval = (f64, f64);

/// A discrete-time control system with its nominal state and input boxes.
#[derive(Clone)]
pub struct ControlSystem {
    pub name: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub state_box: Vec<Interval>,
    pub input_box: Vec<Interval>,
    /// Sampling period when the system is a discretized ODE.
    pub dt: Option<f64>,
    step_map: StepMap,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("state_box", &self.state_box)
            .field("input_box", &self.input_box)
            .field("dt", &self.dt)
            .finish()
    }
}

/// A simulated trajectory: `states.len() == inputs.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Number of visited states outside the nominal state box.
    pub out_of_box: usize,
}

impl ControlSystem {
    pub fn new(
        name: impl Into<String>,
        state_box: Vec<Interval>,
        input_box: Vec<Interval>,
        step_map: StepMap,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim: state_box.len(),
            input_dim: input_box.len(),
            state_box,
            input_box,
            dt: None,
            step_map,
        }
    }

    /// Applies the step map without any checks.
    pub fn raw_step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.step_map)(x, u)
    }

    /// One step of the dynamics, rejecting non-finite results.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        if !in_box(u, &self.input_box) {
            warn!("{}: input {:?} outside input box", self.name, u);
        }
        let next = self.raw_step(x, u);
        check_finite(&next, 0)?;
        Ok(next)
    }

    /// The augmented step `(x, u) -> (T(x, u), u)`. The input is returned
    /// unchanged.
    pub fn augmented_step(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let next = self.step(x, u)?;
        Ok((next, u.to_vec()))
    }

    /// The autonomous member `T_{u*}` of the constant-input family.
    pub fn constant_input_map(&self, u_star: Vec<f64>) -> impl Fn(&[f64]) -> Result<Vec<f64>> + '_ {
        move |x| self.step(x, &u_star)
    }

    /// Simulates the system from `x0` under the given input sequence.
    pub fn simulate(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<Trajectory> {
        if inputs.is_empty() {
            return Err(KcfError::Config("simulate needs at least one input".into()));
        }
        let mut states = Vec::with_capacity(inputs.len() + 1);
        let mut out_of_box = usize::from(!in_box(x0, &self.state_box));
        states.push(x0.to_vec());
        for (k, u) in inputs.iter().enumerate() {
            let x = states.last().expect("non-empty");
            self.check_dims(x, u)?;
            let next = self.raw_step(x, u);
            check_finite(&next, k)?;
            if !in_box(&next, &self.state_box) {
                out_of_box += 1;
            }
            states.push(next);
        }
        if out_of_box > 0 {
            log::debug!("{}: {} states outside the state box", self.name, out_of_box);
        }
        Ok(Trajectory {
            states,
            inputs: inputs.to_vec(),
            out_of_box,
        })
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim || u.len() != self.input_dim {
            return Err(KcfError::DimensionMismatch(format!(
                "{} expects (n, m) = ({}, {}), got ({}, {})",
                self.name,
                self.state_dim,
                self.input_dim,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

impl Trajectory {
    /// Checks `states[k+1] == T(states[k], inputs[k])` bit-for-bit.
    pub fn replays_on(&self, sys: &ControlSystem) -> bool {
        self.inputs
            .iter()
            .enumerate()
            .all(|(k, u)| sys.raw_step(&self.states[k], u) == self.states[k + 1])
    }
}

fn in_box(v: &[f64], bounds: &[Interval]) -> bool {
    v.iter()
        .zip(bounds)
        .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    match v.iter().position(|c| !c.is_finite()) {
        Some(coordinate) => Err(KcfError::NonFiniteState { step, coordinate }),
        None => Ok(()),
    }
}

/// One classical fourth-order Runge-Kutta step with the input held constant.
pub fn rk4_step(
    rhs: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    u: &[f64],
    dt: f64,
) -> Vec<f64> {
    let axpy =
        |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = rhs(x, u);
    let k2 = rhs(&axpy(0.5 * dt, &k1), u);
    let k3 = rhs(&axpy(0.5 * dt, &k2), u);
    let k4 = rhs(&axpy(dt, &k3), u);
    (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Turns a controlled ODE into a discrete-time system via one RK4 step per
/// sampling period (zero-order hold on the input).
pub fn discretize_rk4(
    name: impl Into<String>,
    rhs: OdeRhs,
    dt: f64,
    state_box: Vec<Interval>,
    input_box: Vec<Interval>,
) -> Result<ControlSystem> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(KcfError::Config(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let step: StepMap = Arc::new(move |x: &[f64], u: &[f64]| rk4_step(rhs.as_ref(), x, u, dt));
    let mut sys = ControlSystem::new(name, state_box, input_box, step);
    sys.dt = Some(dt);
    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> OdeRhs {
        Arc::new(|x: &[f64], _u: &[f64]| vec![-x[0]])
    }

    #[test]
    fn example_poly_origin_step() {
        let sys = example_poly(PolyParams::default());
        let next = sys.step(&[0.0, 0.0], &[0.0]).unwrap();
        // x1+ = a*0 + b*0, x2+ = h
        assert_eq!(next, vec![0.0, 0.05]);
    }

    #[test]
    fn augmented_step_keeps_input_bits() {
        let sys = example_poly(PolyParams::default());
        let u = [3.0_f64];
        let (x, u_next) = sys.augmented_step(&[1.0, 2.0], &u).unwrap();
        assert_eq!(x, sys.step(&[1.0, 2.0], &u).unwrap());
        assert_eq!(u_next[0].to_bits(), u[0].to_bits());
    }

    #[test]
    fn constant_input_family_matches_step() {
        let sys = example_poly(PolyParams::default());
        let t_star = sys.constant_input_map(vec![0.7]);
        let x = [0.3, -0.4];
        assert_eq!(t_star(&x).unwrap(), sys.step(&x, &[0.7]).unwrap());
    }

    #[test]
    fn two_step_simulation_by_hand() {
        let p = PolyParams::default();
        let sys = example_poly(p);
        let traj = sys.simulate(&[1.0, 1.0], &[vec![0.1], vec![-0.2]]).unwrap();
        let manual = |x: [f64; 2], u: f64| {
            [
                p.a * x[0] + p.b * u,
                p.c * x[1] + p.d * x[0] * x[0] + p.e * x[0] * u + p.f * u + p.g * u.sin() + p.h,
            ]
        };
        let s1 = manual([1.0, 1.0], 0.1);
        let s2 = manual(s1, -0.2);
        assert_eq!(traj.states.len(), 3);
        for (got, want) in traj.states[1].iter().zip(s1) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in traj.states[2].iter().zip(s2) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(traj.replays_on(&sys));
    }

    #[test]
    fn single_input_gives_two_states() {
        let sys = example_poly(PolyParams::default());
        let traj = sys.simulate(&[0.0, 0.0], &[vec![0.0]]).unwrap();
        assert_eq!(traj.states.len(), 2);
    }

    #[test]
    fn empty_inputs_rejected() {
        let sys = example_poly(PolyParams::default());
        assert!(matches!(
            sys.simulate(&[0.0, 0.0], &[]),
            Err(KcfError::Config(_))
        ));
    }

    #[test]
    fn non_finite_state_reports_step_and_coordinate() {
        let step: StepMap = Arc::new(|x: &[f64], _u: &[f64]| vec![x[0], x[1] * 1e300]);
        let sys = ControlSystem::new("blowup", vec![(-1.0, 1.0); 2], vec![(-1.0, 1.0)], step);
        let err = sys.simulate(&[1.0, 1.0], &vec![vec![0.0]; 5]).unwrap_err();
        assert_eq!(
            err,
            KcfError::NonFiniteState {
                step: 1,
                coordinate: 1
            }
        );
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let sys =
            discretize_rk4("decay", decay(), 0.005, vec![(-1.0, 1.0)], vec![(0.0, 0.0)]).unwrap();
        let next = sys.step(&[1.0], &[0.0]).unwrap()[0];
        let exact = (-0.005_f64).exp();
        assert!(((next - exact) / exact).abs() <= 1e-10);
    }

    #[test]
    fn rk4_zero_rhs_is_identity() {
        let rhs: OdeRhs = Arc::new(|x: &[f64], _u: &[f64]| vec![0.0; x.len()]);
        let sys =
            discretize_rk4("still", rhs, 0.1, vec![(-1.0, 1.0); 2], vec![(0.0, 0.0)]).unwrap();
        assert_eq!(sys.step(&[0.25, -0.5], &[0.0]).unwrap(), vec![0.25, -0.5]);
    }

    #[test]
    fn rk4_rejects_bad_dt() {
        assert!(discretize_rk4("x", decay(), 0.0, vec![(0.0, 1.0)], vec![]).is_err());
        assert!(discretize_rk4("x", decay(), -1.0, vec![(0.0, 1.0)], vec![]).is_err());
    }

    #[test]
    fn rk4_local_error_is_fifth_order() {
        // xdot = -x + sin(x): smooth, no closed form, so compare against a
        // 1000x finer RK4 solution over one step.
        let rhs = |x: &[f64], _u: &[f64]| vec![-x[0] + x[0].sin() * 0.5 + 1.0];
        let reference = |h: f64| {
            let mut x = vec![0.8];
            let fine = h / 1000.0;
            for _ in 0..1000 {
                x = rk4_step(&rhs, &x, &[], fine);
            }
            x[0]
        };
        let err = |h: f64| (rk4_step(&rhs, &[0.8], &[], h)[0] - reference(h)).abs();
        let h = 0.2;
        let (e1, e2, e4) = (err(h), err(h / 2.0), err(h / 4.0));
        let order_a = (e1 / e2).log2();
        let order_b = (e2 / e4).log2();
        assert!((4.5..5.5).contains(&order_a), "order {order_a}");
        assert!((4.5..5.5).contains(&order_b), "order {order_b}");
    }

    #[test]
    fn rk4_global_order_near_four() {
        // Global error at t = 1 on xdot = -x^2 + 1, exact: tanh(t + atanh(x0)).
        let rhs = |x: &[f64], _u: &[f64]| vec![1.0 - x[0] * x[0]];
        let x0: f64 = 0.1;
        let exact = (1.0 + x0.atanh()).tanh();
        let err = |steps: usize| {
            let dt = 1.0 / steps as f64;
            let mut x = vec![x0];
            for _ in 0..steps {
                x = rk4_step(&rhs, &x, &[], dt);
            }
            (x[0] - exact).abs()
        };
        let (e1, e2, e4) = (err(10), err(20), err(40));
        let p1 = (e1 / e2).log2();
        let p2 = (e2 / e4).log2();
        assert!((3.8..=4.2).contains(&p1), "order {p1}");
        assert!((3.8..=4.2).contains(&p2), "order {p2}");
    }
}
