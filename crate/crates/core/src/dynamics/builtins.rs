use std::sync::Arc;

use super::{discretize_rk4, ControlSystem, OdeRhs, StepMap};
use crate::error::{KcfError, Result};

/// Names accepted by [`builtin`].
pub const BUILTIN_SYSTEMS: [&str; 3] = ["example_poly", "dc_motor_tanh", "dc_motor_tanhcos"];

/// Sampling period of the DC motor benchmarks (seconds).
pub const DC_MOTOR_DT: f64 = 0.005;

/// Coefficients of the polynomial example
///
/// ```text
/// x1+ = a x1 + b u
/// x2+ = c x2 + d x1^2 + e x1 u + f u + g sin(u) + h
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
}

impl Default for PolyParams {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 1.0,
            c: 0.8,
            d: 0.1,
            e: 0.2,
            f: 0.3,
            g: 0.4,
            h: 0.05,
        }
    }
}

/// The polynomial example on the box `[-1, 1]^2 x [-2, 2]`.
pub fn example_poly(p: PolyParams) -> ControlSystem {
    let step: StepMap = Arc::new(move |x: &[f64], u: &[f64]| {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        vec![
            p.a * x1 + p.b * u,
            p.c * x2 + p.d * x1 * x1 + p.e * x1 * u + p.f * u + p.g * u.sin() + p.h,
        ]
    });
    ControlSystem::new(
        "example_poly",
        vec![(-1.0, 1.0); 2],
        vec![(-2.0, 2.0)],
        step,
    )
}

/// Nonlinearity `f(u)` in the field-current injection of the DC motor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputNonlinearity {
    /// `2 tanh(u)`
    Tanh,
    /// `2 tanh(u cos(u))`
    TanhCos,
}

impl InputNonlinearity {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            InputNonlinearity::Tanh => 2.0 * u.tanh(),
            InputNonlinearity::TanhCos => 2.0 * (u * u.cos()).tanh(),
        }
    }
}

/// Physical constants of the DC motor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcMotorParams {
    pub r_a: f64,
    pub l_a: f64,
    pub k_m: f64,
    pub u_a: f64,
    pub b: f64,
    pub tau_l: f64,
    pub j: f64,
}

impl Default for DcMotorParams {
    fn default() -> Self {
        Self {
            r_a: 12.345,
            l_a: 0.314,
            k_m: 0.253,
            u_a: 60.0,
            b: 0.00732,
            tau_l: 1.47,
            j: 0.00441,
        }
    }
}

/// Continuous-time DC motor: `x1` armature current, `x2` angular velocity.
pub fn dc_motor_rhs(p: DcMotorParams, nl: InputNonlinearity) -> OdeRhs {
    Arc::new(move |x: &[f64], u: &[f64]| {
        let fu = nl.eval(u[0]);
        vec![
            -(p.r_a / p.l_a) * x[0] - (p.k_m / p.l_a) * x[1] * fu + p.u_a / p.l_a,
            -(p.b / p.j) * x[1] + (p.k_m / p.j) * x[0] * fu - p.tau_l / p.j,
        ]
    })
}

/// Looks up a builtin system by name.
pub fn builtin(name: &str) -> Result<ControlSystem> {
    let motor = |nl| {
        discretize_rk4(
            name,
            dc_motor_rhs(DcMotorParams::default(), nl),
            DC_MOTOR_DT,
            vec![(-5.0, 15.0), (-250.0, 125.0)],
            vec![(-4.0, 4.0)],
        )
    };
    match name {
        "example_poly" => Ok(example_poly(PolyParams::default())),
        "dc_motor_tanh" => motor(InputNonlinearity::Tanh),
        "dc_motor_tanhcos" => motor(InputNonlinearity::TanhCos),
        _ => Err(KcfError::UnknownSystem {
            name: name.to_string(),
            builtins: BUILTIN_SYSTEMS.join(", "),
        }),
    }
}
