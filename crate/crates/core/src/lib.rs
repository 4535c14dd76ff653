//! Simulation and verification toolkit for an inertial primal-dual flow
//! solving linear equality constrained convex programs.
//!
//! The flow couples a heavy-ball (second-order) primal trajectory with a
//! first-order dual trajectory through the augmented Lagrangian, with a time
//! scaling β(t) multiplying the driving terms:
//!
//! ```text
//!     x''(t) + γ x'(t) = −β(t) (∇f(x) + Aᵀλ + σ Aᵀ(Ax − b)) [+ ε(t)]
//!     λ'(t)            =  β(t) (A(x + δ x') − b)
//! ```
//!
//! Under the scaling condition β'(t) ≤ (1/δ)β(t), 1/δ < γ, a Lyapunov energy
//! decays along trajectories; constant β gives ergodic O(1/t) rates,
//! exponentially growing β gives exponential rates, and both survive any
//! integrable perturbation ε. The crate simulates the flow, tracks the
//! energy and rate diagnostics online, and ships a config-driven experiment
//! runner ([`runner`]) plus presets reproducing each guarantee regime.
//!
//! Quick start:
//!
//! ```
//! use pdflow::prelude::*;
//!
//! let problem = pdflow::problem::quad1d(1.0)?;
//! let damping = DampingParams::new(2.0, 1.0, 1.0)?;
//! let schedule = ScalingSchedule::constant(1.0, 0.0)?;
//! let saddle = problem.solve_saddle()?;
//! let init = FlowState::zero(1, 1, 0.0);
//! let cfg = IntegratorConfig::rk4(1e-3, 30.0).with_stride(10);
//! let trajectory = integrate_flow(
//!     &problem, &damping, &schedule, &Perturbation::zero(1), &init, &cfg, &saddle,
//! )?;
//! let (stationarity, feasibility) = problem.kkt_residual(
//!     &trajectory.final_sample().x,
//!     &trajectory.final_sample().lambda,
//! )?;
//! assert!(stationarity < 1e-2 && feasibility < 1e-2);
//! # Ok::<(), pdflow::error::FlowError>(())
//! ```

// `!(x > 0.0)` is used for positivity validation on purpose: unlike
// `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod batch;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod integrate;
pub mod problem;
pub mod quadrature;
pub mod runner;
pub mod scaling;

pub mod prelude {
    pub use crate::analysis::{
        energy, energy_monotonicity_check, energy_series, fit_rate, gronwall_bound_check, metrics,
        EnergyReport, RateFit, RateModel,
    };
    pub use crate::dynamics::{
        perturbation_l1_norm, vector_field, FlowDerivative, FlowState, Perturbation,
    };
    pub use crate::error::{FlowError, Result};
    pub use crate::integrate::{
        integrate_flow, IntegrationMethod, IntegratorConfig, RunStatus, TrajectoryRecord,
    };
    pub use crate::problem::{
        quad1d, random_quad, ConstrainedProblem, Objective, QuadraticObjective, SaddlePoint,
    };
    pub use crate::scaling::{validate_scaling, DampingParams, ScalingSchedule, ScheduleFamily};
}
