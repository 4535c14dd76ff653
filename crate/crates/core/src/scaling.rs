//! Time-scaling schedules β(t) and the scaling-condition validator.
//!
//! The flow multiplies its gradient and constraint terms by a positive
//! schedule β(t). Convergence guarantees hold under the scaling condition
//!
//! ```text
//!     β'(t) ≤ (1/δ) β(t)    and    1/δ < γ,
//! ```
//!
//! optionally strengthened to β'(t) ≤ (1−κ)(1/δ)β(t) for κ ∈ (0, 1]. Three
//! families cover every analyzed regime: constant (ergodic O(1/t) rates),
//! exponential β(t) = β₀ e^{r(t−t₀)} (exponential rates at r = 1/δ), and
//! polynomial β(t) = β₀ (t/t₀)^r.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    Constant,
    Exponential,
    Polynomial,
}

/// Positive scaling schedule with analytic derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSchedule {
    family: ScheduleFamily,
    beta0: f64,
    rate: f64,
    t0: f64,
}

impl ScalingSchedule {
    pub fn new(family: ScheduleFamily, beta0: f64, rate: f64, t0: f64) -> Result<Self> {
        if !(beta0 > 0.0) || !beta0.is_finite() {
            return Err(FlowError::InvalidArgument(format!(
                "beta0 must be positive and finite, got {beta0}"
            )));
        }
        if !rate.is_finite() || !t0.is_finite() {
            return Err(FlowError::InvalidArgument(
                "schedule rate and t0 must be finite".into(),
            ));
        }
        if family == ScheduleFamily::Polynomial && !(t0 > 0.0) {
            return Err(FlowError::InvalidArgument(format!(
                "polynomial schedule requires t0 > 0, got {t0}"
            )));
        }
        Ok(Self {
            family,
            beta0,
            rate,
            t0,
        })
    }

    pub fn constant(beta0: f64, t0: f64) -> Result<Self> {
        Self::new(ScheduleFamily::Constant, beta0, 0.0, t0)
    }

    pub fn exponential(beta0: f64, rate: f64, t0: f64) -> Result<Self> {
        Self::new(ScheduleFamily::Exponential, beta0, rate, t0)
    }

    pub fn polynomial(beta0: f64, rate: f64, t0: f64) -> Result<Self> {
        Self::new(ScheduleFamily::Polynomial, beta0, rate, t0)
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    /// β(t). Usage error for t < t₀.
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.family {
            ScheduleFamily::Constant => self.beta0,
            ScheduleFamily::Exponential => self.beta0 * (self.rate * (t - self.t0)).exp(),
            ScheduleFamily::Polynomial => self.beta0 * (t / self.t0).powf(self.rate),
        })
    }

    /// Analytic derivative β'(t).
    pub fn beta_dot(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.family {
            ScheduleFamily::Constant => 0.0,
            // Written as rate·β so that rate = 1/δ gives β' − β/δ = 0 without
            // rounding residue for dyadic δ.
            ScheduleFamily::Exponential => self.rate * self.beta(t)?,
            ScheduleFamily::Polynomial => self.rate * self.beta(t)? / t,
        })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < self.t0 {
            return Err(FlowError::InvalidArgument(format!(
                "schedule evaluated at t = {t} before t0 = {}",
                self.t0
            )));
        }
        Ok(())
    }
}

/// Constant damping coefficients of the flow. `sigma` mirrors the problem's
/// augmented-Lagrangian penalty and is the single source of truth once a
/// flow is assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingParams {
    pub gamma: f64,
    pub delta: f64,
    pub sigma: f64,
}

impl DampingParams {
    pub fn new(gamma: f64, delta: f64, sigma: f64) -> Result<Self> {
        for (name, value) in [("gamma", gamma), ("delta", delta), ("sigma", sigma)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(FlowError::InvalidArgument(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        Ok(Self {
            gamma,
            delta,
            sigma,
        })
    }

    /// γδ > 1, equivalently 1/δ < γ: the damping half of the scaling
    /// condition.
    pub fn satisfies_guarantee(&self) -> bool {
        self.gamma * self.delta > 1.0
    }
}

/// Outcome of [`validate_scaling`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingReport {
    pub satisfied: bool,
    /// max over the grid of β'(t) − (1−κ)β(t)/δ; ≤ 0 when the condition
    /// holds.
    pub worst_margin: f64,
    pub worst_t: f64,
}

/// Checks β'(t) ≤ (1−κ)(1/δ)β(t) and 1/δ < γ on a dense uniform grid over
/// [t₀, t_end] (1001 points including both endpoints). κ = 0 recovers the
/// plain scaling condition. β positivity is checked on the same grid.
pub fn validate_scaling(
    schedule: &ScalingSchedule,
    damping: &DampingParams,
    t_end: f64,
    kappa: f64,
) -> Result<ScalingReport> {
    if !(t_end > schedule.t0()) {
        return Err(FlowError::InvalidArgument(format!(
            "validation horizon must end after t0 = {}, got {t_end}",
            schedule.t0()
        )));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(FlowError::InvalidArgument(format!(
            "kappa must lie in [0, 1], got {kappa}"
        )));
    }

    const GRID: usize = 1000;
    let t0 = schedule.t0();
    let span = t_end - t0;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_t = t0;
    let mut positive = true;
    let mut scale = 0.0f64;

    for i in 0..=GRID {
        let t = if i == GRID {
            t_end
        } else {
            t0 + span * (i as f64) / (GRID as f64)
        };
        let beta = schedule.beta(t)?;
        let beta_dot = schedule.beta_dot(t)?;
        if !(beta > 0.0) {
            positive = false;
        }
        let margin = beta_dot - (1.0 - kappa) * (beta / damping.delta);
        scale = scale.max((beta / damping.delta).abs());
        if margin > worst_margin {
            worst_margin = margin;
            worst_t = t;
        }
    }

    // Slack of a few ulps so the equality case β' = β/δ reports as satisfied
    // regardless of how 1/δ rounded.
    let margin_ok = worst_margin <= 1e-12 * (1.0 + scale);
    Ok(ScalingReport {
        satisfied: margin_ok && damping.satisfies_guarantee() && positive,
        worst_margin,
        worst_t,
    })
}
