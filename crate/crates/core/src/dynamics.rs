//! Right-hand sides of the flow and the perturbation families.
//!
//! The unperturbed flow couples a heavy-ball primal equation with a
//! first-order dual equation, both scaled by β(t):
//!
//! ```text
//!     x'(t) = v(t)
//!     v'(t) = −γ v − β(t) (∇f(x) + Aᵀλ + σ Aᵀ(Ax − b))
//!     λ'(t) =  β(t) (A(x + δ v) − b)
//! ```
//!
//! The perturbed variant adds a disturbance ε(t) to the primal velocity
//! equation only. Convergence survives any ε with ∫ ||ε(t)|| dt < ∞; the
//! perturbation families record that claim via
//! [`Perturbation::claims_integrable`].

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{FlowError, Result};
use crate::problem::ConstrainedProblem;
use crate::quadrature::adaptive_simpson;
use crate::scaling::{DampingParams, ScalingSchedule};

/// Flow state (x, v = x', λ) at time t. Construction rejects non-finite
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub lambda: DVector<f64>,
    pub t: f64,
}

impl FlowState {
    pub fn new(x: DVector<f64>, v: DVector<f64>, lambda: DVector<f64>, t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(FlowError::NonFinite { term: "time", t });
        }
        for (name, vec) in [("x", &x), ("v", &v), ("lambda", &lambda)] {
            if vec.iter().any(|e| !e.is_finite()) {
                return Err(FlowError::NonFinite {
                    term: match name {
                        "x" => "state x",
                        "v" => "state v",
                        _ => "state lambda",
                    },
                    t,
                });
            }
        }
        if x.len() != v.len() {
            return Err(FlowError::Dimension {
                what: "velocity",
                expected: x.len(),
                found: v.len(),
            });
        }
        Ok(Self { x, v, lambda, t })
    }

    /// Rest state at the origin: x = 0, v = 0, λ = 0.
    pub fn zero(n: usize, m: usize, t: f64) -> Self {
        Self {
            x: DVector::zeros(n),
            v: DVector::zeros(n),
            lambda: DVector::zeros(m),
            t,
        }
    }
}

/// Scalar decay profile applied along a fixed unit direction.
#[derive(Clone)]
enum Profile {
    Zero,
    /// ε₀ (1 + t − t₀)^{−p}; integrable iff p > 1.
    PowerDecay {
        eps0: f64,
        power: f64,
    },
    /// ε₀ e^{−r(t − t₀)}; always integrable for r > 0.
    ExponentialDecay {
        eps0: f64,
        rate: f64,
    },
    /// Arbitrary time profile with a caller-supplied integrability claim.
    Custom {
        oracle: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        claims_integrable: bool,
    },
}

/// Additive disturbance ε(t) in the primal equation, separable as a scalar
/// profile times a fixed coordinate direction.
#[derive(Clone)]
pub struct Perturbation {
    dim: usize,
    t0: f64,
    direction: usize,
    profile: Profile,
}

impl std::fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let family = match &self.profile {
            Profile::Zero => "zero".to_string(),
            Profile::PowerDecay { eps0, power } => format!("power_decay(eps0={eps0}, p={power})"),
            Profile::ExponentialDecay { eps0, rate } => {
                format!("exponential_decay(eps0={eps0}, rate={rate})")
            }
            Profile::Custom { .. } => "custom".to_string(),
        };
        write!(
            f,
            "Perturbation {{ dim: {}, t0: {}, direction: {}, family: {family} }}",
            self.dim, self.t0, self.direction
        )
    }
}

impl Perturbation {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            t0: 0.0,
            direction: 0,
            profile: Profile::Zero,
        }
    }

    pub fn power_decay(
        dim: usize,
        t0: f64,
        eps0: f64,
        power: f64,
        direction: usize,
    ) -> Result<Self> {
        if !(power > 0.0) {
            return Err(FlowError::InvalidArgument(format!(
                "power-decay exponent must be positive, got {power}"
            )));
        }
        Self::check_direction(dim, direction)?;
        Ok(Self {
            dim,
            t0,
            direction,
            profile: Profile::PowerDecay { eps0, power },
        })
    }

    pub fn exponential_decay(
        dim: usize,
        t0: f64,
        eps0: f64,
        rate: f64,
        direction: usize,
    ) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(FlowError::InvalidArgument(format!(
                "exponential-decay rate must be positive, got {rate}"
            )));
        }
        Self::check_direction(dim, direction)?;
        Ok(Self {
            dim,
            t0,
            direction,
            profile: Profile::ExponentialDecay { eps0, rate },
        })
    }

    pub fn custom<F>(
        dim: usize,
        t0: f64,
        direction: usize,
        claims_integrable: bool,
        profile: F,
    ) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::check_direction(dim, direction)?;
        Ok(Self {
            dim,
            t0,
            direction,
            profile: Profile::Custom {
                oracle: Arc::new(profile),
                claims_integrable,
            },
        })
    }

    fn check_direction(dim: usize, direction: usize) -> Result<()> {
        if direction >= dim {
            return Err(FlowError::Dimension {
                what: "perturbation direction index",
                expected: dim,
                found: direction,
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.profile, Profile::Zero)
    }

    /// Whether ∫ ||ε(t)|| dt < ∞ holds by construction: power decay needs
    /// p > 1, exponential decay always qualifies, custom oracles carry the
    /// caller's claim.
    pub fn claims_integrable(&self) -> bool {
        match &self.profile {
            Profile::Zero => true,
            Profile::PowerDecay { power, .. } => *power > 1.0,
            Profile::ExponentialDecay { .. } => true,
            Profile::Custom {
                claims_integrable, ..
            } => *claims_integrable,
        }
    }

    fn magnitude(&self, t: f64) -> f64 {
        let u = t - self.t0;
        match &self.profile {
            Profile::Zero => 0.0,
            Profile::PowerDecay { eps0, power } => eps0 * (1.0 + u).powf(-power),
            Profile::ExponentialDecay { eps0, rate } => eps0 * (-rate * u).exp(),
            Profile::Custom { oracle, .. } => oracle(t),
        }
    }

    /// ε(t) as a full vector.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        if !matches!(self.profile, Profile::Zero) {
            out[self.direction] = self.magnitude(t);
        }
        out
    }

    /// The single nonzero component: (direction index, ε_dir(t)).
    pub(crate) fn component(&self, t: f64) -> (usize, f64) {
        (self.direction, self.magnitude(t))
    }
}

/// ∫_{t₀}^{T} ||ε(t)|| dt by adaptive quadrature (relative tolerance 1e−8).
pub fn perturbation_l1_norm(eps: &Perturbation, t0: f64, t_end: f64) -> Result<f64> {
    if eps.is_zero() {
        return Ok(0.0);
    }
    adaptive_simpson(|t| eps.magnitude(t).abs(), t0, t_end, 1e-8)
}

/// Time derivative of the flow state.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerivative {
    pub dx: DVector<f64>,
    pub dv: DVector<f64>,
    pub dlambda: DVector<f64>,
}

/// Evaluates the (possibly perturbed) vector field at `state`.
///
/// Non-finite oracle output is detected here, at the field boundary, so the
/// offending term is named before an integrator smears it across the state.
pub fn vector_field(
    problem: &ConstrainedProblem,
    damping: &DampingParams,
    schedule: &ScalingSchedule,
    state: &FlowState,
    eps: &Perturbation,
) -> Result<FlowDerivative> {
    field_core(
        problem,
        damping,
        schedule,
        state.t,
        &state.x,
        &state.v,
        &state.lambda,
        eps,
    )
}

/// Allocation-lean field evaluation shared with the steppers (the hot path
/// of every integration).
#[allow(clippy::too_many_arguments)]
pub(crate) fn field_core(
    problem: &ConstrainedProblem,
    damping: &DampingParams,
    schedule: &ScalingSchedule,
    t: f64,
    x: &DVector<f64>,
    v: &DVector<f64>,
    lambda: &DVector<f64>,
    eps: &Perturbation,
) -> Result<FlowDerivative> {
    let n = problem.dim_primal();
    let m = problem.dim_dual();
    if x.len() != n || v.len() != n {
        return Err(FlowError::Dimension {
            what: "state x",
            expected: n,
            found: x.len().max(v.len()),
        });
    }
    if lambda.len() != m {
        return Err(FlowError::Dimension {
            what: "state lambda",
            expected: m,
            found: lambda.len(),
        });
    }
    if eps.dim() != n {
        return Err(FlowError::Dimension {
            what: "perturbation",
            expected: n,
            found: eps.dim(),
        });
    }

    let beta = schedule.beta(t)?;
    if !beta.is_finite() {
        return Err(FlowError::NonFinite {
            term: "scaling beta(t)",
            t,
        });
    }

    let grad = problem.gradient(x)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(FlowError::NonFinite {
            term: "gradient oracle",
            t,
        });
    }

    let a = problem.constraint_matrix();
    // residual = Ax − b
    let mut residual = -problem.constraint_rhs();
    residual.gemv(1.0, a, x, 1.0);

    // force = ∇f(x) + Aᵀλ + σ Aᵀ(Ax − b)
    let mut force = grad;
    force.gemv_tr(1.0, a, lambda, 1.0);
    force.gemv_tr(damping.sigma, a, &residual, 1.0);

    // dv = −γ v − β force [+ ε(t)]
    let mut dv = if eps.is_zero() {
        v * -damping.gamma
    } else {
        let eps_vec = eps.eval(t);
        if eps_vec.iter().any(|e| !e.is_finite()) {
            return Err(FlowError::NonFinite {
                term: "perturbation",
                t,
            });
        }
        let mut dv = eps_vec;
        dv.axpy(-damping.gamma, v, 1.0);
        dv
    };
    dv.axpy(-beta, &force, 1.0);

    // dλ = β (residual + δ A v)
    let mut dlambda = residual;
    dlambda.gemv(damping.delta, a, v, 1.0);
    dlambda *= beta;

    if dv.iter().any(|e| !e.is_finite()) {
        return Err(FlowError::NonFinite {
            term: "primal acceleration",
            t,
        });
    }
    if dlambda.iter().any(|e| !e.is_finite()) {
        return Err(FlowError::NonFinite {
            term: "dual velocity",
            t,
        });
    }

    Ok(FlowDerivative {
        dx: v.clone(),
        dv,
        dlambda,
    })
}
