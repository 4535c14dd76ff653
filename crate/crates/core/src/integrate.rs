//! Numerical integration of the flow with online diagnostic accumulators.
//!
//! Two steppers are provided: classic fixed-step RK4 and an embedded
//! Dormand–Prince 5(4) pair with PI step-size control. Both update the same
//! running integrals on every accepted step by trapezoidal quadrature:
//!
//! ```text
//!     ∫ x(s) ds                                  (ergodic average)
//!     ∫ <(1/δ)(x − x*) + v, ε(s)> ds             (perturbation work)
//!     ∫ ((1/δ)β(s) − β'(s)) (Ax(s) − b) ds       (dual partial-integration term)
//!     ∫ β ||Ax − b||² ds,  ∫ ||v||² ds,
//!     ∫ ((1/δ)β − β') (Lσ(x, λ*) − Lσ(x*, λ)) ds (integrability diagnostics)
//! ```
//!
//! Keeping the quadrature outside the ODE state leaves the stepper dimension
//! at 2n + m; the O(h²) accumulator error sits well below the rates being
//! measured. Stage storage and integrand slots are preallocated once per
//! run, so stepping performs no heap allocation — exponential schedules
//! drive the step count into the millions and the per-step constant is what
//! keeps those runs inside their time budget.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FlowState, Perturbation};
use crate::error::{FlowError, Result};
use crate::problem::{ConstrainedProblem, SaddlePoint, TOL_KKT};
use crate::scaling::{DampingParams, ScalingSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMethod {
    Rk4Fixed,
    AdaptiveEmbedded,
}

/// Stepper configuration. `step` is the fixed step for RK4 and the initial
/// step for the adaptive method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub method: IntegrationMethod,
    pub step: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub t_end: f64,
    /// Record every k-th accepted step (the initial state and the final step
    /// are always recorded).
    pub sample_stride: usize,
    /// Adaptive step ceiling; also bounds the accumulator quadrature error.
    pub max_step: f64,
    /// Below this step the adaptive run aborts with `StepUnderflow`.
    pub h_min: f64,
    /// State inf-norm beyond which the run aborts with `BlewUp`.
    pub blow_up_threshold: f64,
    /// Total step budget (accepted + rejected); guards runaway adaptive runs
    /// from exhausting wall-clock time.
    pub max_steps: usize,
    /// Cap on recorded samples; exceeding it aborts with an error telling
    /// the caller to raise `sample_stride`.
    pub max_samples: usize,
}

impl IntegratorConfig {
    pub fn rk4(step: f64, t_end: f64) -> Self {
        Self {
            method: IntegrationMethod::Rk4Fixed,
            step,
            abs_tol: 1e-8,
            rel_tol: 1e-8,
            t_end,
            sample_stride: 1,
            max_step: 1.0,
            h_min: 1e-12,
            blow_up_threshold: 1e12,
            max_steps: 100_000_000,
            max_samples: 2_000_000,
        }
    }

    pub fn adaptive(initial_step: f64, abs_tol: f64, rel_tol: f64, t_end: f64) -> Self {
        Self {
            method: IntegrationMethod::AdaptiveEmbedded,
            step: initial_step,
            abs_tol,
            rel_tol,
            t_end,
            sample_stride: 1,
            max_step: 1.0,
            h_min: 1e-12,
            blow_up_threshold: 1e12,
            max_steps: 100_000_000,
            max_samples: 2_000_000,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.sample_stride = stride;
        self
    }

    pub fn with_max_step(mut self, max_step: f64) -> Self {
        self.max_step = max_step;
        self
    }

    fn validate(&self, t_start: f64) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(FlowError::InvalidArgument(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(FlowError::InvalidArgument(
                "tolerances must be positive".into(),
            ));
        }
        if !(self.t_end > t_start) {
            return Err(FlowError::InvalidArgument(format!(
                "t_end = {} must exceed the initial time {t_start}",
                self.t_end
            )));
        }
        if self.sample_stride == 0 {
            return Err(FlowError::InvalidArgument(
                "sample_stride must be at least 1".into(),
            ));
        }
        if !(self.max_step > 0.0) || !(self.h_min > 0.0) || !(self.blow_up_threshold > 0.0) {
            return Err(FlowError::InvalidArgument(
                "max_step, h_min and blow_up_threshold must be positive".into(),
            ));
        }
        if self.max_steps == 0 || self.max_samples == 0 {
            return Err(FlowError::InvalidArgument(
                "max_steps and max_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Termination mode of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunStatus {
    Completed,
    BlewUp { t: f64 },
    StepUnderflow { t: f64 },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

/// One recorded point of a trajectory: state, schedule value, and every
/// online accumulator evaluated at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub lambda: DVector<f64>,
    pub beta: f64,
    /// ∫ x ds from t₀ to t.
    pub x_integral: DVector<f64>,
    /// ∫ <(1/δ)(x − x*) + v, ε> ds; zero for unperturbed runs.
    pub eps_work: f64,
    /// ∫ ((1/δ)β − β')(Ax − b) ds.
    pub lemma1_integral: DVector<f64>,
    /// ∫ β ||Ax − b||² ds.
    pub beta_feas_sq_integral: f64,
    /// ∫ ||v||² ds.
    pub speed_sq_integral: f64,
    /// ∫ ((1/δ)β − β')(Lσ(x, λ*) − Lσ(x*, λ)) ds.
    pub scaled_gap_integral: f64,
}

impl Sample {
    /// Ergodic average x̄(t) = (∫ x ds)/(t − t₀); at the first sample the
    /// t → t₀ limit, i.e. x(t₀) itself.
    pub fn ergodic_x(&self, t0: f64) -> DVector<f64> {
        let span = self.t - t0;
        if span <= 0.0 {
            self.x.clone()
        } else {
            &self.x_integral / span
        }
    }
}

/// A completed (or aborted) trajectory with strictly increasing sample times,
/// the first at t₀. Immutable once returned and safe to share across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub samples: Vec<Sample>,
    pub status: RunStatus,
    pub t0: f64,
}

impl TrajectoryRecord {
    pub fn final_sample(&self) -> &Sample {
        self.samples.last().expect("trajectory has samples")
    }

    /// Ergodic average x̄(t) for t ∈ (t₀, T], interpolating the running
    /// integral linearly between samples. Usage error for t ≤ t₀ or past the
    /// last sample.
    pub fn ergodic_average(&self, t: f64) -> Result<DVector<f64>> {
        if t <= self.t0 {
            return Err(FlowError::InvalidArgument(format!(
                "ergodic average undefined at t = {t} <= t0 = {}",
                self.t0
            )));
        }
        let last = self.final_sample();
        if t > last.t * (1.0 + 1e-12) + 1e-12 {
            return Err(FlowError::InvalidArgument(format!(
                "t = {t} is past the last sample at {}",
                last.t
            )));
        }
        let t = t.min(last.t);
        let idx = self
            .samples
            .partition_point(|s| s.t <= t)
            .min(self.samples.len() - 1);
        if idx == 0 {
            return Ok(last.ergodic_x(self.t0));
        }
        let lo = &self.samples[idx - 1];
        let hi = &self.samples[idx];
        let w = if hi.t > lo.t {
            (t - lo.t) / (hi.t - lo.t)
        } else {
            0.0
        };
        let integral = &lo.x_integral + (&hi.x_integral - &lo.x_integral) * w;
        Ok(integral / (t - self.t0))
    }
}

/// Preallocated state triple.
#[derive(Clone)]
struct Y {
    x: DVector<f64>,
    v: DVector<f64>,
    l: DVector<f64>,
}

impl Y {
    fn zeros_like(n: usize, m: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            v: DVector::zeros(n),
            l: DVector::zeros(m),
        }
    }

    fn copy_from(&mut self, other: &Y) {
        self.x.copy_from(&other.x);
        self.v.copy_from(&other.v);
        self.l.copy_from(&other.l);
    }

    fn inf_norm(&self) -> f64 {
        self.x.amax().max(self.v.amax()).max(self.l.amax())
    }
}

/// Stage derivative storage.
#[derive(Clone)]
struct Stage {
    dx: DVector<f64>,
    dv: DVector<f64>,
    dl: DVector<f64>,
}

impl Stage {
    fn zeros_like(n: usize, m: usize) -> Self {
        Self {
            dx: DVector::zeros(n),
            dv: DVector::zeros(n),
            dl: DVector::zeros(m),
        }
    }
}

/// Integrand values feeding the trapezoidal accumulators at one time point.
struct IntegrandSlot {
    x: DVector<f64>,
    lemma1: DVector<f64>,
    work: f64,
    beta_feas_sq: f64,
    speed_sq: f64,
    scaled_gap: f64,
}

impl IntegrandSlot {
    fn zeros_like(n: usize, m: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            lemma1: DVector::zeros(m),
            work: 0.0,
            beta_feas_sq: 0.0,
            speed_sq: 0.0,
            scaled_gap: 0.0,
        }
    }
}

struct Accumulators {
    x_integral: DVector<f64>,
    eps_work: f64,
    lemma1_integral: DVector<f64>,
    beta_feas_sq_integral: f64,
    speed_sq_integral: f64,
    scaled_gap_integral: f64,
}

impl Accumulators {
    fn zeros(n: usize, m: usize) -> Self {
        Self {
            x_integral: DVector::zeros(n),
            eps_work: 0.0,
            lemma1_integral: DVector::zeros(m),
            beta_feas_sq_integral: 0.0,
            speed_sq_integral: 0.0,
            scaled_gap_integral: 0.0,
        }
    }

    fn advance(&mut self, h: f64, prev: &IntegrandSlot, next: &IntegrandSlot) {
        let w = 0.5 * h;
        self.x_integral.axpy(w, &prev.x, 1.0);
        self.x_integral.axpy(w, &next.x, 1.0);
        self.eps_work += w * (prev.work + next.work);
        self.lemma1_integral.axpy(w, &prev.lemma1, 1.0);
        self.lemma1_integral.axpy(w, &next.lemma1, 1.0);
        self.beta_feas_sq_integral += w * (prev.beta_feas_sq + next.beta_feas_sq);
        self.speed_sq_integral += w * (prev.speed_sq + next.speed_sq);
        self.scaled_gap_integral += w * (prev.scaled_gap + next.scaled_gap);
    }
}

/// Scratch and cached constants shared by the stepping loop. State triples
/// live outside as locals so stage evaluation can borrow them freely.
struct Engine<'a> {
    problem: &'a ConstrainedProblem,
    damping: &'a DampingParams,
    schedule: &'a ScalingSchedule,
    eps: &'a Perturbation,
    reference: &'a SaddlePoint,

    // Constants of the reference point.
    f_star: f64,
    residual_star: DVector<f64>,
    penalty_star: f64,

    // Scratch.
    force: DVector<f64>,
    residual: DVector<f64>,
    value_scratch: DVector<f64>,
    stages: Vec<Stage>,
    prev_slot: IntegrandSlot,
    next_slot: IntegrandSlot,
}

impl<'a> Engine<'a> {
    fn new(
        problem: &'a ConstrainedProblem,
        damping: &'a DampingParams,
        schedule: &'a ScalingSchedule,
        eps: &'a Perturbation,
        reference: &'a SaddlePoint,
    ) -> Result<Self> {
        let n = problem.dim_primal();
        let m = problem.dim_dual();
        let residual_star = problem.constraint_residual(&reference.primal_star)?;
        let f_star = problem.objective_value(&reference.primal_star)?;
        let penalty_star = 0.5 * damping.sigma * residual_star.norm_squared();
        Ok(Self {
            problem,
            damping,
            schedule,
            eps,
            reference,
            f_star,
            residual_star,
            penalty_star,
            force: DVector::zeros(n),
            residual: DVector::zeros(m),
            value_scratch: DVector::zeros(n),
            stages: vec![Stage::zeros_like(n, m); 7],
            prev_slot: IntegrandSlot::zeros_like(n, m),
            next_slot: IntegrandSlot::zeros_like(n, m),
        })
    }

    /// Writes the field at (t, y) into stage `idx` without allocating.
    fn eval_into(&mut self, t: f64, y: &Y, idx: usize) -> Result<()> {
        let beta = self.schedule.beta(t)?;
        if !beta.is_finite() {
            return Err(FlowError::NonFinite {
                term: "scaling beta(t)",
                t,
            });
        }
        let a = self.problem.constraint_matrix();

        // residual = Ax − b
        self.residual.copy_from(self.problem.constraint_rhs());
        self.residual.gemv(1.0, a, &y.x, -1.0);

        // force = ∇f(x) + Aᵀλ + σ Aᵀ(Ax − b)
        self.problem.gradient_into(&y.x, &mut self.force)?;
        if self.force.iter().any(|g| !g.is_finite()) {
            return Err(FlowError::NonFinite {
                term: "gradient oracle",
                t,
            });
        }
        self.force.gemv_tr(1.0, a, &y.l, 1.0);
        self.force
            .gemv_tr(self.damping.sigma, a, &self.residual, 1.0);

        let stage = &mut self.stages[idx];
        stage.dx.copy_from(&y.v);

        // dv = −γ v − β force [+ ε(t)]
        stage.dv.copy_from(&y.v);
        stage.dv *= -self.damping.gamma;
        stage.dv.axpy(-beta, &self.force, 1.0);
        if !self.eps.is_zero() {
            let (direction, magnitude) = self.eps.component(t);
            if !magnitude.is_finite() {
                return Err(FlowError::NonFinite {
                    term: "perturbation",
                    t,
                });
            }
            stage.dv[direction] += magnitude;
        }

        // dλ = β (residual + δ A v)
        stage.dl.copy_from(&self.residual);
        stage.dl.gemv(self.damping.delta, a, &y.v, 1.0);
        stage.dl *= beta;

        if stage.dv.iter().any(|e| !e.is_finite()) {
            return Err(FlowError::NonFinite {
                term: "primal acceleration",
                t,
            });
        }
        if stage.dl.iter().any(|e| !e.is_finite()) {
            return Err(FlowError::NonFinite {
                term: "dual velocity",
                t,
            });
        }
        Ok(())
    }

    /// out = base + h Σ cᵢ k_{idxᵢ}.
    fn combine(&self, out: &mut Y, base: &Y, h: f64, terms: &[(f64, usize)]) {
        out.copy_from(base);
        for &(c, idx) in terms {
            let k = &self.stages[idx];
            out.x.axpy(h * c, &k.dx, 1.0);
            out.v.axpy(h * c, &k.dv, 1.0);
            out.l.axpy(h * c, &k.dl, 1.0);
        }
    }

    /// Fills `next_slot` with the accumulator integrands at (t, y).
    fn integrands_into(&mut self, t: f64, y: &Y) -> Result<()> {
        let beta = self.schedule.beta(t)?;
        let beta_dot = self.schedule.beta_dot(t)?;
        let factor = beta / self.damping.delta - beta_dot;
        let a = self.problem.constraint_matrix();

        self.residual.copy_from(self.problem.constraint_rhs());
        self.residual.gemv(1.0, a, &y.x, -1.0);

        let slot = &mut self.next_slot;
        slot.x.copy_from(&y.x);
        slot.lemma1.copy_from(&self.residual);
        slot.lemma1 *= factor;
        slot.beta_feas_sq = beta * self.residual.norm_squared();
        slot.speed_sq = y.v.norm_squared();

        slot.work = if self.eps.is_zero() {
            0.0
        } else {
            let (direction, magnitude) = self.eps.component(t);
            ((y.x[direction] - self.reference.primal_star[direction]) / self.damping.delta
                + y.v[direction])
                * magnitude
        };

        // Lσ(x, λ*) − Lσ(x*, λ) expanded around the cached reference terms.
        let f_x = self
            .problem
            .objective_value_scratch(&y.x, &mut self.value_scratch);
        let gap = f_x
            + self.reference.dual_star.dot(&self.residual)
            + 0.5 * self.damping.sigma * self.residual.norm_squared()
            - self.f_star
            - y.l.dot(&self.residual_star)
            - self.penalty_star;
        slot.scaled_gap = factor * gap;
        Ok(())
    }

    fn promote_slot(&mut self) {
        std::mem::swap(&mut self.prev_slot, &mut self.next_slot);
    }

    fn sample(&self, t: f64, y: &Y, acc: &Accumulators) -> Result<Sample> {
        Ok(Sample {
            t,
            x: y.x.clone(),
            v: y.v.clone(),
            lambda: y.l.clone(),
            beta: self.schedule.beta(t)?,
            x_integral: acc.x_integral.clone(),
            eps_work: acc.eps_work,
            lemma1_integral: acc.lemma1_integral.clone(),
            beta_feas_sq_integral: acc.beta_feas_sq_integral,
            speed_sq_integral: acc.speed_sq_integral,
            scaled_gap_integral: acc.scaled_gap_integral,
        })
    }
}

/// Simulates the flow from `init` to `cfg.t_end`.
///
/// Blow-up (state inf-norm past the threshold, or a non-finite field value)
/// and adaptive step underflow terminate the run early with the matching
/// [`RunStatus`]; genuine usage errors (dimension mismatches, invalid
/// configuration, an invalid reference point, exhausted step or sample
/// budgets) are returned as `Err`.
pub fn integrate_flow(
    problem: &ConstrainedProblem,
    damping: &DampingParams,
    schedule: &ScalingSchedule,
    eps: &Perturbation,
    init: &FlowState,
    cfg: &IntegratorConfig,
    reference: &SaddlePoint,
) -> Result<TrajectoryRecord> {
    cfg.validate(init.t)?;
    if init.t < schedule.t0() {
        return Err(FlowError::InvalidArgument(format!(
            "initial time {} precedes the schedule origin {}",
            init.t,
            schedule.t0()
        )));
    }
    let n = problem.dim_primal();
    let m = problem.dim_dual();
    if init.x.len() != n || init.v.len() != n || init.lambda.len() != m {
        return Err(FlowError::Dimension {
            what: "initial state",
            expected: n + n + m,
            found: init.x.len() + init.v.len() + init.lambda.len(),
        });
    }
    if eps.dim() != n {
        return Err(FlowError::Dimension {
            what: "perturbation",
            expected: n,
            found: eps.dim(),
        });
    }
    reference.validate(problem, TOL_KKT)?;

    let mut engine = Engine::new(problem, damping, schedule, eps, reference)?;

    let t0 = init.t;
    let mut t = t0;
    let mut y = Y {
        x: init.x.clone(),
        v: init.v.clone(),
        l: init.lambda.clone(),
    };
    let mut y_stage = Y::zeros_like(n, m);
    let mut y_new = Y::zeros_like(n, m);
    let mut acc = Accumulators::zeros(n, m);
    let mut samples = Vec::new();
    samples.push(engine.sample(t, &y, &acc)?);
    engine.integrands_into(t, &y)?;
    engine.promote_slot();
    let mut accepted: usize = 0;
    let mut recorded_last = true;
    let mut status = RunStatus::Completed;

    let record = |samples: &mut Vec<Sample>,
                  engine: &Engine,
                  t: f64,
                  y: &Y,
                  acc: &Accumulators|
     -> Result<()> {
        if samples.len() >= cfg.max_samples {
            return Err(FlowError::Aborted(format!(
                "sample budget of {} exhausted at t = {t}; raise sample_stride",
                cfg.max_samples
            )));
        }
        samples.push(engine.sample(t, y, acc)?);
        Ok(())
    };

    match cfg.method {
        IntegrationMethod::Rk4Fixed => {
            let h = cfg.step;
            let span = cfg.t_end - t0;
            let total_steps = (span / h).ceil().max(1.0) as u64;
            if total_steps > cfg.max_steps as u64 {
                return Err(FlowError::Aborted(format!(
                    "fixed-step run needs {total_steps} steps, over the budget of {}",
                    cfg.max_steps
                )));
            }
            for i in 0..total_steps {
                let t_next = if i + 1 == total_steps {
                    cfg.t_end
                } else {
                    t0 + h * (i + 1) as f64
                };
                let h_eff = t_next - t;
                if h_eff <= f64::EPSILON * span {
                    break;
                }
                match rk4_step(&mut engine, t, &y, h_eff, &mut y_stage, &mut y_new) {
                    Ok(()) => {}
                    Err(FlowError::NonFinite { t, .. }) => {
                        status = RunStatus::BlewUp { t };
                        break;
                    }
                    Err(e) => return Err(e),
                }
                std::mem::swap(&mut y, &mut y_new);
                t = t_next;
                engine.integrands_into(t, &y)?;
                acc.advance(h_eff, &engine.prev_slot, &engine.next_slot);
                engine.promote_slot();
                accepted += 1;
                recorded_last = accepted.is_multiple_of(cfg.sample_stride);
                if recorded_last {
                    record(&mut samples, &engine, t, &y, &acc)?;
                }
                if y.inf_norm() > cfg.blow_up_threshold {
                    status = RunStatus::BlewUp { t };
                    if !recorded_last {
                        record(&mut samples, &engine, t, &y, &acc)?;
                        recorded_last = true;
                    }
                    break;
                }
            }
        }
        IntegrationMethod::AdaptiveEmbedded => {
            let mut h = cfg.step.min(cfg.max_step).min(cfg.t_end - t0);
            let mut fac_old: f64 = 1e-4;
            let mut attempts: usize = 0;
            let mut rejected_last = false;
            // FSAL: stage 0 holds the derivative at the current state.
            match engine.eval_into(t, &y, 0) {
                Ok(()) => {}
                Err(FlowError::NonFinite { t, .. }) => {
                    return Ok(TrajectoryRecord {
                        samples,
                        status: RunStatus::BlewUp { t },
                        t0,
                    })
                }
                Err(e) => return Err(e),
            }
            loop {
                if t >= cfg.t_end - f64::EPSILON * (cfg.t_end - t0).max(1.0) {
                    break;
                }
                h = h.min(cfg.max_step).min(cfg.t_end - t);
                if h < cfg.h_min {
                    status = RunStatus::StepUnderflow { t };
                    break;
                }
                attempts += 1;
                if attempts > cfg.max_steps {
                    return Err(FlowError::Aborted(format!(
                        "adaptive run exceeded the step budget of {} at t = {t}",
                        cfg.max_steps
                    )));
                }
                let err = match dopri5_attempt(
                    &mut engine,
                    t,
                    &y,
                    h,
                    cfg.abs_tol,
                    cfg.rel_tol,
                    &mut y_stage,
                    &mut y_new,
                ) {
                    Ok(err) => err,
                    Err(FlowError::NonFinite { t, .. }) => {
                        status = RunStatus::BlewUp { t };
                        break;
                    }
                    Err(e) => return Err(e),
                };

                let err_floor = err.max(1e-16);
                let fac11 = err_floor.powf(0.17);

                if err <= 1.0 {
                    let mut fac = fac11 / fac_old.powf(0.04);
                    fac = (fac / 0.9).clamp(0.2, 5.0);
                    if rejected_last {
                        // No growth straight after a rejection; prevents
                        // accept/reject thrash on stability-limited spans.
                        fac = fac.max(1.0);
                    }
                    rejected_last = false;
                    let t_next = t + h;
                    std::mem::swap(&mut y, &mut y_new);
                    // FSAL: stage 6 was evaluated at (t + h, y_new).
                    engine.stages.swap(0, 6);
                    engine.integrands_into(t_next, &y)?;
                    acc.advance(h, &engine.prev_slot, &engine.next_slot);
                    engine.promote_slot();
                    fac_old = err_floor.max(1e-4);
                    t = t_next;
                    accepted += 1;
                    recorded_last = accepted.is_multiple_of(cfg.sample_stride);
                    if recorded_last {
                        record(&mut samples, &engine, t, &y, &acc)?;
                    }
                    if y.inf_norm() > cfg.blow_up_threshold {
                        status = RunStatus::BlewUp { t };
                        if !recorded_last {
                            record(&mut samples, &engine, t, &y, &acc)?;
                            recorded_last = true;
                        }
                        break;
                    }
                    h /= fac;
                } else {
                    rejected_last = true;
                    h /= (fac11 / 0.9).clamp(1.0, 10.0);
                }
            }
        }
    }

    if !recorded_last {
        record(&mut samples, &engine, t, &y, &acc)?;
    }

    Ok(TrajectoryRecord {
        samples,
        status,
        t0,
    })
}

/// Classic RK4 step; on success `y_new` holds the next state.
fn rk4_step(
    engine: &mut Engine,
    t: f64,
    y: &Y,
    h: f64,
    y_stage: &mut Y,
    y_new: &mut Y,
) -> Result<()> {
    engine.eval_into(t, y, 0)?;
    engine.combine(y_stage, y, h, &[(0.5, 0)]);
    engine.eval_into(t + 0.5 * h, y_stage, 1)?;
    engine.combine(y_stage, y, h, &[(0.5, 1)]);
    engine.eval_into(t + 0.5 * h, y_stage, 2)?;
    engine.combine(y_stage, y, h, &[(1.0, 2)]);
    engine.eval_into(t + h, y_stage, 3)?;
    engine.combine(
        y_new,
        y,
        h,
        &[
            (1.0 / 6.0, 0),
            (1.0 / 3.0, 1),
            (1.0 / 3.0, 2),
            (1.0 / 6.0, 3),
        ],
    );
    Ok(())
}

/// One Dormand–Prince 5(4) attempt from (t, y) with step h, assuming stage 0
/// holds the FSAL derivative at (t, y). On success `y_new` holds the
/// candidate state, stage 6 its derivative, and the scaled RMS error is
/// returned (accept when ≤ 1).
#[allow(clippy::too_many_arguments)]
fn dopri5_attempt(
    engine: &mut Engine,
    t: f64,
    y: &Y,
    h: f64,
    abs_tol: f64,
    rel_tol: f64,
    y_stage: &mut Y,
    y_new: &mut Y,
) -> Result<f64> {
    engine.combine(y_stage, y, h, &[(0.2, 0)]);
    engine.eval_into(t + 0.2 * h, y_stage, 1)?;

    engine.combine(y_stage, y, h, &[(3.0 / 40.0, 0), (9.0 / 40.0, 1)]);
    engine.eval_into(t + 0.3 * h, y_stage, 2)?;

    engine.combine(
        y_stage,
        y,
        h,
        &[(44.0 / 45.0, 0), (-56.0 / 15.0, 1), (32.0 / 9.0, 2)],
    );
    engine.eval_into(t + 0.8 * h, y_stage, 3)?;

    engine.combine(
        y_stage,
        y,
        h,
        &[
            (19372.0 / 6561.0, 0),
            (-25360.0 / 2187.0, 1),
            (64448.0 / 6561.0, 2),
            (-212.0 / 729.0, 3),
        ],
    );
    engine.eval_into(t + 8.0 / 9.0 * h, y_stage, 4)?;

    engine.combine(
        y_stage,
        y,
        h,
        &[
            (9017.0 / 3168.0, 0),
            (-355.0 / 33.0, 1),
            (46732.0 / 5247.0, 2),
            (49.0 / 176.0, 3),
            (-5103.0 / 18656.0, 4),
        ],
    );
    engine.eval_into(t + h, y_stage, 5)?;

    engine.combine(
        y_new,
        y,
        h,
        &[
            (35.0 / 384.0, 0),
            (500.0 / 1113.0, 2),
            (125.0 / 192.0, 3),
            (-2187.0 / 6784.0, 4),
            (11.0 / 84.0, 5),
        ],
    );
    engine.eval_into(t + h, y_new, 6)?;

    // Difference between the 5th- and embedded 4th-order solutions.
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    let mut err_acc = 0.0;
    let mut count = 0usize;
    {
        let stages = &engine.stages;
        let mut add =
            |old: &DVector<f64>, new: &DVector<f64>, pick: fn(&Stage) -> &DVector<f64>| {
                for i in 0..old.len() {
                    let mut e = 0.0;
                    for (coef, k) in E.iter().zip(stages.iter()) {
                        e += coef * pick(k)[i];
                    }
                    e *= h;
                    let sc = abs_tol + rel_tol * old[i].abs().max(new[i].abs());
                    err_acc += (e / sc) * (e / sc);
                    count += 1;
                }
            };
        add(&y.x, &y_new.x, |k| &k.dx);
        add(&y.v, &y_new.v, |k| &k.dv);
        add(&y.l, &y_new.l, |k| &k.dl);
    }
    Ok((err_acc / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{quad1d, random_quad};
    use approx::assert_relative_eq;

    fn setup_quad1d() -> (
        ConstrainedProblem,
        DampingParams,
        ScalingSchedule,
        Perturbation,
        SaddlePoint,
    ) {
        let p = quad1d(1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let eps = Perturbation::zero(1);
        let saddle = p.solve_saddle().unwrap();
        (p, d, s, eps, saddle)
    }

    #[test]
    fn equilibrium_start_stays_at_equilibrium() {
        let p = random_quad(5, 2, 5, 1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let eps = Perturbation::zero(5);
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::new(
            saddle.primal_star.clone(),
            DVector::zeros(5),
            saddle.dual_star.clone(),
            0.0,
        )
        .unwrap();
        let cfg = IntegratorConfig::rk4(1e-2, 20.0).with_stride(100);
        let tr = integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle).unwrap();
        assert!(tr.status.is_completed());
        for sample in &tr.samples {
            assert!((&sample.x - &saddle.primal_star).amax() <= 1e-8);
            assert!(sample.v.amax() <= 1e-8);
            assert!((&sample.lambda - &saddle.dual_star).amax() <= 1e-8);
        }
        let last = tr.final_sample();
        assert!(last.eps_work.abs() <= 1e-10);
        assert!(last.lemma1_integral.amax() <= 1e-8);
        assert!(last.beta_feas_sq_integral.abs() <= 1e-8);
        assert!(last.speed_sq_integral.abs() <= 1e-8);
    }

    #[test]
    fn quad1d_converges_and_methods_agree() {
        let (p, d, s, eps, saddle) = setup_quad1d();
        let init = FlowState::zero(1, 1, 0.0);

        let rk4 = integrate_flow(
            &p,
            &d,
            &s,
            &eps,
            &init,
            &IntegratorConfig::rk4(1e-3, 50.0).with_stride(100),
            &saddle,
        )
        .unwrap();
        assert!(rk4.status.is_completed());
        let last = rk4.final_sample();
        let (stat, feas) = p.kkt_residual(&last.x, &last.lambda).unwrap();
        assert!(stat <= 1e-3, "stationarity {stat:.3e}");
        assert!(feas <= 1e-3, "feasibility {feas:.3e}");

        let adaptive = integrate_flow(
            &p,
            &d,
            &s,
            &eps,
            &init,
            &IntegratorConfig::adaptive(1e-3, 1e-10, 1e-10, 50.0),
            &saddle,
        )
        .unwrap();
        assert!(adaptive.status.is_completed());
        let a_last = adaptive.final_sample();
        assert!((&last.x - &a_last.x).amax() <= 1e-6);
        assert!((&last.v - &a_last.v).amax() <= 1e-6);
        assert!((&last.lambda - &a_last.lambda).amax() <= 1e-6);
    }

    #[test]
    fn rk4_shows_fourth_order_self_convergence() {
        let (p, d, s, eps, saddle) = setup_quad1d();
        let init = FlowState::new(
            DVector::from_element(1, 3.0),
            DVector::zeros(1),
            DVector::zeros(1),
            0.0,
        )
        .unwrap();
        let t_end = 5.0;
        let endpoint = |h: f64| {
            let tr = integrate_flow(
                &p,
                &d,
                &s,
                &eps,
                &init,
                &IntegratorConfig::rk4(h, t_end).with_stride(usize::MAX),
                &saddle,
            )
            .unwrap();
            let s = tr.final_sample();
            (s.x[0], s.v[0], s.lambda[0])
        };
        let reference = endpoint(1e-5);
        let err = |h: f64| {
            let e = endpoint(h);
            ((e.0 - reference.0).powi(2)
                + (e.1 - reference.1).powi(2)
                + (e.2 - reference.2).powi(2))
            .sqrt()
        };
        let e1 = err(4e-2);
        let e2 = err(2e-2);
        let e3 = err(1e-2);
        let order1 = (e1 / e2).log2();
        let order2 = (e2 / e3).log2();
        for order in [order1, order2] {
            assert!(
                (3.5..=4.5).contains(&order),
                "observed order {order}: errors {e1:.3e}, {e2:.3e}, {e3:.3e}"
            );
        }
    }

    #[test]
    fn ergodic_average_of_constant_trajectory() {
        let p = random_quad(3, 1, 8, 1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::new(
            saddle.primal_star.clone(),
            DVector::zeros(3),
            saddle.dual_star.clone(),
            0.0,
        )
        .unwrap();
        let tr = integrate_flow(
            &p,
            &d,
            &s,
            &Perturbation::zero(3),
            &init,
            &IntegratorConfig::rk4(1e-2, 5.0),
            &saddle,
        )
        .unwrap();
        for t in [0.5, 2.0, 5.0] {
            let avg = tr.ergodic_average(t).unwrap();
            assert!((avg - &saddle.primal_star).amax() <= 1e-7);
        }
        assert!(tr.ergodic_average(0.0).is_err());
        assert!(tr.ergodic_average(-1.0).is_err());
    }

    #[test]
    fn ergodic_average_of_synthetic_ramp() {
        // Injected samples with x(s) = s on [0, 2]: x̄(2) = 1.
        let times: Vec<f64> = (0..=200).map(|i| i as f64 * 0.01).collect();
        let mut samples = Vec::new();
        let mut integral = 0.0;
        let mut prev_t = 0.0;
        for &t in &times {
            integral += 0.5 * (t - prev_t) * (t + prev_t);
            prev_t = t;
            samples.push(Sample {
                t,
                x: DVector::from_element(1, t),
                v: DVector::zeros(1),
                lambda: DVector::zeros(1),
                beta: 1.0,
                x_integral: DVector::from_element(1, integral),
                eps_work: 0.0,
                lemma1_integral: DVector::zeros(1),
                beta_feas_sq_integral: 0.0,
                speed_sq_integral: 0.0,
                scaled_gap_integral: 0.0,
            });
        }
        let tr = TrajectoryRecord {
            samples,
            status: RunStatus::Completed,
            t0: 0.0,
        };
        let avg = tr.ergodic_average(2.0).unwrap();
        assert_relative_eq!(avg[0], 1.0, max_relative = 1e-12);
        // Off-sample query: linear interpolation of the running integral
        // between the bracketing samples at t = 1.00 and t = 1.01.
        let avg = tr.ergodic_average(1.005).unwrap();
        let lerped = (0.5 + 0.5 * (0.51005 - 0.5)) / 1.005;
        assert_relative_eq!(avg[0], lerped, max_relative = 1e-9);
    }

    #[test]
    fn rk4_is_bitwise_deterministic() {
        let p = random_quad(4, 2, 13, 1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::zero(4, 2, 0.0);
        let cfg = IntegratorConfig::rk4(1e-3, 3.0).with_stride(10);
        let run =
            || integrate_flow(&p, &d, &s, &Perturbation::zero(4), &init, &cfg, &saddle).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.samples.len(), b.samples.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert!(sa == sb, "samples differ at t = {}", sa.t);
        }
    }

    #[test]
    fn online_accumulators_match_offline_recomputation() {
        let p = random_quad(4, 2, 17, 1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::zero(4, 2, 0.0);
        let cfg = IntegratorConfig::rk4(1e-4, 2.0).with_stride(10);
        let tr = integrate_flow(&p, &d, &s, &Perturbation::zero(4), &init, &cfg, &saddle).unwrap();

        // Offline trapezoid over the recorded (sparser) samples.
        let mut x_int = DVector::zeros(4);
        let mut lemma1 = DVector::zeros(2);
        let mut prev: Option<&Sample> = None;
        for sample in &tr.samples {
            if let Some(prior) = prev {
                let h = sample.t - prior.t;
                x_int += 0.5 * h * (&prior.x + &sample.x);
                let rp = p.constraint_residual(&prior.x).unwrap();
                let rn = p.constraint_residual(&sample.x).unwrap();
                let fp = prior.beta / d.delta - s.beta_dot(prior.t).unwrap();
                let fn_ = sample.beta / d.delta - s.beta_dot(sample.t).unwrap();
                lemma1 += 0.5 * h * (rp * fp + rn * fn_);
            }
            prev = Some(sample);
        }
        let last = tr.final_sample();
        let scale = last.x_integral.amax().max(1e-9);
        assert!(
            (&last.x_integral - &x_int).amax() / scale <= 1e-6,
            "ergodic integral mismatch"
        );
        let scale = last.lemma1_integral.amax().max(1e-9);
        assert!(
            (&last.lemma1_integral - &lemma1).amax() / scale <= 1e-6,
            "lemma1 integral mismatch"
        );
    }

    #[test]
    fn unstable_step_reports_blow_up() {
        let (p, d, _s, eps, saddle) = setup_quad1d();
        // β = 1e4 with h = 0.5 puts RK4 far outside its stability region.
        let s = ScalingSchedule::constant(1e4, 0.0).unwrap();
        let init = FlowState::new(
            DVector::from_element(1, 2.0),
            DVector::zeros(1),
            DVector::zeros(1),
            0.0,
        )
        .unwrap();
        let cfg = IntegratorConfig::rk4(0.5, 100.0);
        let tr = integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle).unwrap();
        assert!(matches!(tr.status, RunStatus::BlewUp { .. }));
    }

    #[test]
    fn impossible_tolerance_reports_step_underflow() {
        let (p, d, s, eps, saddle) = setup_quad1d();
        let init = FlowState::new(
            DVector::from_element(1, 2.0),
            DVector::zeros(1),
            DVector::zeros(1),
            0.0,
        )
        .unwrap();
        let mut cfg = IntegratorConfig::adaptive(1e-3, 1e-300, 1e-300, 10.0);
        cfg.h_min = 1e-10;
        let tr = integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle).unwrap();
        assert!(matches!(tr.status, RunStatus::StepUnderflow { .. }));
    }

    #[test]
    fn sample_budget_aborts_with_helpful_error() {
        let (p, d, s, eps, saddle) = setup_quad1d();
        let init = FlowState::zero(1, 1, 0.0);
        let mut cfg = IntegratorConfig::rk4(1e-3, 10.0);
        cfg.max_samples = 100;
        match integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle) {
            Err(FlowError::Aborted(msg)) => assert!(msg.contains("sample_stride")),
            other => panic!("expected Aborted, got {other:?}"),
        }
    }

    #[test]
    fn step_budget_aborts_fixed_runs_upfront() {
        let (p, d, s, eps, saddle) = setup_quad1d();
        let init = FlowState::zero(1, 1, 0.0);
        let mut cfg = IntegratorConfig::rk4(1e-6, 10.0);
        cfg.max_steps = 1000;
        assert!(matches!(
            integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle),
            Err(FlowError::Aborted(_))
        ));
    }

    #[test]
    fn sample_times_strictly_increase_and_start_at_t0() {
        let (p, d, s, eps, saddle) = setup_quad1d();
        let init = FlowState::zero(1, 1, 0.0);
        for cfg in [
            IntegratorConfig::rk4(1e-2, 3.0).with_stride(7),
            IntegratorConfig::adaptive(1e-3, 1e-8, 1e-8, 3.0).with_stride(3),
        ] {
            let tr = integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle).unwrap();
            assert_eq!(tr.samples[0].t, 0.0);
            for pair in tr.samples.windows(2) {
                assert!(pair[1].t > pair[0].t);
            }
            let last = tr.final_sample();
            assert!((last.t - 3.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (p, d, s, eps, saddle) = setup_quad1d();
        let init = FlowState::zero(1, 1, 0.0);
        let mut cfg = IntegratorConfig::rk4(0.0, 1.0);
        assert!(integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle).is_err());
        cfg = IntegratorConfig::rk4(1e-2, -1.0);
        assert!(integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle).is_err());
        cfg = IntegratorConfig::rk4(1e-2, 1.0).with_stride(0);
        assert!(integrate_flow(&p, &d, &s, &eps, &init, &cfg, &saddle).is_err());
    }
}
