//! Lyapunov energies, convergence metrics and rate estimation.
//!
//! The central object is the energy
//!
//! ```text
//!     E(t)  = E₀(t) + E₁(t)
//!     E₀(t) = β(t) (Lσ(x, λ*) − Lσ(x*, λ*))
//!     E₁(t) = ½ ||(1/δ)(x − x*) + v||²
//!           + (δγ − 1)/(2δ²) ||x − x*||²
//!           + 1/(2δ) ||λ − λ*||²,
//! ```
//!
//! nonincreasing along trajectories whenever the scaling condition holds,
//! with each summand nonnegative for γδ > 1. Perturbed runs use
//! Eᵋ(t) = E(t) − ∫ <(1/δ)(x − x*) + v, ε(s)> ds, which stays nonincreasing
//! (though possibly negative) for integrable ε. The remaining diagnostics
//! operationalize the ergodic O(1/t), O(1/β(t)) and exponential rate claims
//! plus the partial-integration identity
//!
//! ```text
//!     β(t)(Ax(t) − b) + ∫ ((1/δ)β − β')(Ax − b) ds
//!         = (λ(t) − λ(t₀))/δ + β(t₀)(Ax(t₀) − b).
//! ```

use serde::{Deserialize, Serialize};

use crate::dynamics::{perturbation_l1_norm, FlowState, Perturbation};
use crate::error::{FlowError, Result};
use crate::integrate::TrajectoryRecord;
use crate::problem::{ConstrainedProblem, SaddlePoint};
use crate::scaling::{DampingParams, ScalingSchedule};

/// Gaps at or below this floor are treated as numerically zero when fitting
/// rates on a log scale.
pub const Y_FLOOR: f64 = 1e-14;

/// Energy decomposition at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub t: f64,
    pub e0: f64,
    pub e1: f64,
    pub e_total: f64,
    /// e_total minus the accumulated perturbation work; equals e_total for
    /// unperturbed runs.
    pub e_perturbed: f64,
}

/// Evaluates the energy at one state. `eps_work_at_t` is the accumulated
/// perturbation work ∫ <(1/δ)(x − x*) + v, ε> ds (zero when unperturbed).
pub fn energy(
    problem: &ConstrainedProblem,
    damping: &DampingParams,
    schedule: &ScalingSchedule,
    state: &FlowState,
    reference: &SaddlePoint,
    eps_work_at_t: f64,
) -> Result<EnergyReport> {
    let beta = schedule.beta(state.t)?;
    energy_with_beta(problem, damping, beta, state, reference, eps_work_at_t)
}

fn energy_with_beta(
    problem: &ConstrainedProblem,
    damping: &DampingParams,
    beta: f64,
    state: &FlowState,
    reference: &SaddlePoint,
    eps_work_at_t: f64,
) -> Result<EnergyReport> {
    let delta = damping.delta;
    let gamma = damping.gamma;
    let gap = problem.aug_lagrangian(&state.x, &reference.dual_star)?
        - problem.aug_lagrangian(&reference.primal_star, &reference.dual_star)?;
    let e0 = beta * gap;

    let dx = &state.x - &reference.primal_star;
    let mixed = &dx / delta + &state.v;
    let e1 = 0.5 * mixed.norm_squared()
        + (delta * gamma - 1.0) / (2.0 * delta * delta) * dx.norm_squared()
        + (&state.lambda - &reference.dual_star).norm_squared() / (2.0 * delta);

    let e_total = e0 + e1;
    Ok(EnergyReport {
        t: state.t,
        e0,
        e1,
        e_total,
        e_perturbed: e_total - eps_work_at_t,
    })
}

/// Energy report for every sample of a trajectory, using the β values and
/// perturbation-work accumulator recorded during integration.
pub fn energy_series(
    problem: &ConstrainedProblem,
    damping: &DampingParams,
    trajectory: &TrajectoryRecord,
    reference: &SaddlePoint,
) -> Result<Vec<EnergyReport>> {
    trajectory
        .samples
        .iter()
        .map(|s| {
            let state = FlowState {
                x: s.x.clone(),
                v: s.v.clone(),
                lambda: s.lambda.clone(),
                t: s.t,
            };
            energy_with_beta(problem, damping, s.beta, &state, reference, s.eps_work)
        })
        .collect()
}

/// Outcome of [`energy_monotonicity_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Largest increase between consecutive samples (negative if strictly
    /// decreasing throughout).
    pub max_increase: f64,
    pub pass: bool,
}

/// Checks that the energy is nonincreasing across consecutive samples.
/// Passes when max_increase ≤ tol_slope · (1 + |E(t₀)|). Unperturbed runs
/// should check `e_total` (`use_perturbed = false`), perturbed runs the
/// compensated `e_perturbed`.
pub fn energy_monotonicity_check(
    series: &[EnergyReport],
    tol_slope: f64,
    use_perturbed: bool,
) -> Result<MonotonicityReport> {
    if series.len() < 2 {
        return Err(FlowError::InvalidArgument(
            "monotonicity check needs at least two samples".into(),
        ));
    }
    let value = |r: &EnergyReport| {
        if use_perturbed {
            r.e_perturbed
        } else {
            r.e_total
        }
    };
    let mut max_increase = f64::NEG_INFINITY;
    for pair in series.windows(2) {
        max_increase = max_increase.max(value(&pair[1]) - value(&pair[0]));
    }
    let budget = tol_slope * (1.0 + value(&series[0]).abs());
    Ok(MonotonicityReport {
        max_increase,
        pass: max_increase <= budget,
    })
}

/// Outcome of [`gronwall_bound_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    /// sup over samples of ||(1/δ)(x − x*) + v||.
    pub lhs_max: f64,
    /// √(2|Eᵋ(t₀)|) + ∫ ||ε(s)|| ds over the run horizon.
    pub rhs: f64,
    pub pass: bool,
}

/// Verifies the integral bound
/// sup ||(1/δ)(x − x*) + v|| ≤ √(2|Eᵋ(t₀)|) + ∫ ||ε|| ds + tol
/// along a trajectory with an integrable perturbation.
pub fn gronwall_bound_check(
    problem: &ConstrainedProblem,
    damping: &DampingParams,
    trajectory: &TrajectoryRecord,
    reference: &SaddlePoint,
    eps: &Perturbation,
    tol: f64,
) -> Result<GronwallReport> {
    if !eps.claims_integrable() {
        return Err(FlowError::InvalidArgument(
            "gronwall bound requires a perturbation with integrable norm".into(),
        ));
    }
    let first = trajectory
        .samples
        .first()
        .ok_or_else(|| FlowError::InvalidArgument("empty trajectory".into()))?;
    let initial = FlowState {
        x: first.x.clone(),
        v: first.v.clone(),
        lambda: first.lambda.clone(),
        t: first.t,
    };
    let e_eps_t0 = energy_with_beta(
        problem,
        damping,
        first.beta,
        &initial,
        reference,
        first.eps_work,
    )?
    .e_perturbed;

    let mut lhs_max = 0.0f64;
    for sample in &trajectory.samples {
        let mixed = (&sample.x - &reference.primal_star) / damping.delta + &sample.v;
        lhs_max = lhs_max.max(mixed.norm());
    }
    let t_end = trajectory.final_sample().t;
    let l1 = perturbation_l1_norm(eps, trajectory.t0, t_end)?;
    let rhs = (2.0 * e_eps_t0.abs()).sqrt() + l1;
    Ok(GronwallReport {
        lhs_max,
        rhs,
        pass: lhs_max <= rhs + tol,
    })
}

/// Per-sample convergence metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: f64,
    /// L(x, λ*) − L(x*, λ) ≥ 0 by the saddle inequality.
    pub lagrangian_gap: f64,
    /// ||Ax − b||.
    pub feasibility: f64,
    pub objective_gap_abs: f64,
    pub ergodic_objective_gap_abs: f64,
    pub ergodic_feasibility: f64,
    /// Norm of β(t)(Ax(t) − b) + ∫ ((1/δ)β − β')(Ax − b) ds, bounded along
    /// valid runs by the partial-integration identity.
    pub lemma1_quantity: f64,
}

/// Computes one [`MetricsRow`] per recorded sample. The ergodic columns of
/// the first sample use the t → t₀ limit, i.e. the pointwise values.
pub fn metrics(
    problem: &ConstrainedProblem,
    trajectory: &TrajectoryRecord,
    reference: &SaddlePoint,
) -> Result<Vec<MetricsRow>> {
    let f_star = problem.objective_value(&reference.primal_star)?;
    trajectory
        .samples
        .iter()
        .map(|s| {
            let lagrangian_gap = problem.lagrangian(&s.x, &reference.dual_star)?
                - problem.lagrangian(&reference.primal_star, &s.lambda)?;
            let residual = problem.constraint_residual(&s.x)?;
            let ergodic = s.ergodic_x(trajectory.t0);
            let lemma1 = (&residual * s.beta + &s.lemma1_integral).norm();
            Ok(MetricsRow {
                t: s.t,
                lagrangian_gap,
                feasibility: residual.norm(),
                objective_gap_abs: (problem.objective_value(&s.x)? - f_star).abs(),
                ergodic_objective_gap_abs: (problem.objective_value(&ergodic)? - f_star).abs(),
                ergodic_feasibility: problem.constraint_residual(&ergodic)?.norm(),
                lemma1_quantity: lemma1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// y ≈ C t^{−q}; `exponent` is q.
    Power,
    /// y ≈ C e^{−ρt}; `exponent` is ρ.
    Exponential,
}

/// Least-squares rate estimate on a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub model: RateModel,
    pub exponent: f64,
    pub r_squared: f64,
    /// Span of the points actually used.
    pub window: (f64, f64),
}

/// Fits log y against log t (power) or against t (exponential) over
/// `window`, excluding rows with y ≤ [`Y_FLOOR`]. Requires at least 10
/// usable points.
pub fn fit_rate(series: &[(f64, f64)], model: RateModel, window: (f64, f64)) -> Result<RateFit> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(FlowError::InvalidArgument(format!(
            "fit window must satisfy t_lo < t_hi, got [{lo}, {hi}]"
        )));
    }
    let points: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, y)| *t >= lo && *t <= hi && *y > Y_FLOOR)
        .map(|&(t, y)| {
            let abscissa = match model {
                RateModel::Power => t.ln(),
                RateModel::Exponential => t,
            };
            (abscissa, y.ln())
        })
        .collect();
    if points.len() < 10 {
        return Err(FlowError::DegenerateFit(format!(
            "only {} usable points in window [{lo}, {hi}]",
            points.len()
        )));
    }
    if model == RateModel::Power && lo <= 0.0 {
        return Err(FlowError::InvalidArgument(
            "power-law fit needs a strictly positive window".into(),
        ));
    }

    let n = points.len() as f64;
    let mean_a = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut saa = 0.0;
    let mut say = 0.0;
    let mut syy = 0.0;
    for (a, y) in &points {
        saa += (a - mean_a) * (a - mean_a);
        say += (a - mean_a) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if saa <= 0.0 {
        return Err(FlowError::DegenerateFit(
            "zero spread in the fit abscissa".into(),
        ));
    }
    let slope = say / saa;
    let ss_res = syy - slope * say;
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let t_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let t_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let window = match model {
        RateModel::Power => (t_min.exp(), t_max.exp()),
        RateModel::Exponential => (t_min, t_max),
    };
    Ok(RateFit {
        model,
        exponent: -slope,
        r_squared,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Perturbation;
    use crate::integrate::{integrate_flow, IntegratorConfig};
    use crate::problem::{quad1d, random_quad, ConstrainedProblem};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn energy_vanishes_at_the_saddle_point() {
        let p = random_quad(5, 2, 3, 1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let state = FlowState::new(
            saddle.primal_star.clone(),
            DVector::zeros(5),
            saddle.dual_star.clone(),
            0.0,
        )
        .unwrap();
        let report = energy(&p, &d, &s, &state, &saddle, 0.0).unwrap();
        assert!(report.e0.abs() <= 1e-12);
        assert!(report.e1.abs() <= 1e-12);
        assert!(report.e_total.abs() <= 1e-12);
    }

    #[test]
    fn energy_hand_computed_example() {
        // f = x²/2, A = [1], b = 1, γ = 2, δ = 1; the hand values assume
        // σ = 0, so use a negligibly small penalty.
        let p = quad1d(1e-12).unwrap();
        let d = DampingParams {
            gamma: 2.0,
            delta: 1.0,
            sigma: 1e-12,
        };
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = SaddlePoint {
            primal_star: DVector::from_element(1, 1.0),
            dual_star: DVector::from_element(1, -1.0),
        };
        let state = FlowState::new(
            DVector::zeros(1),
            DVector::zeros(1),
            DVector::from_element(1, -1.0),
            0.0,
        )
        .unwrap();
        let report = energy(&p, &d, &s, &state, &saddle, 0.0).unwrap();
        // e0 = L(0, −1) − L(1, −1) = 1 − 0.5 (σ-term is 1e-12·½, below tol).
        assert_relative_eq!(report.e0, 0.5, max_relative = 1e-9);
        // e1 = ½·1 + ½·1 + 0.
        assert_relative_eq!(report.e1, 1.0, max_relative = 1e-12);
        assert_relative_eq!(report.e_total, 1.5, max_relative = 1e-9);
    }

    #[test]
    fn energy_matches_scalar_loop_recomputation() {
        let p = random_quad(4, 2, 31, 1.3).unwrap();
        let quad = p.quadratic_objective().unwrap();
        let d = DampingParams::new(2.5, 0.8, 1.3).unwrap();
        let s = ScalingSchedule::exponential(1.5, 0.4, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for trial in 0..6 {
            let x = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
            let v = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
            let l = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let t = 0.3 * trial as f64;
            let state = FlowState::new(x.clone(), v.clone(), l.clone(), t).unwrap();
            let report = energy(&p, &d, &s, &state, &saddle, 0.123).unwrap();

            // Term-by-term scalar recomputation.
            let n = 4;
            let m = 2;
            let beta = 1.5 * (0.4f64 * t).exp();
            let value_at = |pt: &DVector<f64>, lam: &DVector<f64>| -> f64 {
                let mut f = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        f += 0.5 * pt[i] * quad.hessian()[(i, j)] * pt[j];
                    }
                    f += quad.linear()[i] * pt[i];
                }
                let mut pen = 0.0;
                for k in 0..m {
                    let mut row = -p.constraint_rhs()[k];
                    for j in 0..n {
                        row += p.constraint_matrix()[(k, j)] * pt[j];
                    }
                    f += lam[k] * row;
                    pen += row * row;
                }
                f + 0.5 * 1.3 * pen
            };
            let e0 = beta
                * (value_at(&x, &saddle.dual_star)
                    - value_at(&saddle.primal_star, &saddle.dual_star));
            let mut mixed_sq = 0.0;
            let mut dx_sq = 0.0;
            for i in 0..n {
                let dx = x[i] - saddle.primal_star[i];
                let mixed = dx / 0.8 + v[i];
                mixed_sq += mixed * mixed;
                dx_sq += dx * dx;
            }
            let mut dl_sq = 0.0;
            for k in 0..m {
                let dl = l[k] - saddle.dual_star[k];
                dl_sq += dl * dl;
            }
            let e1 = 0.5 * mixed_sq
                + (0.8 * 2.5 - 1.0) / (2.0 * 0.8 * 0.8) * dx_sq
                + dl_sq / (2.0 * 0.8);
            assert_relative_eq!(report.e0, e0, max_relative = 1e-11);
            assert_relative_eq!(report.e1, e1, max_relative = 1e-11);
            assert_relative_eq!(report.e_perturbed, e0 + e1 - 0.123, max_relative = 1e-10);
        }
    }

    #[test]
    fn energy_components_nonnegative_for_valid_damping() {
        let p = random_quad(5, 2, 41, 1.0).unwrap();
        let d = DampingParams::new(3.0, 0.7, 1.0).unwrap();
        assert!(d.satisfies_guarantee());
        let s = ScalingSchedule::constant(2.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..32 {
            let state = FlowState::new(
                DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng)),
                DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng)),
                DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng)),
                1.0,
            )
            .unwrap();
            let report = energy(&p, &d, &s, &state, &saddle, 0.0).unwrap();
            assert!(report.e0 >= -1e-10, "e0 = {}", report.e0);
            assert!(report.e1 >= -1e-10, "e1 = {}", report.e1);
        }
    }

    fn short_unperturbed_run() -> (
        ConstrainedProblem,
        DampingParams,
        ScalingSchedule,
        SaddlePoint,
        TrajectoryRecord,
    ) {
        let p = random_quad(6, 3, 51, 1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::zero(6, 3, 0.0);
        let cfg = IntegratorConfig::rk4(1e-3, 20.0).with_stride(10);
        let tr = integrate_flow(&p, &d, &s, &Perturbation::zero(6), &init, &cfg, &saddle).unwrap();
        (p, d, s, saddle, tr)
    }

    #[test]
    fn monotonicity_holds_on_a_valid_run() {
        let (p, d, _s, saddle, tr) = short_unperturbed_run();
        let series = energy_series(&p, &d, &tr, &saddle).unwrap();
        let report = energy_monotonicity_check(&series, 1e-6, false).unwrap();
        assert!(report.pass, "max increase {}", report.max_increase);
        for r in &series {
            assert!(r.e0 >= -1e-10);
            assert!(r.e1 >= -1e-10);
        }
    }

    #[test]
    fn monotonicity_check_is_diagnostic_when_condition_violated() {
        // β' = 2β/δ breaks the scaling condition; the check must still
        // report a (possibly positive) max_increase without erroring.
        let p = quad1d(1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::exponential(1.0, 2.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::zero(1, 1, 0.0);
        let cfg = IntegratorConfig::adaptive(1e-3, 1e-8, 1e-8, 6.0);
        let tr = integrate_flow(&p, &d, &s, &Perturbation::zero(1), &init, &cfg, &saddle).unwrap();
        let series = energy_series(&p, &d, &tr, &saddle).unwrap();
        let report = energy_monotonicity_check(&series, 1e-6, false).unwrap();
        assert!(report.max_increase.is_finite());
    }

    #[test]
    fn monotonicity_needs_two_samples() {
        let series = vec![EnergyReport {
            t: 0.0,
            e0: 1.0,
            e1: 1.0,
            e_total: 2.0,
            e_perturbed: 2.0,
        }];
        assert!(energy_monotonicity_check(&series, 1e-6, false).is_err());
    }

    #[test]
    fn gronwall_trivial_at_equilibrium() {
        let p = quad1d(1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::new(
            saddle.primal_star.clone(),
            DVector::zeros(1),
            saddle.dual_star.clone(),
            0.0,
        )
        .unwrap();
        let tr = integrate_flow(
            &p,
            &d,
            &s,
            &Perturbation::zero(1),
            &init,
            &IntegratorConfig::rk4(1e-2, 5.0),
            &saddle,
        )
        .unwrap();
        let report =
            gronwall_bound_check(&p, &d, &tr, &saddle, &Perturbation::zero(1), 1e-6).unwrap();
        assert!(report.lhs_max <= 1e-8);
        assert!(report.pass);
    }

    #[test]
    fn gronwall_holds_for_power_decay_perturbation() {
        let p = quad1d(1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let eps = Perturbation::power_decay(1, 0.0, 1.0, 2.0, 0).unwrap();
        let init = FlowState::zero(1, 1, 0.0);
        let tr = integrate_flow(
            &p,
            &d,
            &s,
            &eps,
            &init,
            &IntegratorConfig::rk4(1e-3, 50.0).with_stride(10),
            &saddle,
        )
        .unwrap();
        let report = gronwall_bound_check(&p, &d, &tr, &saddle, &eps, 1e-6).unwrap();
        assert!(report.pass, "lhs {} rhs {}", report.lhs_max, report.rhs);
        // The truncated ∫||ε|| changes by at most the tail 1/(1 + T − t₀)
        // when the horizon doubles; at T = 1e6 both truncations agree to
        // 1e-6.
        let near = perturbation_l1_norm(&eps, 0.0, 1e6).unwrap();
        let far = perturbation_l1_norm(&eps, 0.0, 2e6).unwrap();
        assert!((far - near).abs() <= 1e-6, "difference {}", far - near);
    }

    #[test]
    fn gronwall_rejects_non_integrable_perturbations() {
        let p = quad1d(1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let eps = Perturbation::power_decay(1, 0.0, 1.0, 0.5, 0).unwrap();
        let init = FlowState::zero(1, 1, 0.0);
        let tr = integrate_flow(
            &p,
            &d,
            &s,
            &eps,
            &init,
            &IntegratorConfig::rk4(1e-2, 1.0),
            &saddle,
        )
        .unwrap();
        assert!(gronwall_bound_check(&p, &d, &tr, &saddle, &eps, 1e-6).is_err());
    }

    #[test]
    fn metrics_at_equilibrium_are_zero() {
        let p = random_quad(4, 2, 61, 1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        let init = FlowState::new(
            saddle.primal_star.clone(),
            DVector::zeros(4),
            saddle.dual_star.clone(),
            0.0,
        )
        .unwrap();
        let tr = integrate_flow(
            &p,
            &d,
            &s,
            &Perturbation::zero(4),
            &init,
            &IntegratorConfig::rk4(1e-2, 5.0),
            &saddle,
        )
        .unwrap();
        let rows = metrics(&p, &tr, &saddle).unwrap();
        for row in &rows {
            assert!(row.lagrangian_gap.abs() <= 1e-8);
            assert!(row.feasibility <= 1e-8);
            assert!(row.objective_gap_abs <= 1e-8);
            assert!(row.ergodic_objective_gap_abs <= 1e-8);
            assert!(row.ergodic_feasibility <= 1e-8);
        }
        // The same stationary trajectory has an (essentially) flat energy.
        let series = energy_series(&p, &d, &tr, &saddle).unwrap();
        let mono = energy_monotonicity_check(&series, 1e-6, false).unwrap();
        assert!(mono.pass);
        assert!(mono.max_increase.abs() <= 1e-10);
    }

    #[test]
    fn feasible_start_has_zero_initial_feasibility() {
        let p = quad1d(1.0).unwrap();
        let d = DampingParams::new(2.0, 1.0, 1.0).unwrap();
        let s = ScalingSchedule::constant(1.0, 0.0).unwrap();
        let saddle = p.solve_saddle().unwrap();
        // x₀ = 1 satisfies Ax = b exactly; v₀ = 0.
        let init = FlowState::new(
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
            DVector::from_element(1, 2.0),
            0.0,
        )
        .unwrap();
        let tr = integrate_flow(
            &p,
            &d,
            &s,
            &Perturbation::zero(1),
            &init,
            &IntegratorConfig::rk4(1e-2, 1.0),
            &saddle,
        )
        .unwrap();
        let rows = metrics(&p, &tr, &saddle).unwrap();
        assert_eq!(rows[0].feasibility, 0.0);
    }

    #[test]
    fn lemma1_identity_holds_along_random_run() {
        let (p, d, _s, _saddle, tr) = short_unperturbed_run();
        let first = &tr.samples[0];
        let r0 = p.constraint_residual(&first.x).unwrap();
        let lambda0 = first.lambda.clone();
        for sample in &tr.samples {
            let residual = p.constraint_residual(&sample.x).unwrap();
            let lhs = residual * sample.beta + &sample.lemma1_integral;
            let rhs = (&sample.lambda - &lambda0) / d.delta + &r0 * first.beta;
            assert!(
                (lhs - rhs).amax() <= 1e-5,
                "identity residual too large at t = {}",
                sample.t
            );
        }
    }

    #[test]
    fn saddle_inequality_on_every_sample() {
        let (p, _d, _s, saddle, tr) = short_unperturbed_run();
        let rows = metrics(&p, &tr, &saddle).unwrap();
        for row in &rows {
            assert!(
                row.lagrangian_gap >= -1e-8,
                "gap {} at t = {}",
                row.lagrangian_gap,
                row.t
            );
        }
    }

    #[test]
    fn integrability_proxies_bounded_by_initial_energy() {
        let (p, d, _s, saddle, tr) = short_unperturbed_run();
        let series = energy_series(&p, &d, &tr, &saddle).unwrap();
        let e0 = series[0].e_total;
        let c = 1.0f64
            .max(2.0 * d.delta / d.sigma)
            .max(d.delta / (d.delta * d.gamma - 1.0));
        let bound = e0 * c + 1e-6;
        let last = tr.final_sample();
        assert!(last.beta_feas_sq_integral <= bound);
        assert!(last.speed_sq_integral <= bound);
        assert!(last.scaled_gap_integral <= bound);
    }

    #[test]
    fn fit_rate_exact_power_law() {
        let series: Vec<(f64, f64)> = (10..=1000).map(|i| (i as f64, 1.0 / i as f64)).collect();
        let fit = fit_rate(&series, RateModel::Power, (10.0, 1000.0)).unwrap();
        assert!(
            (fit.exponent - 1.0).abs() <= 1e-6,
            "exponent {}",
            fit.exponent
        );
        assert!(fit.r_squared > 0.9999);
    }

    #[test]
    fn fit_rate_exact_exponential() {
        let series: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let t = 0.1 * i as f64;
                (t, 5.0 * (-t / 3.0).exp())
            })
            .collect();
        let fit = fit_rate(&series, RateModel::Exponential, (0.0, 20.0)).unwrap();
        assert!((fit.exponent - 1.0 / 3.0).abs() <= 1e-6);
        assert!(fit.r_squared > 0.9999);
    }

    #[test]
    fn fit_rate_error_paths() {
        let few: Vec<(f64, f64)> = (0..5).map(|i| (i as f64 + 1.0, 1.0)).collect();
        assert!(matches!(
            fit_rate(&few, RateModel::Power, (1.0, 10.0)),
            Err(FlowError::DegenerateFit(_))
        ));
        let zeros: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 + 1.0, 0.0)).collect();
        assert!(fit_rate(&zeros, RateModel::Power, (1.0, 50.0)).is_err());
        let series: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, (-(i as f64)).exp())).collect();
        assert!(fit_rate(&series, RateModel::Exponential, (10.0, 5.0)).is_err());
    }

    #[test]
    fn sigma_free_problem_is_rejected_at_construction() {
        assert!(ConstrainedProblem::quadratic(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            0.0,
        )
        .is_err());
    }
}
