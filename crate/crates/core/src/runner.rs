//! Config-driven experiment runner.
//!
//! A run resolves its config, validates the scaling condition (guarantee
//! mode), integrates the flow, writes `trajectory.csv`, `diagnostics.csv`
//! and `summary.toml` into the output directory, and evaluates the enabled
//! checks. Sweeps fan independent runs out across workers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    energy_monotonicity_check, energy_series, fit_rate, gronwall_bound_check, metrics,
    EnergyReport, MetricsRow, RateFit, RateModel,
};
use crate::batch;
use crate::config::{CheckKind, ExperimentConfig, ResolvedExperiment};
use crate::dynamics::perturbation_l1_norm;
use crate::error::{FlowError, Result};
use crate::integrate::{integrate_flow, IntegrationMethod, RunStatus, TrajectoryRecord};
use crate::scaling::{validate_scaling, ScheduleFamily};

/// Per-sample trapezoid error and f64 accumulation headroom for the energy
/// monotonicity verdicts.
pub const MONOTONICITY_TOL: f64 = 1e-6;
/// Residual budget for the partial-integration identity check.
pub const LEMMA1_TOL: f64 = 1e-5;
/// Additive slack on the integral bound check.
pub const GRONWALL_TOL: f64 = 1e-6;
/// Guarantee-mode horizon cap for exponentially growing schedules: the flow
/// stiffens like β(t), and explicit steppers stop being trustworthy past
/// t₀ + 20δ.
pub const EXPONENTIAL_HORIZON_FACTOR: f64 = 20.0;

/// CLI/API overrides applied on top of a config document.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub no_guarantee: bool,
    pub seed: Option<u64>,
    pub t_end: Option<f64>,
    pub method: Option<IntegrationMethod>,
}

/// Verdict of one enabled check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub status: RunStatus,
    pub checks: Vec<CheckOutcome>,
    pub output_dir: PathBuf,
    pub e_initial: f64,
    pub e_final: f64,
    /// ||λ(T) − λ(t_mid)||, reported without asserting dual convergence.
    pub dual_drift: f64,
    pub notes: Vec<String>,
    pub rate_fits: Vec<NamedFit>,
}

impl RunReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Names of failing checks, for diagnostics and exit messages.
    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedFit {
    pub metric: String,
    #[serde(flatten)]
    pub fit: RateFit,
}

/// Runs one experiment end to end.
pub fn run(mut config: ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    apply_overrides(&mut config, opts);
    let mut resolved = config.resolve()?;
    let mut notes = Vec::new();

    if resolved.checks.guarantee {
        // Cap exponential horizons; past t₀ + 20δ the integration error
        // swamps the quantities under test.
        if resolved.schedule.family() == ScheduleFamily::Exponential {
            let cap = resolved.schedule.t0() + EXPONENTIAL_HORIZON_FACTOR * resolved.damping.delta;
            if resolved.integrator.t_end > cap {
                notes.push(format!(
                    "t_end clamped from {} to {cap} (exponential schedule horizon cap)",
                    resolved.integrator.t_end
                ));
                resolved.integrator.t_end = cap;
            }
        }
        let report = validate_scaling(
            &resolved.schedule,
            &resolved.damping,
            resolved.integrator.t_end,
            resolved.checks.kappa,
        )?;
        if !report.satisfied {
            return Err(FlowError::ScalingViolation {
                worst_margin: report.worst_margin,
                worst_t: report.worst_t,
            });
        }
    }

    let trajectory = integrate_flow(
        &resolved.problem,
        &resolved.damping,
        &resolved.schedule,
        &resolved.perturbation,
        &resolved.init,
        &resolved.integrator,
        &resolved.saddle,
    )?;

    let energies = energy_series(
        &resolved.problem,
        &resolved.damping,
        &trajectory,
        &resolved.saddle,
    )?;
    let rows = metrics(&resolved.problem, &trajectory, &resolved.saddle)?;

    fs::create_dir_all(&resolved.output_dir)?;
    write_trajectory_csv(&resolved.output_dir.join("trajectory.csv"), &trajectory)?;
    write_diagnostics_csv(
        &resolved.output_dir.join("diagnostics.csv"),
        &trajectory,
        &energies,
        &rows,
    )?;

    let mut checks = Vec::new();
    let mut rate_fits = Vec::new();
    if trajectory.status.is_completed() {
        for kind in &resolved.checks.enabled {
            checks.push(evaluate_check(
                *kind,
                &resolved,
                &trajectory,
                &energies,
                &rows,
                &mut rate_fits,
            ));
        }
    } else {
        for kind in &resolved.checks.enabled {
            checks.push(CheckOutcome {
                name: kind.name().to_string(),
                pass: false,
                detail: format!(
                    "not evaluated: integration ended with {:?}",
                    trajectory.status
                ),
            });
        }
    }

    let e_initial = energies.first().map_or(0.0, |e| e.e_total);
    let e_final = energies.last().map_or(0.0, |e| e.e_total);
    let dual_drift = dual_drift(&trajectory);

    if !resolved.perturbation.is_zero() {
        let l1 = perturbation_l1_norm(
            &resolved.perturbation,
            trajectory.t0,
            trajectory.final_sample().t,
        )?;
        notes.push(format!("perturbation L1 norm over the horizon: {l1:.6e}"));
    }

    let report = RunReport {
        status: trajectory.status,
        checks,
        output_dir: resolved.output_dir.clone(),
        e_initial,
        e_final,
        dual_drift,
        notes,
        rate_fits,
    };
    write_summary(
        &resolved.output_dir.join("summary.toml"),
        &resolved,
        &report,
    )?;
    Ok(report)
}

fn apply_overrides(config: &mut ExperimentConfig, opts: &RunOptions) {
    if let Some(seed) = opts.seed {
        config.apply_seed(seed);
    }
    if let Some(t_end) = opts.t_end {
        config.integrator.t_end = t_end;
    }
    if let Some(method) = opts.method {
        config.integrator.method = method;
    }
    if opts.no_guarantee {
        config.checks.guarantee = false;
    }
}

fn dual_drift(trajectory: &TrajectoryRecord) -> f64 {
    let last = trajectory.final_sample();
    let t_mid = trajectory.t0 + 0.5 * (last.t - trajectory.t0);
    let mid = trajectory
        .samples
        .iter()
        .min_by(|a, b| {
            (a.t - t_mid)
                .abs()
                .partial_cmp(&(b.t - t_mid).abs())
                .unwrap()
        })
        .expect("trajectory has samples");
    (&last.lambda - &mid.lambda).norm()
}

fn evaluate_check(
    kind: CheckKind,
    resolved: &ResolvedExperiment,
    trajectory: &TrajectoryRecord,
    energies: &[EnergyReport],
    rows: &[MetricsRow],
    rate_fits: &mut Vec<NamedFit>,
) -> CheckOutcome {
    let name = kind.name().to_string();
    let result = match kind {
        CheckKind::EnergyMonotonicity => check_monotonicity(resolved, energies),
        CheckKind::Lemma1 => check_lemma1(resolved, trajectory),
        CheckKind::Gronwall => check_gronwall(resolved, trajectory),
        CheckKind::Rates => check_rates(resolved, trajectory, rows, rate_fits),
    };
    match result {
        Ok((pass, detail)) => CheckOutcome { name, pass, detail },
        Err(e) => CheckOutcome {
            name,
            pass: false,
            detail: format!("check failed to evaluate: {e}"),
        },
    }
}

fn check_monotonicity(
    resolved: &ResolvedExperiment,
    energies: &[EnergyReport],
) -> Result<(bool, String)> {
    let perturbed = !resolved.perturbation.is_zero();
    let report = energy_monotonicity_check(energies, MONOTONICITY_TOL, perturbed)?;
    let which = if perturbed { "e_perturbed" } else { "e_total" };
    Ok((
        report.pass,
        format!(
            "{which} max increase {:.3e} over {} samples",
            report.max_increase,
            energies.len()
        ),
    ))
}

fn check_lemma1(
    resolved: &ResolvedExperiment,
    trajectory: &TrajectoryRecord,
) -> Result<(bool, String)> {
    let first = &trajectory.samples[0];
    let r0 = resolved.problem.constraint_residual(&first.x)?;
    let mut worst = 0.0f64;
    for sample in &trajectory.samples {
        let residual = resolved.problem.constraint_residual(&sample.x)?;
        let lhs = residual * sample.beta + &sample.lemma1_integral;
        let rhs = (&sample.lambda - &first.lambda) / resolved.damping.delta + &r0 * first.beta;
        worst = worst.max((lhs - rhs).amax());
    }
    Ok((
        worst <= LEMMA1_TOL,
        format!("max identity residual {worst:.3e} (budget {LEMMA1_TOL:.0e})"),
    ))
}

fn check_gronwall(
    resolved: &ResolvedExperiment,
    trajectory: &TrajectoryRecord,
) -> Result<(bool, String)> {
    if !resolved.perturbation.claims_integrable() {
        return Ok((
            false,
            "perturbation does not claim an integrable norm".to_string(),
        ));
    }
    let report = gronwall_bound_check(
        &resolved.problem,
        &resolved.damping,
        trajectory,
        &resolved.saddle,
        &resolved.perturbation,
        GRONWALL_TOL,
    )?;
    Ok((
        report.pass,
        format!("lhs sup {:.6e} <= rhs {:.6e}", report.lhs_max, report.rhs),
    ))
}

/// Rate verdicts per schedule family: constant β checks the ergodic O(1/t)
/// power law, exponential β checks the e^{−t/δ} decay of the pointwise
/// gaps. Polynomial schedules carry no rate criterion here and pass with a
/// note.
fn check_rates(
    resolved: &ResolvedExperiment,
    trajectory: &TrajectoryRecord,
    rows: &[MetricsRow],
    rate_fits: &mut Vec<NamedFit>,
) -> Result<(bool, String)> {
    let t0 = trajectory.t0;
    let t_end = trajectory.final_sample().t;
    match resolved.schedule.family() {
        ScheduleFamily::Constant => {
            let window = resolved
                .checks
                .rate_window
                .unwrap_or((t0 + 0.25 * (t_end - t0), t_end));
            let mut detail = String::new();
            let mut pass = true;
            for (metric, series) in [
                (
                    "ergodic_objective_gap_abs",
                    rows.iter()
                        .map(|r| (r.t, r.ergodic_objective_gap_abs))
                        .collect::<Vec<_>>(),
                ),
                (
                    "ergodic_feasibility",
                    rows.iter()
                        .map(|r| (r.t, r.ergodic_feasibility))
                        .collect::<Vec<_>>(),
                ),
            ] {
                let final_value = series.last().map_or(0.0, |p| p.1);
                if final_value < 1e-12 {
                    let _ = write!(detail, "{metric}: converged ({final_value:.2e} at T); ");
                    continue;
                }
                match fit_rate(&series, RateModel::Power, window) {
                    Ok(fit) => {
                        let ok = fit.exponent >= 0.9 && fit.r_squared >= 0.95;
                        pass &= ok;
                        let _ = write!(
                            detail,
                            "{metric}: exponent {:.3}, r2 {:.4}; ",
                            fit.exponent, fit.r_squared
                        );
                        rate_fits.push(NamedFit {
                            metric: metric.to_string(),
                            fit,
                        });
                    }
                    Err(e) => {
                        pass = false;
                        let _ = write!(detail, "{metric}: fit failed ({e}); ");
                    }
                }
            }
            Ok((pass, detail.trim_end().to_string()))
        }
        ScheduleFamily::Exponential => {
            let rho_required = 0.9 / resolved.damping.delta;
            let fit_start = t0 + 3.0;
            let mut detail = String::new();
            let mut pass = true;
            for (metric, series) in [
                (
                    "feasibility",
                    rows.iter()
                        .map(|r| (r.t, r.feasibility))
                        .collect::<Vec<_>>(),
                ),
                (
                    "objective_gap_abs",
                    rows.iter()
                        .map(|r| (r.t, r.objective_gap_abs))
                        .collect::<Vec<_>>(),
                ),
            ] {
                // Fit up to the first time the metric hits numerical zero.
                let fit_end = series
                    .iter()
                    .find(|(t, y)| *t > fit_start && *y < 1e-12)
                    .map_or(t_end, |(t, _)| *t);
                let already_converged = series
                    .iter()
                    .filter(|(t, _)| *t <= fit_start)
                    .all(|(_, y)| *y < 1e-12)
                    && !series.is_empty();
                if already_converged {
                    let _ = write!(detail, "{metric}: converged before fit window; ");
                    continue;
                }
                match fit_rate(&series, RateModel::Exponential, (fit_start, fit_end)) {
                    Ok(fit) => {
                        let ok = fit.exponent >= rho_required;
                        pass &= ok;
                        let _ = write!(
                            detail,
                            "{metric}: rho {:.3} (needs >= {rho_required:.3}); ",
                            fit.exponent
                        );
                        rate_fits.push(NamedFit {
                            metric: metric.to_string(),
                            fit,
                        });
                    }
                    Err(e) => {
                        pass = false;
                        let _ = write!(detail, "{metric}: fit failed ({e}); ");
                    }
                }
            }
            Ok((pass, detail.trim_end().to_string()))
        }
        ScheduleFamily::Polynomial => Ok((
            true,
            "no rate criterion defined for polynomial schedules; skipped".to_string(),
        )),
    }
}

/// Named presets realizing each guarantee regime.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = |out: &str| -> String {
        format!(
            r#"
[problem]
builtin = "random_quad(10,4,7)"

[damping]
gamma = 2.0
delta = 1.0
sigma = 1.0

[schedule]
family = "constant"
beta0 = 1.0
t0 = 0.0

[integrator]
method = "rk4_fixed"
step = 1e-3
t_end = 200.0
sample_stride = 10

[output]
dir = "out/{out}"
"#
        )
    };
    let text = match name {
        "monotonicity" => format!(
            "{}\n[checks]\nenabled = [\"energy_monotonicity\", \"lemma1\"]\n",
            base("monotonicity")
        ),
        "thm2_ergodic" => {
            let mut text = base("thm2_ergodic");
            text = text.replace("method = \"rk4_fixed\"", "method = \"adaptive_embedded\"");
            text = text.replace("t_end = 200.0", "t_end = 2000.0");
            text = text.replace("sample_stride = 10", "sample_stride = 1");
            text.push_str("\n[checks]\nenabled = [\"energy_monotonicity\", \"rates\", \"lemma1\"]\n");
            text
        }
        "thm3_exponential" => {
            let mut text = base("thm3_exponential");
            text = text.replace("builtin = \"random_quad(10,4,7)\"", "builtin = \"quad1d\"");
            text = text.replace(
                "family = \"constant\"\nbeta0 = 1.0",
                "family = \"exponential\"\nbeta0 = 1.0\nrate = 1.0",
            );
            text = text.replace("method = \"rk4_fixed\"", "method = \"adaptive_embedded\"");
            text = text.replace(
                "step = 1e-3\nt_end = 200.0",
                "step = 1e-3\nabs_tol = 1e-10\nrel_tol = 1e-10\nt_end = 15.0",
            );
            // The stiff tail takes tens of millions of accepted steps;
            // stride 200 keeps the sample count (and CSV size) reasonable.
            text = text.replace("sample_stride = 10", "sample_stride = 200");
            text.push_str("\n[checks]\nenabled = [\"energy_monotonicity\", \"rates\", \"lemma1\"]\n");
            text
        }
        "thm4_perturbed" => {
            let mut text = base("thm4_perturbed");
            text = text.replace("method = \"rk4_fixed\"", "method = \"adaptive_embedded\"");
            text = text.replace("t_end = 200.0", "t_end = 2000.0");
            text = text.replace("sample_stride = 10", "sample_stride = 1");
            text.push_str(
                "\n[perturbation]\nfamily = \"power_decay\"\neps0 = 1.0\npower = 2.0\ndirection = 0\n",
            );
            text.push_str(
                "\n[checks]\nenabled = [\"energy_monotonicity\", \"rates\", \"gronwall\", \"lemma1\"]\n",
            );
            text
        }
        other => {
            return Err(FlowError::Config(format!(
                "unknown preset '{other}' (known: monotonicity, thm2_ergodic, thm3_exponential, thm4_perturbed)"
            )))
        }
    };
    ExperimentConfig::from_toml_str(&text)
}

/// One sweep variant: the overridden key/value and the run result.
pub struct SweepEntry {
    pub label: String,
    pub result: Result<RunReport>,
}

/// Fans out one run per value of `key` (a dotted TOML path such as
/// `damping.gamma`), each into its own output subdirectory. Runs execute
/// concurrently with no shared mutable state.
pub fn sweep(
    config: &ExperimentConfig,
    key: &str,
    values: &[String],
    opts: &RunOptions,
) -> Result<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(FlowError::Config(
            "sweep requires at least one value".into(),
        ));
    }
    let base = toml::Value::try_from(config).map_err(|e| FlowError::Config(e.to_string()))?;
    let mut variants = Vec::new();
    for value in values {
        let mut tree = base.clone();
        set_path(&mut tree, key, value)?;
        let mut variant: ExperimentConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| FlowError::Config(e.to_string()))?;
        let label = format!("{key}={value}");
        let dir_name = label.replace(['/', '\\'], "_");
        variant.output.dir = variant.output.dir.join(dir_name);
        variants.push((label, variant));
    }

    let opts = *opts;
    Ok(batch::map(&variants, move |(label, variant)| SweepEntry {
        label: label.clone(),
        result: run(variant.clone(), &opts),
    }))
}

fn set_path(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let mut current = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = current.as_table_mut().ok_or_else(|| {
            FlowError::Config(format!("sweep key '{key}' does not address a table"))
        })?;
        if i + 1 == parts.len() {
            let new_value = match table.get(*part) {
                Some(toml::Value::Integer(_)) => raw
                    .parse::<i64>()
                    .map(toml::Value::Integer)
                    .map_err(|_| FlowError::Config(format!("expected integer for '{key}'")))?,
                Some(toml::Value::Float(_)) | None => match raw.parse::<f64>() {
                    Ok(v) => toml::Value::Float(v),
                    Err(_) => toml::Value::String(raw.to_string()),
                },
                Some(toml::Value::Boolean(_)) => raw
                    .parse::<bool>()
                    .map(toml::Value::Boolean)
                    .map_err(|_| FlowError::Config(format!("expected bool for '{key}'")))?,
                Some(toml::Value::String(_)) => toml::Value::String(raw.to_string()),
                Some(other) => {
                    return Err(FlowError::Config(format!(
                        "cannot sweep over '{key}' of type {}",
                        other.type_str()
                    )))
                }
            };
            table.insert(part.to_string(), new_value);
            return Ok(());
        }
        current = table.get_mut(*part).ok_or_else(|| {
            FlowError::Config(format!("sweep key '{key}': unknown section '{part}'"))
        })?;
    }
    Ok(())
}

fn fmt17(value: f64) -> String {
    format!("{value:.16e}")
}

fn write_trajectory_csv(path: &Path, trajectory: &TrajectoryRecord) -> Result<()> {
    let first = &trajectory.samples[0];
    let n = first.x.len();
    let m = first.lambda.len();
    let mut out = String::new();
    out.push('t');
    for i in 0..n {
        let _ = write!(out, ",x_{i}");
    }
    for i in 0..n {
        let _ = write!(out, ",v_{i}");
    }
    for k in 0..m {
        let _ = write!(out, ",lambda_{k}");
    }
    out.push('\n');
    for s in &trajectory.samples {
        out.push_str(&fmt17(s.t));
        for value in s.x.iter().chain(s.v.iter()).chain(s.lambda.iter()) {
            out.push(',');
            out.push_str(&fmt17(*value));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

const DIAGNOSTIC_COLUMNS: &[&str] = &[
    "e0",
    "e1",
    "e_total",
    "e_perturbed",
    "lagrangian_gap",
    "feasibility",
    "objective_gap_abs",
    "ergodic_objective_gap_abs",
    "ergodic_feasibility",
    "lemma1_quantity",
];

fn write_diagnostics_csv(
    path: &Path,
    trajectory: &TrajectoryRecord,
    energies: &[EnergyReport],
    rows: &[MetricsRow],
) -> Result<()> {
    let first = &trajectory.samples[0];
    let n = first.x.len();
    let m = first.lambda.len();
    let mut out = String::new();
    out.push('t');
    for i in 0..n {
        let _ = write!(out, ",x_{i}");
    }
    for i in 0..n {
        let _ = write!(out, ",v_{i}");
    }
    for k in 0..m {
        let _ = write!(out, ",lambda_{k}");
    }
    for col in DIAGNOSTIC_COLUMNS {
        let _ = write!(out, ",{col}");
    }
    out.push('\n');
    for ((s, e), r) in trajectory.samples.iter().zip(energies).zip(rows) {
        out.push_str(&fmt17(s.t));
        for value in s.x.iter().chain(s.v.iter()).chain(s.lambda.iter()) {
            out.push(',');
            out.push_str(&fmt17(*value));
        }
        for value in [
            e.e0,
            e.e1,
            e.e_total,
            e.e_perturbed,
            r.lagrangian_gap,
            r.feasibility,
            r.objective_gap_abs,
            r.ergodic_objective_gap_abs,
            r.ergodic_feasibility,
            r.lemma1_quantity,
        ] {
            out.push(',');
            out.push_str(&fmt17(value));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    status: RunStatus,
    guarantee_mode: bool,
    e_initial: f64,
    e_final: f64,
    dual_drift: f64,
    notes: &'a [String],
    checks: &'a [CheckOutcome],
    rate_fits: &'a [NamedFit],
}

fn write_summary(path: &Path, resolved: &ResolvedExperiment, report: &RunReport) -> Result<()> {
    let summary = Summary {
        status: report.status,
        guarantee_mode: resolved.checks.guarantee,
        e_initial: report.e_initial,
        e_final: report.e_final,
        dual_drift: report.dual_drift,
        notes: &report.notes,
        checks: &report.checks,
        rate_fits: &report.rate_fits,
    };
    let text = toml::to_string(&summary).map_err(|e| FlowError::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Maps an error (or failing checks) to the process exit code contract:
/// 0 all checks pass, 1 named check failed, 2 config error, 3 scaling
/// violation in guarantee mode, 4 integration failure.
pub fn exit_code(outcome: &Result<RunReport>) -> i32 {
    match outcome {
        Ok(report) => {
            if !report.status.is_completed() {
                4
            } else if report.all_passed() {
                0
            } else {
                1
            }
        }
        Err(FlowError::Config(_)) => 2,
        Err(FlowError::ScalingViolation { .. }) => 3,
        Err(_) => 4,
    }
}
