//! Experiment configuration documents.
//!
//! Experiments are described by a TOML document with sections mirroring the
//! run pipeline: `[problem]`, `[damping]`, `[schedule]`, `[perturbation]`,
//! `[integrator]`, `[init]`, `[checks]`, `[output]`. Problems are either
//! named builtins (`"quad1d"`, `"random_quad(n,m,seed)"`) or inline
//! matrices. All randomness is fixed by seeds in the document.

use std::path::PathBuf;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{FlowState, Perturbation};
use crate::error::{FlowError, Result};
use crate::integrate::{IntegrationMethod, IntegratorConfig};
use crate::problem::{quad1d, random_quad, ConstrainedProblem, ProblemDocument, SaddlePoint};
use crate::scaling::{DampingParams, ScalingSchedule, ScheduleFamily};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub damping: DampingSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub perturbation: PerturbationSection,
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub checks: ChecksSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlowError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlowError::Config(e.to_string()))
    }

    /// Re-seeds every random element (builtin problem, random init).
    pub fn apply_seed(&mut self, seed: u64) {
        if let ProblemSection::Builtin { builtin } = &mut self.problem {
            if let Some((n, m, _)) = parse_random_quad(builtin) {
                *builtin = format!("random_quad({n},{m},{seed})");
            }
        }
        if let InitSection::FeasibleRandom { seed: s } = &mut self.init {
            *s = seed;
        }
    }

    /// Builds the domain objects. Validation failures surface as
    /// [`FlowError::Config`].
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        self.resolve_inner()
            .map_err(|e| FlowError::Config(e.to_string()))
    }

    fn resolve_inner(&self) -> Result<ResolvedExperiment> {
        let damping =
            DampingParams::new(self.damping.gamma, self.damping.delta, self.damping.sigma)?;

        let problem = match &self.problem {
            ProblemSection::Builtin { builtin } => build_builtin(builtin, damping.sigma)?,
            ProblemSection::Inline(doc) => {
                if doc.sigma != damping.sigma {
                    return Err(FlowError::Config(format!(
                        "problem sigma {} and damping sigma {} must match (damping holds the flow's penalty)",
                        doc.sigma, damping.sigma
                    )));
                }
                doc.to_problem()?
            }
        };
        let n = problem.dim_primal();

        let schedule = ScalingSchedule::new(
            self.schedule.family,
            self.schedule.beta0,
            self.schedule.rate,
            self.schedule.t0,
        )?;

        let perturbation = self.perturbation.build(n, schedule.t0())?;

        let integrator = IntegratorConfig {
            method: self.integrator.method,
            step: self.integrator.step,
            abs_tol: self.integrator.abs_tol,
            rel_tol: self.integrator.rel_tol,
            t_end: self.integrator.t_end,
            sample_stride: self.integrator.sample_stride,
            max_step: self.integrator.max_step,
            h_min: self.integrator.h_min,
            blow_up_threshold: self.integrator.blow_up_threshold,
            max_steps: self.integrator.max_steps,
            max_samples: self.integrator.max_samples,
        };

        let saddle = problem.solve_saddle()?;
        let init = self.init.build(&problem, schedule.t0())?;

        Ok(ResolvedExperiment {
            problem,
            damping,
            schedule,
            perturbation,
            integrator,
            init,
            saddle,
            checks: self.checks.clone(),
            output_dir: self.output.dir.clone(),
        })
    }
}

/// Domain objects assembled from a config document.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub problem: ConstrainedProblem,
    pub damping: DampingParams,
    pub schedule: ScalingSchedule,
    pub perturbation: Perturbation,
    pub integrator: IntegratorConfig,
    pub init: FlowState,
    pub saddle: SaddlePoint,
    pub checks: ChecksSection,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSection {
    Builtin { builtin: String },
    Inline(ProblemDocument),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingSection {
    pub gamma: f64,
    pub delta: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub family: ScheduleFamily,
    pub beta0: f64,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub t0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationFamily {
    Zero,
    PowerDecay,
    ExponentialDecay,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    pub family: PerturbationFamily,
    #[serde(default = "one")]
    pub eps0: f64,
    /// Decay exponent p for the power family; integrable for p > 1.
    #[serde(default = "two")]
    pub power: f64,
    /// Decay rate for the exponential family.
    #[serde(default = "one")]
    pub rate: f64,
    /// Coordinate index of the (unit) perturbation direction.
    #[serde(default)]
    pub direction: usize,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        Self {
            family: PerturbationFamily::Zero,
            eps0: 1.0,
            power: 2.0,
            rate: 1.0,
            direction: 0,
        }
    }
}

impl PerturbationSection {
    fn build(&self, dim: usize, t0: f64) -> Result<Perturbation> {
        match self.family {
            PerturbationFamily::Zero => Ok(Perturbation::zero(dim)),
            PerturbationFamily::PowerDecay => {
                Perturbation::power_decay(dim, t0, self.eps0, self.power, self.direction)
            }
            PerturbationFamily::ExponentialDecay => {
                Perturbation::exponential_decay(dim, t0, self.eps0, self.rate, self.direction)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub method: IntegrationMethod,
    pub step: f64,
    #[serde(default = "default_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_tol")]
    pub rel_tol: f64,
    pub t_end: f64,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_max_step")]
    pub max_step: f64,
    #[serde(default = "default_h_min")]
    pub h_min: f64,
    #[serde(default = "default_blow_up")]
    pub blow_up_threshold: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSection {
    #[default]
    Zero,
    /// Random primal start satisfying Ax = b exactly (up to linear-solve
    /// precision), with v = 0 and λ = 0.
    FeasibleRandom { seed: u64 },
    Explicit {
        x: Vec<f64>,
        v: Vec<f64>,
        lambda: Vec<f64>,
    },
}

impl InitSection {
    fn build(&self, problem: &ConstrainedProblem, t0: f64) -> Result<FlowState> {
        let n = problem.dim_primal();
        let m = problem.dim_dual();
        match self {
            InitSection::Zero => Ok(FlowState::zero(n, m, t0)),
            InitSection::FeasibleRandom { seed } => {
                let a = problem.constraint_matrix();
                let aat = a * a.transpose();
                let lu = aat.lu();
                let w = lu.solve(problem.constraint_rhs()).ok_or_else(|| {
                    FlowError::InvalidArgument(
                        "feasible_random init requires A with full row rank".into(),
                    )
                })?;
                let particular = a.transpose() * w;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                let az = a * &z;
                let corr = lu.solve(&az).ok_or_else(|| {
                    FlowError::InvalidArgument("rank-deficient constraint matrix".into())
                })?;
                let x = particular + &z - a.transpose() * corr;
                FlowState::new(x, DVector::zeros(n), DVector::zeros(m), t0)
            }
            InitSection::Explicit { x, v, lambda } => FlowState::new(
                DVector::from_column_slice(x),
                DVector::from_column_slice(v),
                DVector::from_column_slice(lambda),
                t0,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    EnergyMonotonicity,
    Rates,
    Lemma1,
    Gronwall,
}

impl CheckKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckKind::EnergyMonotonicity => "energy_monotonicity",
            CheckKind::Rates => "rates",
            CheckKind::Lemma1 => "lemma1",
            CheckKind::Gronwall => "gronwall",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    #[serde(default)]
    pub enabled: Vec<CheckKind>,
    /// Refuse to run configurations violating the scaling condition.
    #[serde(default = "default_true")]
    pub guarantee: bool,
    /// Strengthening parameter κ of the validated condition
    /// β' ≤ (1 − κ)(1/δ)β; 0 is the plain condition.
    #[serde(default)]
    pub kappa: f64,
    /// Rate-fit window override; defaults to the trailing [t₀ + span/4, T].
    #[serde(default)]
    pub rate_window: Option<(f64, f64)>,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            enabled: Vec::new(),
            guarantee: true,
            kappa: 0.0,
            rate_window: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn default_tol() -> f64 {
    1e-8
}

fn default_stride() -> usize {
    1
}

fn default_max_step() -> f64 {
    1.0
}

fn default_h_min() -> f64 {
    1e-12
}

fn default_blow_up() -> f64 {
    1e12
}

fn default_max_steps() -> usize {
    100_000_000
}

fn default_max_samples() -> usize {
    2_000_000
}

fn default_true() -> bool {
    true
}

fn build_builtin(name: &str, sigma: f64) -> Result<ConstrainedProblem> {
    let trimmed = name.trim();
    if trimmed == "quad1d" {
        return quad1d(sigma);
    }
    if let Some((n, m, seed)) = parse_random_quad(trimmed) {
        return random_quad(n, m, seed, sigma);
    }
    Err(FlowError::Config(format!(
        "unknown builtin problem '{name}' (expected 'quad1d' or 'random_quad(n,m,seed)')"
    )))
}

fn parse_random_quad(name: &str) -> Option<(usize, usize, u64)> {
    let inner = name
        .trim()
        .strip_prefix("random_quad(")?
        .strip_suffix(')')?;
    let mut parts = inner.split(',').map(str::trim);
    let n = parts.next()?.parse().ok()?;
    let m = parts.next()?.parse().ok()?;
    let seed = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((n, m, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD1D_CONFIG: &str = r#"
[problem]
builtin = "quad1d"

[damping]
gamma = 2.0
delta = 1.0
sigma = 1.0

[schedule]
family = "constant"
beta0 = 1.0

[integrator]
method = "rk4_fixed"
step = 1e-2
t_end = 10.0

[output]
dir = "out"
"#;

    #[test]
    fn parses_minimal_config() {
        let config = ExperimentConfig::from_toml_str(QUAD1D_CONFIG).unwrap();
        let resolved = config.resolve().unwrap();
        assert_eq!(resolved.problem.dim_primal(), 1);
        assert!(resolved.perturbation.is_zero());
        assert!(resolved.checks.guarantee);
        assert_eq!(resolved.init.x.len(), 1);
    }

    #[test]
    fn round_trips_through_toml() {
        let config = ExperimentConfig::from_toml_str(QUAD1D_CONFIG).unwrap();
        let text = config.to_toml_string().unwrap();
        let reparsed = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(reparsed.damping.gamma, 2.0);
        assert_eq!(reparsed.integrator.t_end, 10.0);
    }

    #[test]
    fn rejects_malformed_documents() {
        assert!(ExperimentConfig::from_toml_str("not toml at all [[[").is_err());
        assert!(ExperimentConfig::from_toml_str("[problem]\nbuiltin = \"quad1d\"\n").is_err());
        // Unknown field inside a strict section.
        let bad = QUAD1D_CONFIG.replace("gamma = 2.0", "gamma = 2.0\nbogus_field = 1.0");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn resolves_random_quad_builtin_and_reseeds() {
        let mut config = ExperimentConfig::from_toml_str(
            &QUAD1D_CONFIG.replace("\"quad1d\"", "\"random_quad(6, 3, 42)\""),
        )
        .unwrap();
        let resolved = config.resolve().unwrap();
        assert_eq!(resolved.problem.dim_primal(), 6);
        assert_eq!(resolved.problem.dim_dual(), 3);

        config.apply_seed(99);
        match &config.problem {
            ProblemSection::Builtin { builtin } => {
                assert_eq!(builtin, "random_quad(6,3,99)");
            }
            _ => panic!("expected builtin"),
        }
        let reseeded = config.resolve().unwrap();
        assert_ne!(
            resolved.saddle.primal_star, reseeded.saddle.primal_star,
            "different seed should give a different instance"
        );
    }

    #[test]
    fn inline_problem_requires_matching_sigma() {
        let inline = r#"
[problem]
dim_primal = 1
dim_dual = 1
q = [1.0]
c = [0.0]
a = [1.0]
b = [1.0]
sigma = 2.0

[damping]
gamma = 2.0
delta = 1.0
sigma = 1.0

[schedule]
family = "constant"
beta0 = 1.0

[integrator]
method = "rk4_fixed"
step = 1e-2
t_end = 5.0

[output]
dir = "out"
"#;
        let config = ExperimentConfig::from_toml_str(inline).unwrap();
        assert!(matches!(config.resolve(), Err(FlowError::Config(_))));
        let fixed = inline.replace("sigma = 2.0", "sigma = 1.0");
        let config = ExperimentConfig::from_toml_str(&fixed).unwrap();
        assert!(config.resolve().is_ok());
    }

    #[test]
    fn feasible_random_init_is_feasible_and_seeded() {
        let text = QUAD1D_CONFIG.replace("\"quad1d\"", "\"random_quad(8, 4, 3)\"")
            + "\n[init]\nkind = \"feasible_random\"\nseed = 5\n";
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        let resolved = config.resolve().unwrap();
        let residual = resolved
            .problem
            .constraint_residual(&resolved.init.x)
            .unwrap();
        assert!(residual.amax() <= 1e-10);
        assert!(resolved.init.v.amax() == 0.0);

        // Same seed, same start.
        let again = config.resolve().unwrap();
        assert_eq!(resolved.init.x, again.init.x);
    }

    #[test]
    fn unknown_builtin_is_a_config_error() {
        let text = QUAD1D_CONFIG.replace("quad1d", "mystery_problem");
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!(matches!(config.resolve(), Err(FlowError::Config(_))));
    }
}
