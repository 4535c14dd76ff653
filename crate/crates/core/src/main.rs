//! Experiment CLI: config-driven runs, presets and parameter sweeps.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pdflow::config::ExperimentConfig;
use pdflow::error::{FlowError, Result};
use pdflow::integrate::IntegrationMethod;
use pdflow::runner::{self, RunOptions, RunReport};

#[derive(Parser)]
#[command(
    name = "pdflow",
    about = "Simulates an inertial primal-dual flow for linearly constrained convex programs and verifies its energy-decay and rate guarantees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Write a named preset config (monotonicity, thm2_ergodic,
    /// thm3_exponential, thm4_perturbed).
    Preset {
        name: String,
        /// Directory to write `<name>.toml` into.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run one experiment per value of a swept config key.
    Sweep {
        config: PathBuf,
        /// Key and comma-separated values, e.g. `damping.gamma=1.5,2.0,3.0`.
        #[arg(long)]
        vary: String,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Args)]
struct OverrideArgs {
    /// Run even if the scaling condition fails (no guarantee checks asserted).
    #[arg(long)]
    no_guarantee: bool,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the integration horizon.
    #[arg(long)]
    t_end: Option<f64>,
    /// Override the integration method.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
}

// Spelled like the config-file values.
#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MethodArg {
    Rk4Fixed,
    AdaptiveEmbedded,
}

impl From<MethodArg> for IntegrationMethod {
    fn from(value: MethodArg) -> Self {
        match value {
            MethodArg::Rk4Fixed => IntegrationMethod::Rk4Fixed,
            MethodArg::AdaptiveEmbedded => IntegrationMethod::AdaptiveEmbedded,
        }
    }
}

impl OverrideArgs {
    fn to_options(&self) -> RunOptions {
        RunOptions {
            no_guarantee: self.no_guarantee,
            seed: self.seed,
            t_end: self.t_end,
            method: self.method.map(IntegrationMethod::from),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, overrides } => {
            let outcome =
                load_config(&config).and_then(|c| runner::run(c, &overrides.to_options()));
            report_run(&outcome);
            runner::exit_code(&outcome)
        }
        Command::Preset { name, out } => match write_preset(&name, &out) {
            Ok(path) => {
                println!("wrote {}", path.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Sweep {
            config,
            vary,
            overrides,
        } => match run_sweep(&config, &vary, &overrides.to_options()) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                runner::exit_code(&Err::<RunReport, _>(e))
            }
        },
    };
    ExitCode::from(code as u8)
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| FlowError::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml_str(&text)
}

fn report_run(outcome: &Result<RunReport>) {
    match outcome {
        Ok(report) => {
            println!("status: {:?}", report.status);
            for check in &report.checks {
                println!(
                    "check {:<20} {} {}",
                    check.name,
                    if check.pass { "PASS" } else { "FAIL" },
                    check.detail
                );
            }
            for note in &report.notes {
                println!("note: {note}");
            }
            println!("outputs: {}", report.output_dir.display());
            if !report.all_passed() {
                eprintln!("failing checks: {}", report.failing().join(", "));
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
}

fn write_preset(name: &str, out: &PathBuf) -> Result<PathBuf> {
    let config = runner::preset(name)?;
    let text = config.to_toml_string()?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("{name}.toml"));
    fs::write(&path, text)?;
    Ok(path)
}

fn run_sweep(config_path: &PathBuf, vary: &str, opts: &RunOptions) -> Result<i32> {
    let (key, values_raw) = vary.split_once('=').ok_or_else(|| {
        FlowError::Config("--vary expects key=v1,v2,... (e.g. damping.gamma=1.5,2.0)".into())
    })?;
    let values: Vec<String> = values_raw
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    let config = load_config(config_path)?;
    let entries = runner::sweep(&config, key, &values, opts)?;
    let mut worst = 0;
    for entry in &entries {
        match &entry.result {
            Ok(report) => {
                let code = runner::exit_code(&Ok(report.clone()));
                println!(
                    "{}: status {:?}, checks {}",
                    entry.label,
                    report.status,
                    if report.all_passed() { "PASS" } else { "FAIL" }
                );
                worst = worst.max(code);
            }
            Err(e) => {
                println!("{}: error {e}", entry.label);
                let code = match e {
                    FlowError::Config(_) => 2,
                    FlowError::ScalingViolation { .. } => 3,
                    _ => 4,
                };
                worst = worst.max(code);
            }
        }
    }
    Ok(worst)
}
