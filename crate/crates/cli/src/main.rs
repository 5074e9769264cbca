use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gmmq::envs::{EnvName, EnvSpec};
use gmmq::gradcheck::{self, GradcheckConfig};
use gmmq::model_io;
use gmmq::policy_iter::{evaluate_policy, run_with, EvalConfig, PiConfig};
use gmmq::suites::{
    contraction_suite, fixed_point_residual, grid_agreement, picard_suite, slln_suite,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

mod config;
mod error;
mod run;

use config::RunConfig;
use error::CliError;

const AGREEMENT_THRESHOLD: f64 = 0.60;

#[derive(Parser)]
#[command(
    name = "gmmq",
    version,
    about = "Gaussian-mixture Q-function policy iteration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Policy iteration for every seed and sweep point of a JSON config.
    Run { config: PathBuf },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Negate the mean gradient (negative control).
        #[arg(long, hide = true)]
        corrupt_sign: bool,
    },
    /// Tabular Bellman oracle checks; prints a JSON summary.
    Oracle {
        /// Pendulum model for the agreement check; trained from defaults when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid cells per state dimension for the agreement check.
        #[arg(long, default_value_t = 11)]
        resolution: usize,
    },
    /// Greedy rollouts of a saved model from resting starts.
    Eval {
        model: PathBuf,
        #[arg(long)]
        env: EnvName,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = EvalConfig::default().step_cap)]
        step_cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Gradcheck {
            seed,
            trials,
            corrupt_sign,
        } => cmd_gradcheck(seed, trials, corrupt_sign),
        Command::Oracle {
            model,
            seed,
            resolution,
        } => cmd_oracle(model, seed, resolution),
        Command::Eval {
            model,
            env,
            episodes,
            step_cap,
            seed,
        } => cmd_eval(&model, env, episodes, step_cap, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

fn cmd_run(path: &std::path::Path) -> Result<ExitCode, CliError> {
    let rc = RunConfig::load(path)?;
    run::execute(&rc)?;
    eprintln!(
        "wrote {} ({} runs)",
        rc.output_dir.display(),
        rc.sweep.len() * rc.n_seeds
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, trials: usize, corrupt_sign: bool) -> Result<ExitCode, CliError> {
    if trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let report = gradcheck::run(&GradcheckConfig {
        seed,
        trials,
        corrupt_sign,
        ..GradcheckConfig::default()
    });
    print!("{report}");
    println!(
        "{}: worst relative error {:.3e} (threshold {:.0e})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.worst(),
        gradcheck::PASS_THRESHOLD
    );
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

#[derive(Serialize)]
struct Check<T: Serialize> {
    passed: bool,
    #[serde(flatten)]
    detail: T,
}

#[derive(Serialize)]
struct Agreement {
    agreement: f64,
    threshold: f64,
    value_gap: Option<f64>,
    resolution: usize,
    model: String,
}

#[derive(Serialize)]
struct Residual {
    residual: f64,
}

#[derive(Serialize)]
struct OracleSummary<A: Serialize, B: Serialize, C: Serialize> {
    passed: bool,
    contraction: Check<A>,
    picard: Check<B>,
    fixed_point: Check<Residual>,
    slln: Check<C>,
    pendulum_agreement: Check<Agreement>,
}

fn cmd_oracle(model: Option<PathBuf>, seed: u64, resolution: usize) -> Result<ExitCode, CliError> {
    let oracle = |e: gmmq::oracle::OracleError| CliError::Runtime(e.into());
    let c = contraction_suite(seed, 100).map_err(oracle)?;
    let p = picard_suite(seed, 100).map_err(oracle)?;
    let residual = fixed_point_residual(seed).map_err(oracle)?;
    let s = slln_suite(seed, &[1_000, 10_000, 100_000], 20).map_err(oracle)?;

    let cfg = PiConfig {
        seed,
        ..PiConfig::defaults_for(EnvName::Pendulum)
    };
    let (gmm, source) = match model {
        Some(path) => (
            model_io::load(&path).with_context(|| format!("loading {}", path.display()))?,
            path.display().to_string(),
        ),
        None => {
            let out = run_with(&cfg, |_| {}).context("training the pendulum model")?;
            (
                out.model,
                format!("trained: pendulum defaults, seed {seed}"),
            )
        }
    };
    let cmp = grid_agreement(&cfg.env, &gmm, cfg.discount, resolution, 16, seed).map_err(oracle)?;

    let summary = OracleSummary {
        passed: false,
        contraction: Check {
            passed: c.passed(),
            detail: c,
        },
        picard: Check {
            passed: p.passed(),
            detail: p,
        },
        fixed_point: Check {
            passed: residual <= 10.0 * gmmq::oracle::FIXED_POINT_TOL,
            detail: Residual { residual },
        },
        slln: Check {
            passed: s.monotone(),
            detail: s,
        },
        pendulum_agreement: Check {
            passed: cmp.agreement >= AGREEMENT_THRESHOLD,
            detail: Agreement {
                agreement: cmp.agreement,
                threshold: AGREEMENT_THRESHOLD,
                value_gap: cmp.value_gap,
                resolution,
                model: source,
            },
        },
    };
    let passed = summary.contraction.passed
        && summary.picard.passed
        && summary.fixed_point.passed
        && summary.slln.passed
        && summary.pendulum_agreement.passed;
    let summary = OracleSummary { passed, ..summary };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).context("serializing summary")?
    );
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_eval(
    path: &std::path::Path,
    env: EnvName,
    episodes: usize,
    step_cap: usize,
    seed: u64,
) -> Result<ExitCode, CliError> {
    if episodes == 0 || step_cap == 0 {
        return Err(CliError::Config(
            "--episodes and --step-cap must be at least 1".into(),
        ));
    }
    let model =
        model_io::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let spec = EnvSpec::preset(env);
    let expected = spec.input_dim(model.layout());
    let fits_actions = match model.layout() {
        gmmq::WeightLayout::Shared => true,
        gmmq::WeightLayout::PerAction { n_actions } => n_actions == spec.n_actions(),
    };
    if model.dim() != expected || !fits_actions {
        return Err(CliError::Config(format!(
            "model (input dim {}, {} weight rows) does not fit {env} (input dim {expected}, {} actions)",
            model.dim(),
            model.layout().weight_rows(),
            spec.n_actions()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = evaluate_policy(
        &spec,
        &model,
        &EvalConfig {
            step_cap,
            eval_episodes: episodes,
        },
        &mut rng,
    );
    for s in steps {
        println!("{s}");
    }
    Ok(ExitCode::SUCCESS)
}
