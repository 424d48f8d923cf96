use std::path::PathBuf;
use std::process::ExitCode;

use budgetopt::bve::ImpactMode;
use budgetopt::optimizer::StopReason;
use budgetopt::pipeline::{
    format_comparison, format_evaluation, load_actuals, load_allocation, run_demo, run_evaluate, run_fit,
    run_optimize, PipelineConfig, PipelineError,
};
use budgetopt::scenario::load_scenario;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Fit response surfaces, allocate a budget and evaluate the result.
#[derive(Parser)]
#[command(name = "budgetopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Linear,
    Loglinear,
}

impl From<Mode> for ImpactMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Linear => ImpactMode::Linear,
            Mode::Loglinear => ImpactMode::LogLinear,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build sparse grids and fit one shape-constrained surface per city.
    Fit {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Allocate the budget on the fitted surfaces.
    Optimize {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare two allocations.
    Evaluate {
        #[arg(long)]
        scenario: PathBuf,
        /// Old allocation; defaults to the scenario reference.
        #[arg(long)]
        old: Option<PathBuf>,
        /// New allocation; defaults to `<out>/allocation.csv`.
        #[arg(long)]
        new: Option<PathBuf>,
        /// Observed per-city outcomes (`city,actual[,weight]`).
        #[arg(long)]
        actuals: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "linear")]
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole pipeline on a synthetic scenario.
    Demo {
        #[arg(long, default_value_t = 10)]
        cities: usize,
        #[arg(long, default_value_t = 3)]
        levers: usize,
        #[arg(long, value_enum, default_value = "linear")]
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
}

fn setup(common: &Common) -> Result<PipelineConfig, PipelineError> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn stop_code(reason: StopReason) -> ExitCode {
    match reason {
        StopReason::Converged | StopReason::Forced => ExitCode::SUCCESS,
        StopReason::MaxIterations => ExitCode::from(2),
    }
}

fn run(cli: Cli) -> Result<ExitCode, PipelineError> {
    match cli.command {
        Command::Fit { scenario, common } => {
            let cfg = setup(&common)?;
            let scenario = load_scenario(&scenario)?;
            let fits = run_fit(&scenario, &cfg, &common.out)?;
            println!("fitted {} surfaces into {}", fits.len(), common.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Optimize { scenario, common } => {
            let cfg = setup(&common)?;
            let scenario = load_scenario(&scenario)?;
            let report = run_optimize(&scenario, &cfg, &common.out)?;
            println!(
                "stop: {:?} after {} iterations; objective {:.6}, penalty {:.6}, budget {:.6} of {:.6}",
                report.stop_reason,
                report.iterations,
                report.objective,
                report.penalty,
                report.allocation.total(),
                scenario.total_budget
            );
            Ok(stop_code(report.stop_reason))
        }
        Command::Evaluate {
            scenario,
            old,
            new,
            actuals,
            mode,
            common,
        } => {
            setup(&common)?;
            let scenario = load_scenario(&scenario)?;
            let a = match old {
                Some(p) => load_allocation(&p, &scenario)?,
                None => scenario.reference.clone(),
            };
            let new = new.unwrap_or_else(|| common.out.join("allocation.csv"));
            if !new.exists() {
                return Err(PipelineError::MissingInput(format!(
                    "{} not found; run `optimize` or pass --new",
                    new.display()
                )));
            }
            let b = load_allocation(&new, &scenario)?;
            let actuals = actuals.map(|p| load_actuals(&p, &scenario)).transpose()?;
            let eval = run_evaluate(&scenario, &a, &b, actuals.as_ref(), mode.into(), &common.out)?;
            print!("{}", format_evaluation(&eval));
            Ok(ExitCode::SUCCESS)
        }
        Command::Demo {
            cities,
            levers,
            mode,
            common,
        } => {
            let cfg = setup(&common)?;
            let summary = run_demo(cities, levers, &cfg, mode.into(), &common.out)?;
            print!("{}", format_comparison(&summary.comparison));
            println!();
            print!("{}", format_evaluation(&summary.evaluation));
            println!("outputs written to {}", common.out.display());
            Ok(stop_code(summary.optimize.stop_reason))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
