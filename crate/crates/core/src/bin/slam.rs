use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ltv_slam::filter::Integrator;
use ltv_slam::runner::{self, CaseSpec, RunConfig, RunMode};
use ltv_slam::sim;
use ltv_slam::SlamError;

#[derive(Parser)]
#[command(name = "slam", version, about = "Linearization-free SLAM runs, noise reports and scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an estimator over a scenario or a recorded log.
    Run(RunArgs),
    /// Monte Carlo statistics of ported bearing noise against the analytic bias.
    NoiseReport {
        /// Bearing noise standard deviation (degrees).
        #[arg(long)]
        sigma_theta: f64,
        /// Landmark range (m).
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Built-in scenarios.
    Scenarios {
        #[command(subcommand)]
        action: ScenarioAction,
    },
}

#[derive(Subcommand)]
enum ScenarioAction {
    /// List the built-in scenario names.
    List,
    /// Print a built-in scenario as JSON (a template for custom files).
    Show { name: String },
}

#[derive(clap::Args)]
struct RunArgs {
    /// local, global, dunk, coop-full, coop-partial or coop-robots.
    #[arg(long, value_parser = parse::<RunMode>)]
    mode: RunMode,
    /// Sensor case 1-5, or pinhole.
    #[arg(long, default_value = "2", value_parser = parse::<CaseSpec>)]
    case: CaseSpec,
    /// Built-in scenario name or scenario JSON file.
    #[arg(long)]
    scenario: Option<String>,
    /// Recorded log (.csv or .jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated duration override (s).
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory for trace.csv and metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    gamma_beta: f64,
    #[arg(long)]
    gamma_v: Option<f64>,
    #[arg(long)]
    gamma_omega: Option<f64>,
    /// Upper bound on landmark range used for noise porting (m).
    #[arg(long, default_value_t = 100.0)]
    r_max: f64,
    /// euler, rk4 or split.
    #[arg(long, default_value = "rk4", value_parser = parse::<Integrator>)]
    integrator: Integrator,
    /// Global mode with a velocity state driven by acceleration.
    #[arg(long)]
    second_order: bool,
    /// Axle distance for logged speed and steering (m).
    #[arg(long, default_value_t = 2.83)]
    axle: f64,
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
}

fn parse<T: std::str::FromStr<Err = SlamError>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: SlamError| e.to_string())
}

fn fail(err: SlamError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(runner::exit_code(&err) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run(a) => {
            let cfg = RunConfig {
                mode: a.mode,
                case: a.case,
                scenario: a.scenario,
                log: a.log,
                dt: a.dt,
                seed: a.seed,
                duration: a.duration,
                out: a.out,
                gamma_beta: a.gamma_beta,
                gamma_v: a.gamma_v,
                gamma_omega: a.gamma_omega,
                r_max: a.r_max,
                integrator: a.integrator,
                second_order: a.second_order,
                axle: a.axle,
                trace_every: a.trace_every,
            };
            match runner::run(&cfg) {
                Ok(m) => {
                    println!("scenario {} mode {} case {}: {} steps", m.scenario, m.mode, m.case, m.steps);
                    for (id, e) in &m.final_errors {
                        println!("  landmark {id}: final error {e:.4} m");
                    }
                    if let Some(v) = m.map_residual_rms {
                        println!("  aligned map RMS {v:.4} m");
                    }
                    if let Some(v) = m.vehicle_ate {
                        println!("  vehicle ATE {v:.4} m");
                    }
                    if let Some(c) = &m.contraction {
                        println!("  contraction rate {:.4} 1/s (R^2 {:.4})", c.rate, c.r_squared);
                    }
                    if let (Some(c), Some(h)) = (m.e_c.last(), m.e_h.last()) {
                        println!("  e_c {c:.3e}, e_h {h:.3e}, discrepancy {:.4} m", m.discrepancy.last().unwrap_or(&0.0));
                    }
                    for (id, r) in &m.trajectory_radii {
                        println!("  robot {id}: late trajectory radius {r:.3} m");
                    }
                    if let Some(i) = &m.innovation {
                        println!("  innovation RMS {:.4e} over {} rows", i.rms, i.rows);
                    }
                    println!("  wall time {:.3e} s/step", m.wall_time_per_step);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::NoiseReport { sigma_theta, r, samples, seed } => match runner::noise_report(sigma_theta, r, samples, seed) {
            Ok(rep) => match serde_json::to_string_pretty(&rep) {
                Ok(s) => {
                    println!("{s}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.into()),
            },
            Err(e) => fail(e),
        },
        Command::Scenarios { action } => match action {
            ScenarioAction::List => {
                for name in sim::SCENARIO_NAMES {
                    println!("{name}");
                }
                ExitCode::SUCCESS
            }
            ScenarioAction::Show { name } => match sim::scenario_by_name(&name) {
                Some(sc) => match serde_json::to_string_pretty(&sc) {
                    Ok(s) => {
                        println!("{s}");
                        ExitCode::SUCCESS
                    }
                    Err(e) => fail(e.into()),
                },
                None => fail(SlamError::InvalidInput(format!("unknown scenario {name:?}"))),
            },
        },
    }
}
