use std::path::PathBuf;
use std::process::ExitCode;

use avgtrack::cli::{cmd_check_gains, cmd_estimate_lipschitz, cmd_run, cmd_sweep, Overrides};
use avgtrack::scenario::Scenario;
use avgtrack::sim::Mode;
use clap::{Args, Parser, Subcommand};

/// Distributed average tracking simulator.
#[derive(Parser)]
#[command(name = "avgtrack", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write a CSV log plus a text summary.
    Run {
        config: PathBuf,
        /// CSV output path; the summary goes next to it as `.summary.txt`.
        #[arg(long)]
        out: PathBuf,
        /// Run this many consecutive seeds in parallel, one file each.
        #[arg(long, value_name = "K")]
        sweep_seeds: Option<usize>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Print the gain conditions for the scenario's mode; exit 0 iff all hold.
    CheckGains {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Sample Lipschitz-like constants of one agent's drift term.
    EstimateLipschitz {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        agent: usize,
        /// Half-width of the sampled state cube (defaults to `rho_box`).
        #[arg(long)]
        half_width: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// nonlinear-filter, double-integrator, hetero-mass or filter-only.
    #[arg(long, value_parser = |s: &str| s.parse::<Mode>())]
    mode: Option<Mode>,
    /// Report violated gain conditions but run anyway.
    #[arg(long)]
    allow_invalid_gains: bool,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            dt: a.dt,
            t_end: a.t_end,
            mode: a.mode,
            allow_invalid_gains: a.allow_invalid_gains,
        }
    }
}

fn load(config: &PathBuf, overrides: OverrideArgs) -> Result<Scenario, String> {
    let mut sc = Scenario::load(config).map_err(|e| format!("{}: {e}", config.display()))?;
    Overrides::from(overrides).apply(&mut sc).map_err(|e| e.to_string())?;
    Ok(sc)
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run {
            config,
            out,
            sweep_seeds,
            overrides,
        } => {
            let sc = load(&config, overrides)?;
            match sweep_seeds {
                None => {
                    let art = cmd_run(&sc, &out).map_err(|e| e.to_string())?;
                    print!("{}", art.summary);
                    println!("wrote {} and {}", art.csv.display(), art.summary_path.display());
                    Ok(ExitCode::SUCCESS)
                }
                Some(k) => {
                    let mut failed = false;
                    for (seed, result) in cmd_sweep(&sc, &out, k) {
                        match result {
                            Ok(art) => println!(
                                "seed {seed}: terminal e_pos {:.4e}, e_vel {:.4e} -> {}",
                                art.metrics.terminal_e_pos,
                                art.metrics.terminal_e_vel,
                                art.csv.display()
                            ),
                            Err(e) => {
                                failed = true;
                                eprintln!("seed {seed}: {e}");
                            }
                        }
                    }
                    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
                }
            }
        }
        Command::CheckGains { config, overrides } => {
            let sc = load(&config, overrides)?;
            let (text, pass) = cmd_check_gains(&sc).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::EstimateLipschitz {
            config,
            agent,
            half_width,
            samples,
        } => {
            let sc = Scenario::load(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let w = half_width.unwrap_or(sc.rho_box);
            let (_, text) = cmd_estimate_lipschitz(&sc, agent, w, samples).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
