//! Command implementations behind the `avgtrack` binary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::dynamics::{estimate_lipschitz, GainReport, LipschitzBounds, Nonlinearity, StateBox};
use crate::graph::SpectralSummary;
use crate::scenario::{NonlinearitySpec, RunOutput, Scenario, ScenarioError};
use crate::sim::{Metrics, Mode};

/// Command-line overrides applied on top of a loaded scenario.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub mode: Option<Mode>,
    pub allow_invalid_gains: bool,
}

impl Overrides {
    pub fn apply(&self, scenario: &mut Scenario) -> Result<(), ScenarioError> {
        if let Some(seed) = self.seed {
            scenario.sim.seed = seed;
        }
        if let Some(dt) = self.dt {
            scenario.sim.dt = dt;
        }
        if let Some(t_end) = self.t_end {
            scenario.sim.t_end = t_end;
        }
        if let Some(mode) = self.mode {
            scenario.mode = mode;
        }
        if self.allow_invalid_gains {
            scenario.allow_invalid_gains = true;
        }
        scenario.validate()
    }
}

/// What `run` wrote.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub csv: PathBuf,
    pub summary_path: PathBuf,
    pub summary: String,
    pub metrics: Metrics,
}

/// `run.csv` → `run.summary.txt`.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.txt")
}

/// `run.csv` with seed 7 → `run_seed7.csv`.
pub fn sweep_path(out: &Path, seed: u64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    out.with_file_name(format!("{stem}_seed{seed}.{ext}"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Simulate, then write the CSV log and a text summary next to it.
pub fn cmd_run(scenario: &Scenario, out: &Path) -> Result<RunArtifacts, ScenarioError> {
    let output = scenario.run()?;
    let file = File::create(out).map_err(io_err(out))?;
    output.log.write_csv(BufWriter::new(file)).map_err(io_err(out))?;
    let summary = format_summary(scenario, &output);
    let summary_path = summary_path(out);
    std::fs::write(&summary_path, &summary).map_err(io_err(&summary_path))?;
    Ok(RunArtifacts {
        csv: out.to_path_buf(),
        summary_path,
        summary,
        metrics: output.log.metrics(),
    })
}

/// Run seeds `base, base+1, …, base+count−1` in parallel, one output file
/// per seed. Results come back in seed order.
pub fn cmd_sweep(scenario: &Scenario, out: &Path, count: usize) -> Vec<(u64, Result<RunArtifacts, ScenarioError>)> {
    let base = scenario.sim.seed;
    let seeds: Vec<u64> = (0..count as u64).map(|k| base + k).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut sc = scenario.clone();
                sc.sim.seed = seed;
                let path = sweep_path(out, seed);
                scope.spawn(move || (seed, cmd_run(&sc, &path)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

/// Gain report text and whether every constraint holds.
pub fn cmd_check_gains(scenario: &Scenario) -> Result<(String, bool), ScenarioError> {
    let (report, spectral) = scenario.gain_report()?;
    Ok((format_gain_report(&report, &spectral), report.pass()))
}

/// Sampled Lipschitz-like constants of the scenario's drift for agent
/// `agent` (1-based) on a cube of half-width `half_width`.
pub fn cmd_estimate_lipschitz(
    scenario: &Scenario,
    agent: usize,
    half_width: f64,
    samples: usize,
) -> Result<(LipschitzBounds, String), ScenarioError> {
    if agent == 0 || agent > scenario.n {
        return Err(ScenarioError::Invalid(format!(
            "agent {agent} outside 1..={}",
            scenario.n
        )));
    }
    let f = match scenario.nonlinearity {
        NonlinearitySpec::Chua => Nonlinearity::Chua { agent },
        _ => {
            let (system, _) = scenario.build()?;
            system.nonlinearities[agent - 1].clone()
        }
    };
    let region = StateBox::cube(scenario.dim, half_width, scenario.sim.t_end);
    let bounds = estimate_lipschitz(&f, &region, samples, scenario.sim.seed)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "sampled bounds for agent {agent} on |x|, |v| <= {half_width}, t in [0, {}], {samples} pairs:",
        scenario.sim.t_end
    );
    for (name, v) in [("rho1", bounds.rho1), ("rho2", bounds.rho2), ("rho3", bounds.rho3), ("rho4", bounds.rho4)] {
        let _ = writeln!(text, "  {name} = {v:.6}");
    }
    let configured = scenario.rho_resolved();
    let _ = writeln!(
        text,
        "configured: rho1 = {}, rho2 = {}, rho3 = {}, rho4 = {}",
        configured.rho1, configured.rho2, configured.rho3, configured.rho4
    );
    Ok((bounds, text))
}

pub fn format_gain_report(report: &GainReport, spectral: &SpectralSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "conditions for {}", report.condition.describe());
    let _ = writeln!(
        s,
        "lambda_2 = {:.6}, lambda_max = {:.6}, lambda_max^2/(2 lambda_2^2) = {:.6}",
        spectral.lambda2, spectral.lambda_max, report.kappa_threshold
    );
    for c in &report.constraints {
        let _ = writeln!(
            s,
            "  [{}] {:<44} value {:<12} threshold {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            format!("{}", c.value),
            c.threshold
        );
    }
    let _ = writeln!(s, "overall: {}", if report.pass() { "PASS" } else { "FAIL" });
    s
}

pub fn format_summary(scenario: &Scenario, output: &RunOutput) -> String {
    let log = &output.log;
    let m = log.metrics();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "mode {}, n = {}, dim = {}, seed {}",
        scenario.mode.name(),
        scenario.n,
        scenario.dim,
        scenario.sim.seed
    );
    let _ = writeln!(
        s,
        "integrator {}, dt = {}, t_end = {}, {} rows (stride {})",
        scenario.sim.integrator,
        scenario.sim.dt,
        scenario.sim.t_end,
        log.len(),
        scenario.sim.record_stride
    );
    s.push('\n');
    let _ = writeln!(s, "terminal e_pos (mean over last 10%): {:.6e}", m.terminal_e_pos);
    let _ = writeln!(s, "terminal e_vel (mean over last 10%): {:.6e}", m.terminal_e_vel);
    let _ = writeln!(s, "final e_pos: {:.6e}, final e_vel: {:.6e}", m.final_e_pos, m.final_e_vel);
    match m.decay_fit {
        Some(fit) => {
            let _ = writeln!(
                s,
                "consensus decay fit: slope {:.4} per s, R^2 {:.4}, window [{}, {}] s",
                fit.slope, fit.r2, fit.t_start, fit.t_end
            );
        }
        None => {
            let _ = writeln!(s, "consensus decay fit: n/a (no initial filter disagreement)");
        }
    }
    let _ = writeln!(s, "max relative residual of summed switching terms: {:.3e}", m.max_coupling_residual);
    let _ = writeln!(
        s,
        "chattering: max sign flips per edge {} over {} steps; per edge {:?}",
        m.max_edge_sign_flips,
        scenario.sim.steps(),
        log.edge_sign_flips
    );
    s.push('\n');
    s.push_str(&format_gain_report(&output.report, &output.spectral));
    if !output.report.pass() {
        s.push_str("run proceeded with violated gain conditions\n");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_paths() {
        let out = Path::new("/tmp/runs/paper.csv");
        assert_eq!(summary_path(out), Path::new("/tmp/runs/paper.summary.txt"));
        assert_eq!(sweep_path(out, 3), Path::new("/tmp/runs/paper_seed3.csv"));
    }

    #[test]
    fn overrides_apply() {
        let mut sc = Scenario::paper();
        Overrides {
            seed: Some(9),
            dt: Some(5e-4),
            t_end: Some(2.0),
            mode: Some(Mode::DoubleIntegrator),
            allow_invalid_gains: false,
        }
        .apply(&mut sc)
        .unwrap();
        assert_eq!((sc.sim.seed, sc.sim.dt, sc.sim.t_end, sc.mode), (9, 5e-4, 2.0, Mode::DoubleIntegrator));
        assert!(Overrides {
            dt: Some(-1.0),
            ..Overrides::default()
        }
        .apply(&mut sc)
        .is_err());
    }

    #[test]
    fn gain_report_text_flags_violation() {
        let sc = Scenario {
            topology: crate::scenario::TopologySpec::Path,
            nonlinearity: NonlinearitySpec::Zero,
            ..Scenario::paper()
        };
        let (text, pass) = cmd_check_gains(&sc).unwrap();
        assert!(!pass);
        assert!(text.contains("[FAIL] kappa > max{1, lambda_max^2/(2 lambda_2^2)}"), "{text}");
        assert!(text.contains("16.985"), "{text}");
        assert!(text.contains("[PASS] beta > kappa"), "{text}");
    }
}
