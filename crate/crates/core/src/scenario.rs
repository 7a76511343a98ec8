//! Declarative scenario files.
//!
//! The format is line oriented: `key = value` pairs, `#` comments, and two
//! optional sections. `[edges]` lists one undirected edge per line as two
//! 1-based agent indices; `[accel]` lists acceleration channels as
//! `agent dim constant sin_amp sin_freq cos_amp cos_freq ramp`.
//!
//! ```text
//! preset = paper
//! topology = edges
//! kappa = 20
//!
//! [edges]
//! 1 2
//! 2 3
//! 3 4
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::{
    check_gains_corollary, check_gains_filter, check_gains_theorem1, check_gains_theorem2, chua_rho_bound, AgentState,
    DynamicsError, FilterState, GainReport, GainSet, LipschitzBounds, Nonlinearity, SignMode,
};
use crate::graph::{spectral, GraphError, SpectralSummary, Topology};
use crate::ode::Integrator;
use crate::signals::{AccelComponent, AccelProfile, Vector};
use crate::sim::{ClosedLoop, Mode, SimConfig, SimError, TrajectoryLog, World};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gains(#[from] DynamicsError),
    #[error("gain conditions violated: {0} (pass --allow-invalid-gains to run anyway)")]
    InvalidGains(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Complete,
    Path,
    Ring,
    Star,
    /// Explicit 1-based edge list from the `[edges]` section.
    Edges(Vec<(usize, usize)>),
}

impl TopologySpec {
    fn name(&self) -> &'static str {
        match self {
            TopologySpec::Complete => "complete",
            TopologySpec::Path => "path",
            TopologySpec::Ring => "ring",
            TopologySpec::Star => "star",
            TopologySpec::Edges(_) => "edges",
        }
    }

    pub fn build(&self, n: usize) -> Result<Topology, GraphError> {
        match self {
            TopologySpec::Complete => Topology::complete(n),
            TopologySpec::Path => Topology::path(n),
            TopologySpec::Ring => Topology::ring(n),
            TopologySpec::Star => Topology::star(n),
            TopologySpec::Edges(edges) => Topology::new(n, edges),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearitySpec {
    Chua,
    Zero,
    /// `f(x, v) = kx·x + kv·v + bias·1` componentwise.
    Linear { kx: f64, kv: f64, bias: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalSpec {
    /// The three-dimensional benchmark accelerations.
    Paper,
    Zero,
    /// Channels from the `[accel]` section; unlisted channels are zero.
    Table(BTreeMap<(usize, usize), AccelComponent>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoSpec {
    /// Derived from the nonlinearity (analytic bound for Chua on
    /// `±rho_box`, exact for linear and zero drift).
    Auto,
    Fixed(LipschitzBounds),
}

/// How the filter states start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterInit {
    #[default]
    Zero,
    /// Uniform in `±init_range`, drawn after the agent states.
    Random,
    /// On the agent's own reference.
    Reference,
}

/// A fully resolved simulation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub dim: usize,
    pub mode: Mode,
    pub topology: TopologySpec,
    pub nonlinearity: NonlinearitySpec,
    pub signals: SignalSpec,
    pub kappa: f64,
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub rho: RhoSpec,
    /// Velocity half-width used by the automatic Chua bound.
    pub rho_box: f64,
    pub masses: Vec<f64>,
    pub mbar: Option<f64>,
    pub sim: SimConfig,
    /// Random initial agent states are uniform in `±init_range`.
    pub init_range: f64,
    pub filter_init: FilterInit,
    pub sign: SignMode,
    pub allow_invalid_gains: bool,
    /// Per-agent (1-based) initial value overrides.
    pub x0: BTreeMap<usize, Vec<f64>>,
    pub v0: BTreeMap<usize, Vec<f64>>,
    pub r0: BTreeMap<usize, Vec<f64>>,
    pub vr0: BTreeMap<usize, Vec<f64>>,
}

impl Default for Scenario {
    fn default() -> Self {
        let gains = GainSet::paper();
        Self {
            n: 4,
            dim: 3,
            mode: Mode::NonlinearFilter,
            topology: TopologySpec::Complete,
            nonlinearity: NonlinearitySpec::Chua,
            signals: SignalSpec::Paper,
            kappa: gains.kappa,
            beta: gains.beta,
            eta: gains.eta,
            gamma: gains.gamma,
            rho: RhoSpec::Auto,
            rho_box: 10.0,
            masses: vec![1.0; 4],
            mbar: None,
            sim: SimConfig::default(),
            init_range: 10.0,
            filter_init: FilterInit::Zero,
            sign: SignMode::Exact,
            allow_invalid_gains: false,
            x0: BTreeMap::new(),
            v0: BTreeMap::new(),
            r0: BTreeMap::new(),
            vr0: BTreeMap::new(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["paper", "paper-double-integrator", "paper-hetero-mass"];

/// Resolved output of [`Scenario::run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    pub report: GainReport,
    pub spectral: SpectralSummary,
    pub gains: GainSet,
}

impl Scenario {
    /// The benchmark network: four Chua-type agents on K₄ with the
    /// benchmark accelerations and gains. The analytic drift bounds exceed
    /// what `η = 5` covers, so gain violations are reported but tolerated.
    pub fn paper() -> Self {
        Self {
            allow_invalid_gains: true,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::paper();
        match name {
            "paper" => Some(base),
            "paper-double-integrator" => Some(Self {
                mode: Mode::DoubleIntegrator,
                nonlinearity: NonlinearitySpec::Zero,
                allow_invalid_gains: false,
                ..base
            }),
            "paper-hetero-mass" => Some(Self {
                mode: Mode::HeteroMass,
                nonlinearity: NonlinearitySpec::Zero,
                masses: vec![1.0, 2.0, 3.0, 4.0],
                mbar: Some(4.0),
                allow_invalid_gains: false,
                ..base
            }),
            _ => None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let parsed = RawConfig::read(text)?;
        let mut sc = match parsed.values.get("preset") {
            Some((line, name)) => Self::preset(name).ok_or_else(|| ScenarioError::Parse {
                line: *line,
                message: format!("unknown preset `{name}` (expected one of {})", PRESETS.join(", ")),
            })?,
            None => Self::default(),
        };
        let mut masses_set = false;
        let mut edges_line = None;
        for (key, (line, value)) in &parsed.values {
            let line = *line;
            let err = |message: String| ScenarioError::Parse { line, message };
            let num = || parse_f64(value).map_err(|m| err(format!("{key}: {m}")));
            let int = || {
                value
                    .parse::<u64>()
                    .map_err(|_| err(format!("{key}: expected a non-negative integer, got `{value}`")))
            };
            match key.as_str() {
                "preset" => {}
                "n" => sc.n = int()? as usize,
                "dim" => sc.dim = int()? as usize,
                "mode" => sc.mode = value.parse().map_err(err)?,
                "topology" => {
                    edges_line = Some(line);
                    sc.topology = match value.as_str() {
                        "complete" => TopologySpec::Complete,
                        "path" => TopologySpec::Path,
                        "ring" => TopologySpec::Ring,
                        "star" => TopologySpec::Star,
                        "edges" => TopologySpec::Edges(Vec::new()),
                        other => {
                            return Err(err(format!(
                                "unknown topology `{other}` (expected complete, path, ring, star or edges)"
                            )))
                        }
                    }
                }
                "nonlinearity" => {
                    sc.nonlinearity = match value.as_str() {
                        "chua" => NonlinearitySpec::Chua,
                        "zero" => NonlinearitySpec::Zero,
                        "linear" => NonlinearitySpec::Linear {
                            kx: 0.0,
                            kv: 0.0,
                            bias: 0.0,
                        },
                        other => return Err(err(format!("unknown nonlinearity `{other}` (expected chua, zero or linear)"))),
                    }
                }
                "f_kx" | "f_kv" | "f_bias" => {}
                "signals" => {
                    sc.signals = match value.as_str() {
                        "paper" => SignalSpec::Paper,
                        "zero" => SignalSpec::Zero,
                        "table" => SignalSpec::Table(BTreeMap::new()),
                        other => return Err(err(format!("unknown signals `{other}` (expected paper, zero or table)"))),
                    }
                }
                "kappa" => sc.kappa = num()?,
                "beta" => sc.beta = num()?,
                "eta" => sc.eta = num()?,
                "gamma" => sc.gamma = num()?,
                "rho" => {
                    if value == "auto" {
                        sc.rho = RhoSpec::Auto;
                    } else {
                        let v = parse_list(value).map_err(|m| err(format!("rho: {m}")))?;
                        if v.len() != 4 {
                            return Err(err(format!("rho: expected `auto` or four numbers, got {}", v.len())));
                        }
                        sc.rho = RhoSpec::Fixed(LipschitzBounds {
                            rho1: v[0],
                            rho2: v[1],
                            rho3: v[2],
                            rho4: v[3],
                        });
                    }
                }
                "rho_box" => sc.rho_box = num()?,
                "masses" => {
                    sc.masses = parse_list(value).map_err(|m| err(format!("masses: {m}")))?;
                    masses_set = true;
                }
                "mbar" => sc.mbar = if value == "none" { None } else { Some(num()?) },
                "dt" => sc.sim.dt = num()?,
                "t_end" => sc.sim.t_end = num()?,
                "integrator" => sc.sim.integrator = value.parse::<Integrator>().map_err(err)?,
                "seed" => sc.sim.seed = int()?,
                "record_stride" => sc.sim.record_stride = int()? as usize,
                "init_range" => sc.init_range = num()?,
                "filter_init" => {
                    sc.filter_init = match value.as_str() {
                        "zero" => FilterInit::Zero,
                        "random" => FilterInit::Random,
                        "reference" => FilterInit::Reference,
                        other => return Err(err(format!("unknown filter_init `{other}` (expected zero, random or reference)"))),
                    }
                }
                "sign" => {
                    sc.sign = match value.as_str() {
                        "exact" => SignMode::Exact,
                        "smooth" => SignMode::BoundaryLayer { eps: 1e-3 },
                        other => return Err(err(format!("unknown sign `{other}` (expected exact or smooth)"))),
                    }
                }
                "sign_eps" => {}
                "allow_invalid_gains" => {
                    sc.allow_invalid_gains = match value.as_str() {
                        "true" => true,
                        "false" => false,
                        other => return Err(err(format!("allow_invalid_gains: expected true or false, got `{other}`"))),
                    }
                }
                other => {
                    let (field, agent) = split_agent_key(other).ok_or_else(|| err(format!("unknown key `{other}`")))?;
                    let values = parse_list(value).map_err(|m| err(format!("{other}: {m}")))?;
                    let target = match field {
                        "x0" => &mut sc.x0,
                        "v0" => &mut sc.v0,
                        "r0" => &mut sc.r0,
                        "vr0" => &mut sc.vr0,
                        _ => unreachable!(),
                    };
                    target.insert(agent, values);
                }
            }
        }

        // Keys that refine another key's choice.
        if let NonlinearitySpec::Linear { kx, kv, bias } = &mut sc.nonlinearity {
            for (key, slot) in [("f_kx", kx), ("f_kv", kv), ("f_bias", bias)] {
                if let Some((line, value)) = parsed.values.get(key) {
                    *slot = parse_f64(value).map_err(|m| ScenarioError::Parse {
                        line: *line,
                        message: format!("{key}: {m}"),
                    })?;
                }
            }
        } else if let Some((line, _)) = ["f_kx", "f_kv", "f_bias"].iter().find_map(|k| parsed.values.get(*k)) {
            return Err(ScenarioError::Parse {
                line: *line,
                message: "f_kx, f_kv and f_bias require nonlinearity = linear".into(),
            });
        }
        if let Some((line, value)) = parsed.values.get("sign_eps") {
            let eps = parse_f64(value).map_err(|m| ScenarioError::Parse {
                line: *line,
                message: format!("sign_eps: {m}"),
            })?;
            match &mut sc.sign {
                SignMode::BoundaryLayer { eps: e } => *e = eps,
                SignMode::Exact => {
                    return Err(ScenarioError::Parse {
                        line: *line,
                        message: "sign_eps requires sign = smooth".into(),
                    })
                }
            }
        }
        if !masses_set && sc.masses.len() != sc.n {
            sc.masses = vec![1.0; sc.n];
        }

        match (&mut sc.topology, parsed.edges) {
            (TopologySpec::Edges(list), Some(rows)) => {
                for (line, a, b) in rows {
                    if a == 0 || b == 0 || a > sc.n || b > sc.n {
                        return Err(ScenarioError::Parse {
                            line,
                            message: format!("edge ({a}, {b}) references an agent outside 1..={}", sc.n),
                        });
                    }
                    list.push((a, b));
                }
            }
            (TopologySpec::Edges(_), None) => {
                return Err(ScenarioError::Parse {
                    line: edges_line.unwrap_or(0),
                    message: "topology = edges needs an [edges] section".into(),
                })
            }
            (_, Some(rows)) => {
                return Err(ScenarioError::Parse {
                    line: rows.first().map_or(0, |r| r.0),
                    message: "[edges] section requires topology = edges".into(),
                })
            }
            (_, None) => {}
        }

        match (&mut sc.signals, parsed.accel) {
            (SignalSpec::Table(table), Some(rows)) => {
                for (line, row) in rows {
                    let (agent, d, c) = row;
                    if agent == 0 || agent > sc.n || d == 0 || d > sc.dim {
                        return Err(ScenarioError::Parse {
                            line,
                            message: format!("accel channel ({agent}, {d}) outside agents 1..={} and dims 1..={}", sc.n, sc.dim),
                        });
                    }
                    table.insert((agent, d), c);
                }
            }
            (SignalSpec::Table(_), None) => {}
            (_, Some(rows)) => {
                return Err(ScenarioError::Parse {
                    line: rows.first().map_or(0, |r| r.0),
                    message: "[accel] section requires signals = table".into(),
                })
            }
            (_, None) => {}
        }

        sc.validate()?;
        Ok(sc)
    }

    /// Structural checks that do not need the spectrum.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if self.n == 0 {
            return invalid("n must be at least 1".into());
        }
        if self.dim == 0 {
            return invalid("dim must be at least 1".into());
        }
        if matches!(self.signals, SignalSpec::Paper) && self.dim != 3 {
            return invalid(format!("signals = paper is three-dimensional but dim = {}", self.dim));
        }
        if matches!(self.nonlinearity, NonlinearitySpec::Chua) && self.dim != 3 && self.mode == Mode::NonlinearFilter {
            return invalid(format!("nonlinearity = chua is three-dimensional but dim = {}", self.dim));
        }
        if self.masses.len() != self.n {
            return invalid(format!("masses lists {} values for n = {}", self.masses.len(), self.n));
        }
        if let Some(m) = self.masses.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return invalid(format!("masses must be positive, got {m}"));
        }
        if let Some(mbar) = self.mbar {
            if let Some(m) = self.masses.iter().find(|m| **m > mbar) {
                return invalid(format!("mass {m} exceeds mbar = {mbar}"));
            }
        }
        for (name, v) in [("kappa", self.kappa), ("beta", self.beta), ("eta", self.eta), ("gamma", self.gamma)] {
            if !v.is_finite() {
                return invalid(format!("{name} must be finite, got {v}"));
            }
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return invalid(format!("init_range must be non-negative, got {}", self.init_range));
        }
        if let SignMode::BoundaryLayer { eps } = self.sign {
            if !(eps > 0.0) {
                return invalid(format!("sign_eps must be positive, got {eps}"));
            }
        }
        for (name, map) in [("x0", &self.x0), ("v0", &self.v0), ("r0", &self.r0), ("vr0", &self.vr0)] {
            for (agent, values) in map {
                if *agent == 0 || *agent > self.n {
                    return invalid(format!("{name}_{agent} names an agent outside 1..={}", self.n));
                }
                if values.len() != self.dim {
                    return invalid(format!("{name}_{agent} has {} components, dim = {}", values.len(), self.dim));
                }
            }
        }
        self.sim.validate()?;
        let topology = self.topology.build(self.n)?;
        let spec = spectral(&topology);
        if !spec.is_connected {
            return invalid(format!("graph is disconnected (lambda_2 = {:.3e})", spec.lambda2));
        }
        Ok(())
    }

    pub fn mbar_resolved(&self) -> f64 {
        self.mbar.unwrap_or_else(|| self.masses.iter().copied().fold(0.0, f64::max))
    }

    pub fn rho_resolved(&self) -> LipschitzBounds {
        match self.rho {
            RhoSpec::Fixed(b) => b,
            RhoSpec::Auto => match self.nonlinearity {
                NonlinearitySpec::Chua => chua_rho_bound(self.n, self.rho_box),
                NonlinearitySpec::Zero => LipschitzBounds::default(),
                NonlinearitySpec::Linear { kx, kv, bias } => LipschitzBounds {
                    rho1: kx.abs(),
                    rho2: kv.abs(),
                    rho3: 0.0,
                    rho4: bias.abs() * self.dim as f64,
                },
            },
        }
    }

    pub fn gains(&self) -> GainSet {
        GainSet {
            kappa: self.kappa,
            beta: self.beta,
            eta: self.eta,
            gamma: self.gamma,
            rho: self.rho_resolved(),
            mbar: (self.mode == Mode::HeteroMass).then(|| self.mbar_resolved()),
        }
    }

    pub fn topology(&self) -> Result<Topology, ScenarioError> {
        Ok(self.topology.build(self.n)?)
    }

    /// The gain conditions that apply to this scenario's mode.
    pub fn gain_report(&self) -> Result<(GainReport, SpectralSummary), ScenarioError> {
        let spec = spectral(&self.topology()?);
        let gains = self.gains();
        let report = match self.mode {
            Mode::NonlinearFilter => check_gains_theorem1(&gains, &spec)?,
            Mode::DoubleIntegrator => check_gains_theorem2(&gains, &spec)?,
            Mode::HeteroMass => check_gains_corollary(&gains, &spec)?,
            Mode::FilterOnly => check_gains_filter(&gains, &spec)?,
        };
        Ok((report, spec))
    }

    pub fn accel_profiles(&self) -> Vec<AccelProfile> {
        (1..=self.n)
            .map(|i| match &self.signals {
                SignalSpec::Paper => AccelProfile::paper(i),
                SignalSpec::Zero => AccelProfile::zero(self.dim),
                SignalSpec::Table(table) => AccelProfile {
                    components: (1..=self.dim)
                        .map(|d| table.get(&(i, d)).copied().unwrap_or_default())
                        .collect(),
                },
            })
            .collect()
    }

    fn nonlinearities(&self) -> Vec<Nonlinearity> {
        (1..=self.n)
            .map(|i| match self.nonlinearity {
                NonlinearitySpec::Chua => Nonlinearity::Chua { agent: i },
                NonlinearitySpec::Zero => Nonlinearity::Zero,
                NonlinearitySpec::Linear { kx, kv, bias } => Nonlinearity::Linear {
                    kx: DMatrix::from_diagonal_element(self.dim, self.dim, kx),
                    kv: DMatrix::from_diagonal_element(self.dim, self.dim, kv),
                    bias: Vector::from_element(self.dim, bias),
                },
            })
            .collect()
    }

    /// The closed loop and its seeded initial state.
    pub fn build(&self) -> Result<(ClosedLoop, World), ScenarioError> {
        self.validate()?;
        let system = ClosedLoop {
            topology: self.topology()?,
            mode: self.mode,
            dim: self.dim,
            gains: self.gains(),
            sign: self.sign,
            accel: self.accel_profiles(),
            nonlinearities: self.nonlinearities(),
            masses: if self.mode == Mode::HeteroMass {
                self.masses.clone()
            } else {
                vec![1.0; self.n]
            },
        };
        Ok((system, self.initial_world()))
    }

    /// Seeded initial state. Agent states are drawn first, in agent order,
    /// so the same seed gives the same agents whatever the filter setting.
    pub fn initial_world(&self) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sim.seed);
        let range = self.init_range;
        let draw = |rng: &mut ChaCha8Rng| {
            Vector::from_fn(self.dim, |_, _| if range > 0.0 { rng.gen_range(-range..=range) } else { 0.0 })
        };
        let pick = |map: &BTreeMap<usize, Vec<f64>>, i: usize, fallback: Vector| {
            map.get(&(i + 1)).map_or(fallback, |v| Vector::from_column_slice(v))
        };
        let mut world = World::new(self.n, self.dim);
        let agents: Vec<AgentState> = (0..self.n)
            .map(|i| {
                let x = draw(&mut rng);
                let v = draw(&mut rng);
                AgentState::new(pick(&self.x0, i, x), pick(&self.v0, i, v))
            })
            .collect();
        for (i, agent) in agents.iter().enumerate() {
            let r = pick(&self.r0, i, Vector::zeros(self.dim));
            let vr = pick(&self.vr0, i, Vector::zeros(self.dim));
            let filter = if !self.mode.uses_filter() {
                FilterState::new(agent.x.clone(), agent.v.clone())
            } else {
                match self.filter_init {
                    FilterInit::Zero => FilterState::zeros(self.dim),
                    FilterInit::Random => FilterState::new(draw(&mut rng), draw(&mut rng)),
                    FilterInit::Reference => FilterState::new(r.clone(), vr.clone()),
                }
            };
            world.set_reference(i, &r, &vr);
            world.set_agent(i, agent);
            world.set_filter(i, &filter);
        }
        world
    }

    /// Check gains, then simulate.
    pub fn run(&self) -> Result<RunOutput, ScenarioError> {
        let (report, spectral) = self.gain_report()?;
        if !report.pass() && !self.allow_invalid_gains {
            let list: Vec<String> = report
                .violations()
                .map(|c| format!("{} ({} vs {})", c.name, c.value, c.threshold))
                .collect();
            return Err(ScenarioError::InvalidGains(list.join("; ")));
        }
        let (system, world) = self.build()?;
        let log = system.simulate(world, &self.sim)?;
        Ok(RunOutput {
            log,
            report,
            spectral,
            gains: system.gains,
        })
    }

    /// Serialize every field; [`Scenario::parse`] reads it back unchanged.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("n", self.n.to_string());
        kv("dim", self.dim.to_string());
        kv("mode", self.mode.name().into());
        kv("topology", self.topology.name().into());
        match self.nonlinearity {
            NonlinearitySpec::Chua => kv("nonlinearity", "chua".into()),
            NonlinearitySpec::Zero => kv("nonlinearity", "zero".into()),
            NonlinearitySpec::Linear { kx, kv: kvel, bias } => {
                kv("nonlinearity", "linear".into());
                kv("f_kx", kx.to_string());
                kv("f_kv", kvel.to_string());
                kv("f_bias", bias.to_string());
            }
        }
        kv(
            "signals",
            match self.signals {
                SignalSpec::Paper => "paper",
                SignalSpec::Zero => "zero",
                SignalSpec::Table(_) => "table",
            }
            .into(),
        );
        kv("kappa", self.kappa.to_string());
        kv("beta", self.beta.to_string());
        kv("eta", self.eta.to_string());
        kv("gamma", self.gamma.to_string());
        match self.rho {
            RhoSpec::Auto => kv("rho", "auto".into()),
            RhoSpec::Fixed(b) => kv("rho", join(&[b.rho1, b.rho2, b.rho3, b.rho4])),
        }
        kv("rho_box", self.rho_box.to_string());
        kv("masses", join(&self.masses));
        kv("mbar", self.mbar.map_or("none".into(), |m| m.to_string()));
        kv("dt", self.sim.dt.to_string());
        kv("t_end", self.sim.t_end.to_string());
        kv("integrator", self.sim.integrator.name().into());
        kv("seed", self.sim.seed.to_string());
        kv("record_stride", self.sim.record_stride.to_string());
        kv("init_range", self.init_range.to_string());
        kv(
            "filter_init",
            match self.filter_init {
                FilterInit::Zero => "zero",
                FilterInit::Random => "random",
                FilterInit::Reference => "reference",
            }
            .into(),
        );
        match self.sign {
            SignMode::Exact => kv("sign", "exact".into()),
            SignMode::BoundaryLayer { eps } => {
                kv("sign", "smooth".into());
                kv("sign_eps", eps.to_string());
            }
        }
        kv("allow_invalid_gains", self.allow_invalid_gains.to_string());
        for (name, map) in [("x0", &self.x0), ("v0", &self.v0), ("r0", &self.r0), ("vr0", &self.vr0)] {
            for (agent, values) in map {
                kv(&format!("{name}_{agent}"), join(values));
            }
        }
        if let TopologySpec::Edges(edges) = &self.topology {
            out.push_str("\n[edges]\n");
            for (a, b) in edges {
                let _ = writeln!(out, "{a} {b}");
            }
        }
        if let SignalSpec::Table(table) = &self.signals {
            out.push_str("\n[accel]\n");
            for ((agent, d), c) in table {
                let _ = writeln!(
                    out,
                    "{agent} {d} {} {} {} {} {} {}",
                    c.constant, c.sin_amp, c.sin_freq, c.cos_amp, c.cos_freq, c.ramp
                );
            }
        }
        out
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("expected a number, got `{}`", s.trim()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, got `{}`", s.trim()))
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(parse_f64)
        .collect()
}

/// `x0_3` → `("x0", 3)`.
fn split_agent_key(key: &str) -> Option<(&'static str, usize)> {
    let (field, idx) = key.rsplit_once('_')?;
    let field = ["x0", "v0", "r0", "vr0"].into_iter().find(|f| *f == field)?;
    Some((field, idx.parse().ok()?))
}

type AccelRow = (usize, usize, AccelComponent);

/// Tokenized file: top-level keys with their line numbers, plus the raw
/// section rows.
struct RawConfig {
    values: BTreeMap<String, (usize, String)>,
    edges: Option<Vec<(usize, usize, usize)>>,
    accel: Option<Vec<(usize, AccelRow)>>,
}

impl RawConfig {
    fn read(text: &str) -> Result<Self, ScenarioError> {
        #[derive(PartialEq)]
        enum Section {
            Top,
            Edges,
            Accel,
        }
        let mut section = Section::Top;
        let mut raw = RawConfig {
            values: BTreeMap::new(),
            edges: None,
            accel: None,
        };
        for (idx, full) in text.lines().enumerate() {
            let line = idx + 1;
            let content = full.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScenarioError::Parse { line, message };
            if content.starts_with('[') {
                section = match content {
                    "[edges]" => {
                        raw.edges.get_or_insert_with(Vec::new);
                        Section::Edges
                    }
                    "[accel]" => {
                        raw.accel.get_or_insert_with(Vec::new);
                        Section::Accel
                    }
                    other => return Err(err(format!("unknown section `{other}` (expected [edges] or [accel])"))),
                };
                continue;
            }
            match section {
                Section::Top => {
                    let (k, v) = content
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
                    let key = k.trim().to_string();
                    if key.is_empty() {
                        return Err(err("missing key before `=`".into()));
                    }
                    if let Some((first, _)) = raw.values.get(&key) {
                        return Err(err(format!("duplicate key `{key}` (first set on line {first})")));
                    }
                    raw.values.insert(key, (line, v.trim().to_string()));
                }
                Section::Edges => {
                    let parts: Vec<&str> = content.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()).collect();
                    let pair = match parts.as_slice() {
                        [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
                        _ => None,
                    };
                    let (a, b) = pair.ok_or_else(|| err(format!("expected an edge `i j`, got `{content}`")))?;
                    raw.edges.as_mut().expect("section opened").push((line, a, b));
                }
                Section::Accel => {
                    let parts: Vec<&str> = content.split_whitespace().collect();
                    if parts.len() != 8 {
                        return Err(err(format!(
                            "expected `agent dim constant sin_amp sin_freq cos_amp cos_freq ramp`, got {} fields",
                            parts.len()
                        )));
                    }
                    let agent = parts[0].parse::<usize>().map_err(|_| err(format!("bad agent index `{}`", parts[0])))?;
                    let d = parts[1].parse::<usize>().map_err(|_| err(format!("bad dimension index `{}`", parts[1])))?;
                    let v: Vec<f64> = parts[2..].iter().map(|p| parse_f64(p)).collect::<Result<_, _>>().map_err(err)?;
                    let c = AccelComponent {
                        constant: v[0],
                        sin_amp: v[1],
                        sin_freq: v[2],
                        cos_amp: v[3],
                        cos_freq: v[4],
                        ramp: v[5],
                    };
                    raw.accel.as_mut().expect("section opened").push((line, (agent, d, c)));
                }
            }
        }
        Ok(raw)
    }
}
