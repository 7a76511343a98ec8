//! Closed-loop simulation: synchronous fixed-step integration of references,
//! filters and plants, Lyapunov evaluation, error metrics and CSV logging.

use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dynamics::{
    control_double_integrator, control_nonlinear, coupling_term, plant_rhs, AgentState, FilterState, GainSet,
    NeighborMessage, Nonlinearity, SignMode,
};
use crate::graph::Topology;
use crate::ode::{Integrator, Scratch};
use crate::signals::{psi_gain, AccelProfile, ReferenceSample, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite {quantity}[{component}] of agent {agent} at t = {t}")]
    NonFinite {
        t: f64,
        agent: usize,
        quantity: &'static str,
        component: usize,
    },
    #[error("invalid simulation settings: {0}")]
    Config(String),
    #[error("vector is not mean-removed (sum deviates by {0})")]
    NotMeanRemoved(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Which closed loop is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Local filter plus tracking control on nonlinear agents.
    #[default]
    NonlinearFilter,
    /// Filter-free signum control on unit-mass double integrators.
    DoubleIntegrator,
    /// Local filter plus tracking control on double integrators of unequal mass.
    HeteroMass,
    /// References and filters only; agent states are held fixed and no
    /// control is applied. The filter never reads agent states, so its
    /// trajectory is identical to that of the full filter-based modes.
    FilterOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::NonlinearFilter => "nonlinear-filter",
            Mode::DoubleIntegrator => "double-integrator",
            Mode::HeteroMass => "hetero-mass",
            Mode::FilterOnly => "filter-only",
        }
    }

    pub fn uses_filter(self) -> bool {
        !matches!(self, Mode::DoubleIntegrator)
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "nonlinear-filter" | "nonlinear" => Ok(Mode::NonlinearFilter),
            "double-integrator" => Ok(Mode::DoubleIntegrator),
            "hetero-mass" => Ok(Mode::HeteroMass),
            "filter-only" => Ok(Mode::FilterOnly),
            other => Err(format!(
                "unknown mode `{other}` (expected nonlinear-filter, double-integrator, hetero-mass or filter-only)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub integrator: Integrator,
    pub seed: u64,
    /// Steps between logged rows.
    pub record_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 30.0,
            integrator: Integrator::Rk4,
            seed: 0,
            record_stride: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return Err(SimError::Config(format!(
                "t_end must be at least dt, got t_end = {} with dt = {}",
                self.t_end, self.dt
            )));
        }
        if self.record_stride == 0 {
            return Err(SimError::Config("record_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

const R: usize = 0;
const VR: usize = 1;
const P: usize = 2;
const Q: usize = 3;
const X: usize = 4;
const V: usize = 5;
const SLOTS: usize = 6;
const SLOT_NAMES: [&str; SLOTS] = ["r", "vr", "p", "q", "x", "v"];

/// Full network state at one instant, stored flat: per agent the blocks
/// `r, vʳ, p, q, x, v`, each of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub t: f64,
    n: usize,
    dim: usize,
    state: Vec<f64>,
}

impl World {
    pub fn new(n: usize, dim: usize) -> Self {
        Self {
            t: 0.0,
            n,
            dim,
            state: vec![0.0; n * dim * SLOTS],
        }
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.state
    }

    fn range(&self, i: usize, slot: usize) -> std::ops::Range<usize> {
        let start = (i * SLOTS + slot) * self.dim;
        start..start + self.dim
    }

    fn get(&self, i: usize, slot: usize) -> Vector {
        Vector::from_column_slice(&self.state[self.range(i, slot)])
    }

    fn set(&mut self, i: usize, slot: usize, value: &Vector) {
        let range = self.range(i, slot);
        self.state[range].copy_from_slice(value.as_slice());
    }

    pub fn reference(&self, i: usize) -> (Vector, Vector) {
        (self.get(i, R), self.get(i, VR))
    }

    pub fn set_reference(&mut self, i: usize, r: &Vector, vr: &Vector) {
        self.set(i, R, r);
        self.set(i, VR, vr);
    }

    pub fn filter(&self, i: usize) -> FilterState {
        FilterState::new(self.get(i, P), self.get(i, Q))
    }

    pub fn set_filter(&mut self, i: usize, f: &FilterState) {
        self.set(i, P, &f.p);
        self.set(i, Q, &f.q);
    }

    pub fn agent(&self, i: usize) -> AgentState {
        AgentState::new(self.get(i, X), self.get(i, V))
    }

    pub fn set_agent(&mut self, i: usize, a: &AgentState) {
        self.set(i, X, &a.x);
        self.set(i, V, &a.v);
    }

    fn first_non_finite(&self) -> Option<(usize, &'static str, usize)> {
        let pos = self.state.iter().position(|v| !v.is_finite())?;
        let agent = pos / (SLOTS * self.dim);
        let slot = (pos / self.dim) % SLOTS;
        Some((agent, SLOT_NAMES[slot], pos % self.dim))
    }
}

/// Everything that defines the closed-loop vector field.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub topology: Topology,
    pub mode: Mode,
    pub dim: usize,
    pub gains: GainSet,
    pub sign: SignMode,
    pub accel: Vec<AccelProfile>,
    pub nonlinearities: Vec<Nonlinearity>,
    pub masses: Vec<f64>,
}

/// Auxiliary outputs of one right-hand-side evaluation.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub u: Vec<Vector>,
    pub psi: Vec<f64>,
    pub psi_prime: Vec<f64>,
    /// `‖Σᵢ cᵢ‖∞ / (1 + Σᵢ ‖cᵢ‖∞)` for the switching terms `cᵢ`.
    pub coupling_residual: f64,
}

impl ClosedLoop {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.topology.node_count();
        let check = |what: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(SimError::Dimension(format!("{what} has {len} entries for {n} agents")))
            }
        };
        check("accel", self.accel.len())?;
        check("nonlinearities", self.nonlinearities.len())?;
        check("masses", self.masses.len())?;
        if let Some(a) = self.accel.iter().find(|a| a.dim() != self.dim) {
            return Err(SimError::Dimension(format!(
                "acceleration profile has {} components, expected {}",
                a.dim(),
                self.dim
            )));
        }
        if let Some(m) = self.masses.iter().find(|m| !(**m > 0.0)) {
            return Err(SimError::Config(format!("mass must be positive, got {m}")));
        }
        Ok(())
    }

    pub fn agents(&self) -> usize {
        self.topology.node_count()
    }

    /// Closed-loop derivative of the flat state at time `t`.
    pub fn evaluate(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Evaluation {
        self.evaluate_stage(t, t, y, dy)
    }

    /// As [`evaluate`](Self::evaluate) for an integrator stage of a step
    /// that began at `step_start`; piecewise accelerations use their left
    /// limits past the start.
    pub fn evaluate_stage(&self, t: f64, step_start: f64, y: &[f64], dy: &mut [f64]) -> Evaluation {
        let n = self.agents();
        let dim = self.dim;
        let world = World {
            t,
            n,
            dim,
            state: y.to_vec(),
        };
        let mut out = World {
            t,
            n,
            dim,
            state: vec![0.0; y.len()],
        };

        let samples: Vec<ReferenceSample> = (0..n)
            .map(|i| {
                let (r, vr) = world.reference(i);
                let mut ar = Vector::zeros(dim);
                self.accel[i].eval_stage_into(t, step_start, ar.as_mut_slice());
                ReferenceSample { t, r, vr, ar }
            })
            .collect();
        let psi: Vec<f64> = samples.iter().map(|s| psi_gain(s, self.gains.gamma)).collect();
        let agents: Vec<AgentState> = (0..n).map(|i| world.agent(i)).collect();
        let psi_prime: Vec<f64> = agents.iter().map(|a| a.psi_prime(self.gains.gamma)).collect();

        let switching_args: Vec<Vector> = if self.mode.uses_filter() {
            (0..n).map(|i| world.filter(i).sum()).collect()
        } else {
            agents.iter().map(|a| &a.x + &a.v).collect()
        };
        let couplings: Vec<Vector> = (0..n)
            .map(|i| {
                let msgs: Vec<NeighborMessage> = self
                    .topology
                    .neighbors(i)
                    .iter()
                    .map(|&j| NeighborMessage {
                        sum: switching_args[j].clone(),
                        psi: psi[j],
                    })
                    .collect();
                coupling_term(&switching_args[i], psi[i], &msgs, self.gains.beta, self.sign)
            })
            .collect();

        let mut total = Vector::zeros(dim);
        let mut scale = 0.0;
        for c in &couplings {
            total += c;
            scale += c.amax();
        }
        let coupling_residual = total.amax() / (1.0 + scale);

        let kappa = self.gains.kappa;
        let mut controls = Vec::with_capacity(n);
        for i in 0..n {
            let s = &samples[i];
            out.set_reference(i, &s.vr, &s.ar);
            let u = match self.mode {
                Mode::NonlinearFilter | Mode::HeteroMass | Mode::FilterOnly => {
                    let filter = world.filter(i);
                    let qdot = -kappa * (&filter.p - &s.r) - kappa * (&filter.q - &s.vr) + &couplings[i] + &s.ar;
                    let u = if self.mode == Mode::FilterOnly {
                        Vector::zeros(dim)
                    } else {
                        control_nonlinear(&agents[i], &filter, &qdot, &self.gains, self.sign)
                    };
                    out.set_filter(i, &FilterState::new(filter.q.clone(), qdot));
                    u
                }
                Mode::DoubleIntegrator => {
                    // Equivalent to control_double_integrator with the
                    // switching term computed above.
                    let a = &agents[i];
                    -kappa * (&a.x - &s.r) - kappa * (&a.v - &s.vr) + &couplings[i] + &s.ar
                }
            };
            if self.mode == Mode::FilterOnly {
                controls.push(u);
                continue;
            }
            let (f, mass) = match self.mode {
                Mode::NonlinearFilter => (&self.nonlinearities[i], 1.0),
                Mode::HeteroMass => (&Nonlinearity::Zero, self.masses[i]),
                _ => (&Nonlinearity::Zero, 1.0),
            };
            let (xdot, vdot) = plant_rhs(&agents[i], &u, f, t, mass).expect("masses validated positive");
            out.set_agent(i, &AgentState::new(xdot.clone(), vdot.clone()));
            if !self.mode.uses_filter() {
                // The agent is its own estimate: p ≡ x, q ≡ v.
                out.set_filter(i, &FilterState::new(xdot, vdot));
            }
            controls.push(u);
        }
        dy.copy_from_slice(&out.state);
        Evaluation {
            u: controls,
            psi,
            psi_prime,
            coupling_residual,
        }
    }

    /// Reference implementation of the double-integrator control for one
    /// agent, used to cross-check the batched evaluation.
    pub fn double_integrator_control(&self, world: &World, i: usize) -> Vector {
        let t = world.t;
        let sample = |j: usize| {
            let (r, vr) = world.reference(j);
            ReferenceSample {
                t,
                r,
                vr,
                ar: self.accel[j].eval(t),
            }
        };
        let psi = |j: usize| psi_gain(&sample(j), self.gains.gamma);
        let msgs: Vec<NeighborMessage> = self
            .topology
            .neighbors(i)
            .iter()
            .map(|&j| {
                let a = world.agent(j);
                NeighborMessage {
                    sum: &a.x + &a.v,
                    psi: psi(j),
                }
            })
            .collect();
        control_double_integrator(&world.agent(i), &msgs, &sample(i), psi(i), &self.gains, self.sign)
    }

    /// Advance `world` by one step of `dt`.
    pub fn step(&self, world: &mut World, dt: f64, integrator: Integrator, scratch: &mut Scratch) -> Result<f64, SimError> {
        let mut residual: f64 = 0.0;
        let start = world.t;
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
            let e = self.evaluate_stage(t, start, y, dy);
            residual = residual.max(e.coupling_residual);
        };
        integrator.step(&mut rhs, world.t, dt, &mut world.state, scratch);
        world.t += dt;
        if let Some((agent, quantity, component)) = world.first_non_finite() {
            return Err(SimError::NonFinite {
                t: world.t,
                agent: agent + 1,
                quantity,
                component: component + 1,
            });
        }
        Ok(residual)
    }

    /// Integrate from `init` and log every `record_stride` steps.
    pub fn simulate(&self, init: World, config: &SimConfig) -> Result<TrajectoryLog, SimError> {
        self.validate()?;
        config.validate()?;
        if init.n != self.agents() || init.dim != self.dim {
            return Err(SimError::Dimension(format!(
                "initial world is {}x{}, system is {}x{}",
                init.n,
                init.dim,
                self.agents(),
                self.dim
            )));
        }
        let steps = config.steps();
        let mut log = TrajectoryLog::new(self);
        let mut world = init;
        let mut scratch = Scratch::default();
        let mut flips = FlipCounter::new(self);
        flips.observe(self, &world);
        log.push(self, &world);
        for k in 1..=steps {
            let residual = self.step(&mut world, config.dt, config.integrator, &mut scratch)?;
            // Pin the clock to k·dt so logs do not accumulate rounding.
            world.t = k as f64 * config.dt;
            log.max_coupling_residual = log.max_coupling_residual.max(residual);
            flips.observe(self, &world);
            if k % config.record_stride == 0 {
                log.push(self, &world);
            }
        }
        log.edge_sign_flips = flips.counts;
        Ok(log)
    }
}

/// Counts sign changes of each edge's switching argument between steps.
struct FlipCounter {
    last: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl FlipCounter {
    fn new(system: &ClosedLoop) -> Self {
        let m = system.topology.edge_count();
        Self {
            last: vec![Vec::new(); m],
            counts: vec![0; m],
        }
    }

    fn observe(&mut self, system: &ClosedLoop, world: &World) {
        let arg = |i: usize| {
            if system.mode.uses_filter() {
                world.filter(i).sum()
            } else {
                let a = world.agent(i);
                &a.x + &a.v
            }
        };
        for (k, &(tail, head)) in system.topology.edges().iter().enumerate() {
            let signs: Vec<f64> = (arg(tail) - arg(head)).iter().map(|s| crate::dynamics::sgn(*s)).collect();
            if !self.last[k].is_empty() {
                self.counts[k] += signs
                    .iter()
                    .zip(&self.last[k])
                    .filter(|(a, b)| **a != 0.0 && **b != 0.0 && a != b)
                    .count();
            }
            self.last[k] = signs;
        }
    }
}

/// Stack per-agent vectors into one `n·dim` vector.
pub fn stack(parts: &[Vector]) -> Vector {
    let dim = parts.first().map_or(0, |p| p.len());
    Vector::from_iterator(parts.len() * dim, parts.iter().flat_map(|p| p.iter().copied()))
}

/// Subtract the agent average from a stacked `n·dim` vector.
pub fn mean_removed(stacked: &Vector, n: usize) -> Vector {
    let dim = stacked.len() / n;
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for d in 0..dim {
            mean[d] += stacked[i * dim + d];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    Vector::from_fn(stacked.len(), |k, _| stacked[k] - mean[k % dim])
}

fn check_mean_removed(v: &Vector, n: usize) -> Result<(), SimError> {
    let dim = v.len() / n;
    let scale = 1.0 + v.amax();
    for d in 0..dim {
        let s: f64 = (0..n).map(|i| v[i * dim + d]).sum();
        if s.abs() > 1e-9 * scale {
            return Err(SimError::NotMeanRemoved(s));
        }
    }
    Ok(())
}

/// `½ [p̃ᵀ q̃ᵀ] (L ⊗ [[2κI, I], [I, I]]) [p̃; q̃]` for mean-removed stacked
/// filter errors.
pub fn lyapunov_v1(p_tilde: &Vector, q_tilde: &Vector, laplacian: &DMatrix<f64>, kappa: f64) -> Result<f64, SimError> {
    let n = laplacian.nrows();
    if n == 0 || p_tilde.len() != q_tilde.len() || p_tilde.len() % n != 0 {
        return Err(SimError::Dimension(format!(
            "p̃ has {} entries, q̃ has {}, Laplacian is {n}x{n}",
            p_tilde.len(),
            q_tilde.len()
        )));
    }
    check_mean_removed(p_tilde, n)?;
    check_mean_removed(q_tilde, n)?;
    let dim = p_tilde.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let l = laplacian[(i, j)];
            if l == 0.0 {
                continue;
            }
            let mut block = 0.0;
            for d in 0..dim {
                let (pi, qi) = (p_tilde[i * dim + d], q_tilde[i * dim + d]);
                let (pj, qj) = (p_tilde[j * dim + d], q_tilde[j * dim + d]);
                block += 2.0 * kappa * pi * pj + pi * qj + qi * pj + qi * qj;
            }
            total += l * block;
        }
    }
    Ok(0.5 * total)
}

/// `½ [x̃ᵀ ṽᵀ] ([[2η, 1], [1, 1]] ⊗ I) [x̃; ṽ]`.
pub fn lyapunov_v2(x_tilde: &Vector, v_tilde: &Vector, eta: f64) -> f64 {
    x_tilde
        .iter()
        .zip(v_tilde.iter())
        .map(|(x, v)| 2.0 * eta * x * x + 2.0 * x * v + v * v)
        .sum::<f64>()
        * 0.5
}

/// Mass-weighted variant with `2η/mᵢ` on agent `i`'s position block.
pub fn lyapunov_v2_weighted(x_tilde: &Vector, v_tilde: &Vector, eta: f64, masses: &[f64]) -> f64 {
    let dim = x_tilde.len() / masses.len().max(1);
    x_tilde
        .iter()
        .zip(v_tilde.iter())
        .enumerate()
        .map(|(k, (x, v))| 2.0 * eta / masses[k / dim] * x * x + 2.0 * x * v + v * v)
        .sum::<f64>()
        * 0.5
}

/// Logged trajectory plus derived error and Lyapunov series.
#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub n: usize,
    pub dim: usize,
    pub mode: Mode,
    pub times: Vec<f64>,
    states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<Vector>>,
    pub psi: Vec<Vec<f64>>,
    pub psi_prime: Vec<Vec<f64>>,
    /// `maxᵢ ‖xᵢ − (1/n)Σⱼ rⱼ‖₂`.
    pub e_pos: Vec<f64>,
    /// `maxᵢ ‖vᵢ − (1/n)Σⱼ vʳⱼ‖₂`.
    pub e_vel: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    /// `Σⱼ (pⱼ − rⱼ)`.
    pub s_p: Vec<Vector>,
    /// `Σⱼ (qⱼ − vʳⱼ)`.
    pub s_q: Vec<Vector>,
    /// `‖(p̃, q̃)‖₂`.
    pub consensus: Vec<f64>,
    /// Largest relative residual of the summed switching terms over every
    /// right-hand-side evaluation.
    pub max_coupling_residual: f64,
    /// Sign changes of each edge's switching argument between steps.
    pub edge_sign_flips: Vec<usize>,
}

impl TrajectoryLog {
    fn new(system: &ClosedLoop) -> Self {
        Self {
            n: system.agents(),
            dim: system.dim,
            mode: system.mode,
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            psi: Vec::new(),
            psi_prime: Vec::new(),
            e_pos: Vec::new(),
            e_vel: Vec::new(),
            v1: Vec::new(),
            v2: Vec::new(),
            s_p: Vec::new(),
            s_q: Vec::new(),
            consensus: Vec::new(),
            max_coupling_residual: 0.0,
            edge_sign_flips: Vec::new(),
        }
    }

    fn push(&mut self, system: &ClosedLoop, world: &World) {
        let n = self.n;
        let dim = self.dim;
        let mut scratch = vec![0.0; world.state.len()];
        let eval = system.evaluate(world.t, &world.state, &mut scratch);

        let refs: Vec<(Vector, Vector)> = (0..n).map(|i| world.reference(i)).collect();
        let filters: Vec<FilterState> = (0..n).map(|i| world.filter(i)).collect();
        let agents: Vec<AgentState> = (0..n).map(|i| world.agent(i)).collect();

        let mut mean_r = Vector::zeros(dim);
        let mut mean_vr = Vector::zeros(dim);
        let mut s_p = Vector::zeros(dim);
        let mut s_q = Vector::zeros(dim);
        for i in 0..n {
            mean_r += &refs[i].0;
            mean_vr += &refs[i].1;
            s_p += &filters[i].p - &refs[i].0;
            s_q += &filters[i].q - &refs[i].1;
        }
        mean_r /= n as f64;
        mean_vr /= n as f64;

        let e_pos = agents.iter().map(|a| (&a.x - &mean_r).norm()).fold(0.0, f64::max);
        let e_vel = agents.iter().map(|a| (&a.v - &mean_vr).norm()).fold(0.0, f64::max);

        let p = stack(&filters.iter().map(|f| f.p.clone()).collect::<Vec<_>>());
        let q = stack(&filters.iter().map(|f| f.q.clone()).collect::<Vec<_>>());
        let p_tilde = mean_removed(&p, n);
        let q_tilde = mean_removed(&q, n);
        let v1 = lyapunov_v1(&p_tilde, &q_tilde, &system.topology.laplacian_f64(), system.gains.kappa)
            .expect("mean-removed by construction");
        let consensus = (p_tilde.norm_squared() + q_tilde.norm_squared()).sqrt();

        let x = stack(&agents.iter().map(|a| a.x.clone()).collect::<Vec<_>>());
        let v = stack(&agents.iter().map(|a| a.v.clone()).collect::<Vec<_>>());
        let x_tilde = &x - &p;
        let v_tilde = &v - &q;
        let v2 = match self.mode {
            Mode::HeteroMass => lyapunov_v2_weighted(&x_tilde, &v_tilde, system.gains.eta, &system.masses),
            _ => lyapunov_v2(&x_tilde, &v_tilde, system.gains.eta),
        };

        self.times.push(world.t);
        self.states.push(world.state.clone());
        self.controls.push(eval.u);
        self.psi.push(eval.psi);
        self.psi_prime.push(eval.psi_prime);
        self.e_pos.push(e_pos);
        self.e_vel.push(e_vel);
        self.v1.push(v1);
        self.v2.push(v2);
        self.s_p.push(s_p);
        self.s_q.push(s_q);
        self.consensus.push(consensus);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// World snapshot of row `k`.
    pub fn world(&self, k: usize) -> World {
        World {
            t: self.times[k],
            n: self.n,
            dim: self.dim,
            state: self.states[k].clone(),
        }
    }

    /// Flat state of row `k` (`r, vʳ, p, q, x, v` per agent).
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        for name in ["x", "v", "p", "q", "u"] {
            for i in 1..=self.n {
                for d in 1..=self.dim {
                    cols.push(format!("{name}_{i}_{d}"));
                }
            }
        }
        cols.extend(["e_pos", "e_vel", "V1", "V2"].map(String::from));
        for name in ["Sp", "Sq"] {
            for d in 1..=self.dim {
                cols.push(format!("{name}_{d}"));
            }
        }
        cols
    }

    /// Comma-separated rows with a header; numbers use the shortest
    /// round-trip decimal form.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", self.csv_header().join(","))?;
        let mut line = String::new();
        for k in 0..self.len() {
            line.clear();
            let world = self.world(k);
            push_num(&mut line, self.times[k]);
            for slot in [X, V, P, Q] {
                for i in 0..self.n {
                    for val in &world.state[world.range(i, slot)] {
                        line.push(',');
                        push_num(&mut line, *val);
                    }
                }
            }
            for u in &self.controls[k] {
                for val in u.iter() {
                    line.push(',');
                    push_num(&mut line, *val);
                }
            }
            for val in [self.e_pos[k], self.e_vel[k], self.v1[k], self.v2[k]] {
                line.push(',');
                push_num(&mut line, val);
            }
            for val in self.s_p[k].iter().chain(self.s_q[k].iter()) {
                line.push(',');
                push_num(&mut line, *val);
            }
            writeln!(w, "{line}")?;
        }
        w.flush()
    }

    /// Row indices with `t ≥ (1 − fraction)·t_last`.
    pub fn tail_indices(&self, fraction: f64) -> std::ops::Range<usize> {
        let t_last = self.times.last().copied().unwrap_or(0.0);
        let cutoff = (1.0 - fraction) * t_last;
        let start = self.times.iter().position(|&t| t >= cutoff - 1e-12).unwrap_or(self.len());
        start..self.len()
    }

    pub fn metrics(&self) -> Metrics {
        let tail = self.tail_indices(0.1);
        let mean = |series: &[f64]| {
            let window = &series[tail.clone()];
            window.iter().sum::<f64>() / window.len().max(1) as f64
        };
        Metrics {
            terminal_e_pos: mean(&self.e_pos),
            terminal_e_vel: mean(&self.e_vel),
            final_e_pos: self.e_pos.last().copied().unwrap_or(0.0),
            final_e_vel: self.e_vel.last().copied().unwrap_or(0.0),
            decay_fit: consensus_decay_fit(&self.times, &self.consensus),
            max_coupling_residual: self.max_coupling_residual,
            max_edge_sign_flips: self.edge_sign_flips.iter().copied().max().unwrap_or(0),
        }
    }
}

fn push_num(line: &mut String, v: f64) {
    use std::fmt::Write as _;
    let _ = write!(line, "{v}");
}

/// Summary numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Mean of `e_pos` over the last 10% of the horizon.
    pub terminal_e_pos: f64,
    pub terminal_e_vel: f64,
    pub final_e_pos: f64,
    pub final_e_vel: f64,
    pub decay_fit: Option<LineFit>,
    pub max_coupling_residual: f64,
    pub max_edge_sign_flips: usize,
}

/// Least-squares line with coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Time span the line was fitted over.
    pub t_start: f64,
    pub t_end: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 3 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
        t_start: xs[0],
        t_end: xs[n - 1],
    })
}

/// Fraction of the initial consensus error at which the decay window ends.
pub const DECAY_WINDOW_FLOOR: f64 = 1e-2;

/// Fit `log ‖(p̃, q̃)‖` against time over the decay window.
///
/// The window starts at the peak of the first 5% of the run (after the
/// switching terms have engaged) and ends at the first row where the error
/// drops below [`DECAY_WINDOW_FLOOR`] times that peak, or at the global
/// minimum if it never does. Returns `None` when the error starts at zero
/// or the window holds fewer than three rows.
pub fn consensus_decay_fit(times: &[f64], consensus: &[f64]) -> Option<LineFit> {
    if consensus.len() < 3 {
        return None;
    }
    let head = (consensus.len() / 20).max(1);
    let start = (0..head).max_by(|&a, &b| consensus[a].total_cmp(&consensus[b]))?;
    let peak = consensus[start];
    if !(peak > 0.0) {
        return None;
    }
    let end = (start..consensus.len())
        .find(|&k| consensus[k] < DECAY_WINDOW_FLOOR * peak)
        .unwrap_or_else(|| {
            (start..consensus.len())
                .min_by(|&a, &b| consensus[a].total_cmp(&consensus[b]))
                .unwrap_or(start)
        });
    let idx: Vec<usize> = (start..=end).filter(|&k| consensus[k] > 0.0).collect();
    let xs: Vec<f64> = idx.iter().map(|&k| times[k]).collect();
    let ys: Vec<f64> = idx.iter().map(|&k| consensus[k].ln()).collect();
    fit_line(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::AccelProfile;

    fn v(vals: &[f64]) -> Vector {
        Vector::from_column_slice(vals)
    }

    fn system(topology: Topology, mode: Mode, dim: usize, gains: GainSet) -> ClosedLoop {
        let n = topology.node_count();
        ClosedLoop {
            topology,
            mode,
            dim,
            gains,
            sign: SignMode::Exact,
            accel: vec![AccelProfile::zero(dim); n],
            nonlinearities: vec![Nonlinearity::Zero; n],
            masses: vec![1.0; n],
        }
    }

    #[test]
    fn v1_examples() {
        let l = Topology::complete(2).unwrap().laplacian_f64();
        assert_eq!(lyapunov_v1(&Vector::zeros(2), &Vector::zeros(2), &l, 1.5).unwrap(), 0.0);
        let a = 0.7;
        let kappa = 1.5;
        let val = lyapunov_v1(&v(&[a, -a]), &Vector::zeros(2), &l, kappa).unwrap();
        assert!((val - 4.0 * kappa * a * a).abs() < 1e-12);
        assert!(matches!(
            lyapunov_v1(&v(&[1.0, 0.0]), &Vector::zeros(2), &l, kappa),
            Err(SimError::NotMeanRemoved(_))
        ));
    }

    #[test]
    fn v2_examples() {
        assert_eq!(lyapunov_v2(&Vector::zeros(3), &Vector::zeros(3), 5.0), 0.0);
        assert_eq!(lyapunov_v2(&v(&[1.0]), &v(&[0.0]), 5.0), 5.0);
        assert_eq!(lyapunov_v2_weighted(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), 5.0, &[1.0, 2.0]), 7.5);
    }

    #[test]
    fn mean_removal() {
        let s = v(&[1.0, 2.0, 3.0, 6.0]);
        let m = mean_removed(&s, 2);
        assert_eq!(m, v(&[-1.0, -2.0, 1.0, 2.0]));
    }

    #[test]
    fn equilibrium_is_fixed() {
        let sys = system(Topology::complete(3).unwrap(), Mode::NonlinearFilter, 2, GainSet::paper());
        let mut world = World::new(3, 2);
        let r = v(&[2.0, -1.0]);
        let zero = Vector::zeros(2);
        for i in 0..3 {
            world.set_reference(i, &r, &zero);
            world.set_filter(i, &FilterState::new(r.clone(), zero.clone()));
            world.set_agent(i, &AgentState::new(r.clone(), zero.clone()));
        }
        let mut scratch = Scratch::default();
        for _ in 0..100 {
            let before = world.clone();
            sys.step(&mut world, 1e-3, Integrator::Rk4, &mut scratch).unwrap();
            let drift = before
                .as_slice()
                .iter()
                .zip(world.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(drift < 1e-12, "{drift}");
        }
    }

    #[test]
    fn single_filter_matches_linear_solution() {
        // p̈ = −κ(p − r) − κ ṗ with constant r: underdamped for κ = 1.
        let sys = system(Topology::new(1, &[]).unwrap(), Mode::NonlinearFilter, 1, GainSet {
            kappa: 1.0,
            ..GainSet::paper()
        });
        let mut world = World::new(1, 1);
        world.set_reference(0, &v(&[1.0]), &v(&[0.0]));
        let config = SimConfig {
            t_end: 1.0,
            record_stride: 1000,
            ..SimConfig::default()
        };
        let log = sys.simulate(world, &config).unwrap();
        let p = log.world(log.len() - 1).filter(0).p[0];
        // e = p − 1 solves ë + ė + e = 0, e(0) = −1, ė(0) = 0.
        let w = 3f64.sqrt() / 2.0;
        let t: f64 = 1.0;
        let e = -(-t / 2.0).exp() * ((w * t).cos() + (0.5 / w) * (w * t).sin());
        assert!((p - (1.0 + e)).abs() < 1e-6, "{p} vs {}", 1.0 + e);
    }

    #[test]
    fn euler_self_convergence_is_first_order() {
        let sys = system(Topology::new(1, &[]).unwrap(), Mode::NonlinearFilter, 1, GainSet {
            kappa: 1.0,
            ..GainSet::paper()
        });
        let run = |dt: f64| {
            let mut world = World::new(1, 1);
            world.set_reference(0, &v(&[1.0]), &v(&[0.0]));
            let config = SimConfig {
                dt,
                t_end: 1.0,
                integrator: Integrator::Euler,
                record_stride: (1.0 / dt).round() as usize,
                ..SimConfig::default()
            };
            sys.simulate(world, &config).unwrap().world(1).filter(0).p[0]
        };
        let (a, b, c) = (run(4e-3), run(2e-3), run(1e-3));
        let ratio = (a - b) / (b - c);
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn non_finite_state_is_reported() {
        let mut sys = system(Topology::complete(2).unwrap(), Mode::NonlinearFilter, 1, GainSet::paper());
        sys.nonlinearities[1] = Nonlinearity::custom(|x, _v, _t| x.map(|_| f64::NAN));
        let world = World::new(2, 1);
        let config = SimConfig {
            integrator: Integrator::Euler,
            ..SimConfig::default()
        };
        let err = sys.simulate(world, &config).unwrap_err();
        match err {
            SimError::NonFinite { agent, quantity, .. } => {
                assert_eq!(agent, 2);
                assert_eq!(quantity, "v");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn double_integrator_batch_matches_reference_law() {
        let mut sys = system(Topology::path(3).unwrap(), Mode::DoubleIntegrator, 2, GainSet::paper());
        sys.accel = (1..=3).map(|i| AccelProfile::constant(&[i as f64, -1.0])).collect();
        let mut world = World::new(3, 2);
        for i in 0..3 {
            let f = i as f64;
            world.set_reference(i, &v(&[f, 1.0 - f]), &v(&[0.5 * f, 2.0]));
            let a = AgentState::new(v(&[f * f, -f]), v(&[1.0, f - 2.0]));
            world.set_agent(i, &a);
            world.set_filter(i, &FilterState::new(a.x.clone(), a.v.clone()));
        }
        world.t = 0.3;
        let mut dy = vec![0.0; world.as_slice().len()];
        let eval = sys.evaluate(world.t, world.as_slice(), &mut dy);
        for i in 0..3 {
            assert_eq!(eval.u[i], sys.double_integrator_control(&world, i));
        }
    }

    #[test]
    fn config_validation() {
        let bad = SimConfig {
            dt: 0.0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SimConfig {
            t_end: 1e-4,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SimConfig {
            record_stride: 0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(SimConfig::default().steps(), 30_000);
    }

    #[test]
    fn line_fit_recovers_exponential() {
        let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let vals: Vec<f64> = times.iter().map(|t| 3.0 * (-0.8 * t).exp()).collect();
        let fit = consensus_decay_fit(&times, &vals).unwrap();
        assert!((fit.slope + 0.8).abs() < 1e-9);
        assert!(fit.r2 > 0.999_999);
        assert!(consensus_decay_fit(&times, &vec![0.0; 200]).is_none());
    }

    #[test]
    fn csv_column_count() {
        let sys = system(Topology::complete(3).unwrap(), Mode::NonlinearFilter, 2, GainSet::paper());
        let log = sys
            .simulate(World::new(3, 2), &SimConfig {
                t_end: 0.01,
                record_stride: 5,
                ..SimConfig::default()
            })
            .unwrap();
        assert_eq!(log.csv_header().len(), 1 + 3 * 2 * 5 + 2 + 2 + 2 * 2);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3);
        for line in &lines {
            assert_eq!(line.split(',').count(), 39);
        }
        assert!(lines[0].starts_with("t,x_1_1,x_1_2,x_2_1"));
        assert!(lines[0].ends_with("Sp_1,Sp_2,Sq_1,Sq_2"));
    }
}
