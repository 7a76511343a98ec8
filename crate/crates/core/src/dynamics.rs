//! Agent plants, the benchmark Chua-type nonlinearity, the local filter,
//! the two control laws and the gain conditions that guarantee tracking.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::SpectralSummary;
use crate::signals::{l1, ReferenceSample};

pub type Vector = DVector<f64>;

/// Signum with `sgn(0) = 0`. NaN propagates.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else if x == 0.0 {
        0.0
    } else {
        f64::NAN
    }
}

/// How the discontinuous switching term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SignMode {
    #[default]
    Exact,
    /// `s / (|s| + eps)`.
    BoundaryLayer { eps: f64 },
}

impl SignMode {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            SignMode::Exact => sgn(s),
            SignMode::BoundaryLayer { eps } => s / (s.abs() + eps),
        }
    }

    pub fn apply_vec(self, v: &Vector) -> Vector {
        v.map(|s| self.apply(s))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("graph is disconnected (λ₂ = {0}); tracking requires a connected graph")]
    Disconnected(f64),
    #[error("mass bound m̄ is required for the heterogeneous-mass gain check")]
    MissingMassBound,
    #[error("state box is empty or not finite")]
    EmptyBox,
    #[error("at least two samples are required, got {0}")]
    TooFewSamples(usize),
}

/// Physical agent state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: Vector,
    pub v: Vector,
}

impl AgentState {
    pub fn new(x: Vector, v: Vector) -> Self {
        Self { x, v }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(Vector::zeros(dim), Vector::zeros(dim))
    }

    /// `ψ′ = ‖x‖₁ + ‖v‖₁ + γ`.
    pub fn psi_prime(&self, gamma: f64) -> f64 {
        l1(&self.x) + l1(&self.v) + gamma
    }
}

/// Local filter outputs; `q` is the derivative of `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub p: Vector,
    pub q: Vector,
}

impl FilterState {
    pub fn new(p: Vector, q: Vector) -> Self {
        Self { p, q }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(Vector::zeros(dim), Vector::zeros(dim))
    }

    pub fn sum(&self) -> Vector {
        &self.p + &self.q
    }
}

/// Constants of the Lipschitz-like bound
/// `‖f(x,v,t) − f(y,z,t)‖₁ ≤ ρ₁‖x−y‖₁ + ρ₂‖v−z‖₁ + ρ₃`, `‖f(0,0,t)‖₁ ≤ ρ₄`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LipschitzBounds {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub rho4: f64,
}

impl LipschitzBounds {
    pub fn max(self, other: Self) -> Self {
        Self {
            rho1: self.rho1.max(other.rho1),
            rho2: self.rho2.max(other.rho2),
            rho3: self.rho3.max(other.rho3),
            rho4: self.rho4.max(other.rho4),
        }
    }
}

/// Controller gains plus the nonlinearity constants they are checked against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSet {
    pub kappa: f64,
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub rho: LipschitzBounds,
    /// Upper bound on agent masses (heterogeneous-mass plants only).
    pub mbar: Option<f64>,
}

impl GainSet {
    /// β = 3, κ = 1.5, η = 5, γ = 0.001.
    pub fn paper() -> Self {
        Self {
            kappa: 1.5,
            beta: 3.0,
            eta: 5.0,
            gamma: 0.001,
            rho: LipschitzBounds::default(),
            mbar: None,
        }
    }
}

pub const CHUA_DELTA: f64 = 10.0;
pub const CHUA_BETA: f64 = 19.53;
pub const CHUA_MU: f64 = 0.1636;
pub const CHUA_EPSILON: f64 = 0.2;
pub const CHUA_OMEGA: f64 = 0.5;

fn chua_h(y1: f64) -> f64 {
    -0.7831 * y1 - 0.324 * ((y1 + 1.0).abs() - (y1 - 1.0).abs())
}

/// Chua-type nonlinearity of agent `i` (1-based) in three dimensions.
///
/// `x` is position, `y` velocity. Only the forcing term
/// `−β_c ε sin(ω x₁)` in the third component depends on the agent index.
pub fn chua_f(i: usize, x: &Vector, y: &Vector, _t: f64) -> Vector {
    let forcing = -(i as f64) * CHUA_BETA * CHUA_EPSILON * (CHUA_OMEGA * x[0]).sin();
    Vector::from_vec(vec![
        CHUA_DELTA * (y[1] - y[0] * chua_h(y[0])),
        y[0] - y[1] + y[2],
        -CHUA_BETA * y[1] - CHUA_MU * y[2] + forcing,
    ])
}

/// Analytic Lipschitz-like constants of [`chua_f`] for agents `1..=n`,
/// valid while every velocity component stays within `±half_width`.
///
/// `ρ₁` is the global slope of the sine forcing; `ρ₂` is the largest
/// Jacobian column 1-norm in velocity over the box; `ρ₃ = ρ₄ = 0`.
pub fn chua_rho_bound(n: usize, half_width: f64) -> LipschitzBounds {
    let b = half_width.abs();
    // |d/dy₁ (y₁ h(y₁))| is 2·1.4311|y₁| inside |y₁| < 1 and
    // 1.5662|y₁| + 0.648 outside.
    let slope = (2.0 * 1.4311 * b.min(1.0)).max(if b > 1.0 { 1.5662 * b + 0.648 } else { 0.0 });
    let col1 = CHUA_DELTA * slope + 1.0;
    let col2 = CHUA_DELTA + 1.0 + CHUA_BETA;
    let col3 = 1.0 + CHUA_MU;
    LipschitzBounds {
        rho1: n as f64 * CHUA_BETA * CHUA_EPSILON * CHUA_OMEGA,
        rho2: col1.max(col2).max(col3),
        rho3: 0.0,
        rho4: 0.0,
    }
}

type CustomFn = dyn Fn(&Vector, &Vector, f64) -> Vector + Send + Sync;

/// The unknown drift term `f_i(x, v, t)` of one agent.
#[derive(Clone)]
pub enum Nonlinearity {
    Zero,
    /// [`chua_f`] for the given 1-based agent index.
    Chua { agent: usize },
    /// `kx·x + kv·v + bias`.
    Linear {
        kx: DMatrix<f64>,
        kv: DMatrix<f64>,
        bias: Vector,
    },
    Custom(Arc<CustomFn>),
}

impl Nonlinearity {
    pub fn custom(f: impl Fn(&Vector, &Vector, f64) -> Vector + Send + Sync + 'static) -> Self {
        Nonlinearity::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: &Vector, v: &Vector, t: f64) -> Vector {
        match self {
            Nonlinearity::Zero => Vector::zeros(x.len()),
            Nonlinearity::Chua { agent } => chua_f(*agent, x, v, t),
            Nonlinearity::Linear { kx, kv, bias } => kx * x + kv * v + bias,
            Nonlinearity::Custom(f) => f(x, v, t),
        }
    }
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlinearity::Zero => f.write_str("Zero"),
            Nonlinearity::Chua { agent } => f.debug_struct("Chua").field("agent", agent).finish(),
            Nonlinearity::Linear { kx, kv, bias } => f
                .debug_struct("Linear")
                .field("kx", kx)
                .field("kv", kv)
                .field("bias", bias)
                .finish(),
            Nonlinearity::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Axis-aligned sampling region for `(x, v)` plus a time window.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox {
    pub x_lo: Vector,
    pub x_hi: Vector,
    pub v_lo: Vector,
    pub v_hi: Vector,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl StateBox {
    /// `[−w, w]^{2·dim}` over `[0, t_hi]`.
    pub fn cube(dim: usize, half_width: f64, t_hi: f64) -> Self {
        Self {
            x_lo: Vector::from_element(dim, -half_width),
            x_hi: Vector::from_element(dim, half_width),
            v_lo: Vector::from_element(dim, -half_width),
            v_hi: Vector::from_element(dim, half_width),
            t_lo: 0.0,
            t_hi,
        }
    }

    pub fn dim(&self) -> usize {
        self.x_lo.len()
    }

    fn is_valid(&self) -> bool {
        let ok = |lo: &Vector, hi: &Vector| {
            lo.len() == hi.len()
                && lo.iter().zip(hi.iter()).all(|(a, b)| a.is_finite() && b.is_finite() && a < b)
        };
        self.dim() > 0
            && self.v_lo.len() == self.dim()
            && ok(&self.x_lo, &self.x_hi)
            && ok(&self.v_lo, &self.v_hi)
            && self.t_lo.is_finite()
            && self.t_hi.is_finite()
            && self.t_lo <= self.t_hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vector, Vector, f64) {
        let draw = |lo: &Vector, hi: &Vector, rng: &mut R| {
            Vector::from_iterator(lo.len(), lo.iter().zip(hi.iter()).map(|(a, b)| rng.gen_range(*a..*b)))
        };
        let x = draw(&self.x_lo, &self.x_hi, rng);
        let v = draw(&self.v_lo, &self.v_hi, rng);
        let t = if self.t_hi > self.t_lo {
            rng.gen_range(self.t_lo..self.t_hi)
        } else {
            self.t_lo
        };
        (x, v, t)
    }
}

/// Sampled estimate of the Lipschitz-like constants of `f` on `region`.
///
/// `ρ₁` is the largest sampled ratio `‖Δf‖₁ / ‖Δx‖₁` over pairs that differ
/// only in `x` (half of them along a single coordinate, where the induced
/// 1-norm of a linear map is attained); `ρ₂` likewise over `v`-only pairs.
/// `ρ₃` is then the smallest offset that makes the bound hold on every
/// sampled general pair, widened by 5% of the largest sampled `‖Δf‖₁` so it
/// carries over to fresh samples. `ρ₄` is the largest `‖f(0,0,t)‖₁` over
/// sampled times. This is an estimate, not a certificate.
pub fn estimate_lipschitz(
    f: &Nonlinearity,
    region: &StateBox,
    samples: usize,
    seed: u64,
) -> Result<LipschitzBounds, DynamicsError> {
    if !region.is_valid() {
        return Err(DynamicsError::EmptyBox);
    }
    if samples < 2 {
        return Err(DynamicsError::TooFewSamples(samples));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = region.dim();
    let zero = Vector::zeros(dim);

    // Move one end of a pair: either a fresh point in the box or the same
    // point shifted along one coordinate.
    let partner = |from: &Vector, lo: &Vector, hi: &Vector, aligned: bool, rng: &mut ChaCha8Rng| {
        if aligned {
            let k = rng.gen_range(0..dim);
            let mut to = from.clone();
            to[k] = rng.gen_range(lo[k]..hi[k]);
            to
        } else {
            Vector::from_iterator(dim, lo.iter().zip(hi.iter()).map(|(a, b)| rng.gen_range(*a..*b)))
        }
    };

    let (mut rho1, mut rho2, mut rho4) = (0.0f64, 0.0f64, 0.0f64);
    let mut general = Vec::with_capacity(samples);
    for k in 0..samples {
        let aligned = k % 2 == 0;
        let (x, v, t) = region.sample(&mut rng);
        let fx = f.eval(&x, &v, t);
        rho4 = rho4.max(l1(&f.eval(&zero, &zero, t)));

        let y = partner(&x, &region.x_lo, &region.x_hi, aligned, &mut rng);
        let dx = l1(&(&x - &y));
        if dx > 0.0 {
            rho1 = rho1.max(l1(&(&fx - f.eval(&y, &v, t))) / dx);
        }
        let z = partner(&v, &region.v_lo, &region.v_hi, aligned, &mut rng);
        let dv = l1(&(&v - &z));
        if dv > 0.0 {
            rho2 = rho2.max(l1(&(&fx - f.eval(&x, &z, t))) / dv);
        }

        let (y, z, _) = region.sample(&mut rng);
        general.push((l1(&(&x - &y)), l1(&(&v - &z)), l1(&(&fx - f.eval(&y, &z, t)))));
    }

    let max_df = general.iter().map(|g| g.2).fold(0.0, f64::max);
    let slack = general
        .iter()
        .map(|&(dx, dv, df)| df - rho1 * dx - rho2 * dv)
        .fold(0.0, f64::max);
    let rho3 = if max_df > 0.0 { slack + 0.05 * max_df } else { 0.0 };
    Ok(LipschitzBounds {
        rho1,
        rho2,
        rho3,
        rho4,
    })
}

/// A neighbour's broadcast: its switching argument (`p + q` for the
/// filter, `x + v` for double integrators) and its gain ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborMessage {
    pub sum: Vector,
    pub psi: f64,
}

/// `−β Σⱼ (ψᵢ + ψⱼ) sgn(ownᵢ − ownⱼ)` over the neighbour list.
pub fn coupling_term(
    own_sum: &Vector,
    psi_i: f64,
    neighbors: &[NeighborMessage],
    beta: f64,
    sign: SignMode,
) -> Vector {
    let mut acc = Vector::zeros(own_sum.len());
    for nb in neighbors {
        let weight = psi_i + nb.psi;
        for d in 0..own_sum.len() {
            acc[d] -= beta * weight * sign.apply(own_sum[d] - nb.sum[d]);
        }
    }
    acc
}

/// Filter right-hand side `(ṗ, q̇)`.
///
/// `ṗ = q`, `q̇ = −κ(p − r) − κ(q − vʳ) − β Σⱼ (ψᵢ+ψⱼ) sgn[(pᵢ+qᵢ) − (pⱼ+qⱼ)] + aʳ`.
pub fn filter_rhs(
    state: &FilterState,
    neighbors: &[NeighborMessage],
    sample: &ReferenceSample,
    psi_i: f64,
    gains: &GainSet,
    sign: SignMode,
) -> (Vector, Vector) {
    let coupling = coupling_term(&state.sum(), psi_i, neighbors, gains.beta, sign);
    let qdot = -gains.kappa * (&state.p - &sample.r) - gains.kappa * (&state.q - &sample.vr)
        + coupling
        + &sample.ar;
    (state.q.clone(), qdot)
}

/// Tracking control for nonlinear agents:
/// `u = −η ψ′ [x̃ + ṽ + sgn(x̃ + ṽ)] + q̇` with `x̃ = x − p`, `ṽ = v − q`.
pub fn control_nonlinear(
    state: &AgentState,
    filter: &FilterState,
    qdot: &Vector,
    gains: &GainSet,
    sign: SignMode,
) -> Vector {
    let psi_prime = state.psi_prime(gains.gamma);
    let s = (&state.x - &filter.p) + (&state.v - &filter.q);
    let switching = sign.apply_vec(&s);
    -gains.eta * psi_prime * (s + switching) + qdot
}

/// Filter-free control for double integrators:
/// `u = −κ(x − r) − κ(v − vʳ) − β Σⱼ (ψᵢ+ψⱼ) sgn[(xᵢ+vᵢ) − (xⱼ+vⱼ)] + aʳ`.
pub fn control_double_integrator(
    state: &AgentState,
    neighbors: &[NeighborMessage],
    sample: &ReferenceSample,
    psi_i: f64,
    gains: &GainSet,
    sign: SignMode,
) -> Vector {
    let own = &state.x + &state.v;
    let coupling = coupling_term(&own, psi_i, neighbors, gains.beta, sign);
    -gains.kappa * (&state.x - &sample.r) - gains.kappa * (&state.v - &sample.vr)
        + coupling
        + &sample.ar
}

/// Plant right-hand side `(ẋ, v̇)` with `v̇ = f(x, v, t) + u / mass`.
///
/// With `mass = 1` this is the nonlinear second-order agent; with
/// [`Nonlinearity::Zero`] it is the (possibly heavy) double integrator.
pub fn plant_rhs(
    state: &AgentState,
    u: &Vector,
    f: &Nonlinearity,
    t: f64,
    mass: f64,
) -> Result<(Vector, Vector), DynamicsError> {
    if !(mass > 0.0) {
        return Err(DynamicsError::NonPositiveMass(mass));
    }
    let mut vdot = u / mass;
    if !matches!(f, Nonlinearity::Zero) {
        vdot += f.eval(&state.x, &state.v, t);
    }
    Ok((state.v.clone(), vdot))
}

/// One inequality of a gain condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: &'static str,
    /// The configured value on the left of `>`.
    pub value: f64,
    /// The strict lower bound it must exceed.
    pub threshold: f64,
    pub pass: bool,
}

impl Constraint {
    fn strict(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            threshold,
            pass: value > threshold,
        }
    }
}

/// Which sufficient condition a report checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainCondition {
    /// Filter + tracking control on nonlinear agents.
    NonlinearAgents,
    /// Filter-free control on double integrators.
    DoubleIntegrators,
    /// Filter + tracking control on double integrators of unequal mass.
    HeterogeneousMass,
    /// The filter on its own.
    Filter,
}

impl GainCondition {
    pub fn describe(self) -> &'static str {
        match self {
            GainCondition::NonlinearAgents => "filter + tracking control on nonlinear agents",
            GainCondition::DoubleIntegrators => "filter-free control on double integrators",
            GainCondition::HeterogeneousMass => "filter + tracking control on double integrators of unequal mass",
            GainCondition::Filter => "filter consensus",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainReport {
    pub condition: GainCondition,
    /// `λ_max² / (2 λ₂²)`.
    pub kappa_threshold: f64,
    pub constraints: Vec<Constraint>,
}

impl GainReport {
    pub fn pass(&self) -> bool {
        self.constraints.iter().all(|c| c.pass)
    }

    pub fn violations(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter().filter(|c| !c.pass)
    }
}

fn structural(gains: &GainSet, spectral: &SpectralSummary) -> Result<(f64, Vec<Constraint>), DynamicsError> {
    if !spectral.is_connected {
        return Err(DynamicsError::Disconnected(spectral.lambda2));
    }
    let threshold = spectral.kappa_threshold();
    Ok((
        threshold,
        vec![
            Constraint::strict("beta > kappa", gains.beta, gains.kappa),
            Constraint::strict(
                "kappa > max{1, lambda_max^2/(2 lambda_2^2)}",
                gains.kappa,
                threshold.max(1.0),
            ),
        ],
    ))
}

pub fn check_gains_theorem1(gains: &GainSet, spectral: &SpectralSummary) -> Result<GainReport, DynamicsError> {
    let (kappa_threshold, mut constraints) = structural(gains, spectral)?;
    let rho = gains.rho;
    constraints.push(Constraint::strict("gamma > rho3 + rho4", gains.gamma, rho.rho3 + rho.rho4));
    constraints.push(Constraint::strict(
        "eta > max{1, rho1, rho2}",
        gains.eta,
        1f64.max(rho.rho1).max(rho.rho2),
    ));
    Ok(GainReport {
        condition: GainCondition::NonlinearAgents,
        kappa_threshold,
        constraints,
    })
}

pub fn check_gains_theorem2(gains: &GainSet, spectral: &SpectralSummary) -> Result<GainReport, DynamicsError> {
    let (kappa_threshold, constraints) = structural(gains, spectral)?;
    Ok(GainReport {
        condition: GainCondition::DoubleIntegrators,
        kappa_threshold,
        constraints,
    })
}

/// The filter's own requirements: `β > κ` and `κ > max{1, λ_max²/(2λ₂²)}`.
pub fn check_gains_filter(gains: &GainSet, spectral: &SpectralSummary) -> Result<GainReport, DynamicsError> {
    let (kappa_threshold, constraints) = structural(gains, spectral)?;
    Ok(GainReport {
        condition: GainCondition::Filter,
        kappa_threshold,
        constraints,
    })
}

pub fn check_gains_corollary(gains: &GainSet, spectral: &SpectralSummary) -> Result<GainReport, DynamicsError> {
    let mbar = gains.mbar.ok_or(DynamicsError::MissingMassBound)?;
    let (kappa_threshold, mut constraints) = structural(gains, spectral)?;
    constraints.push(Constraint::strict("gamma > 0", gains.gamma, 0.0));
    constraints.push(Constraint::strict("eta > max{1, mbar/2}", gains.eta, 1f64.max(mbar / 2.0)));
    Ok(GainReport {
        condition: GainCondition::HeterogeneousMass,
        kappa_threshold,
        constraints,
    })
}
