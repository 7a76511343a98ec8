//! Per-agent reference triples `(r, vʳ, aʳ)` with `ṙ = vʳ`, `v̇ʳ = aʳ`, and
//! the reference-driven gain ψ.
//!
//! Accelerations are built from per-component terms
//! `c + A sin(ωₛ t) + B cos(ω_c t) + R·t·mod(t, 2)`, which covers the
//! benchmark inputs and admits exact double integrals. References can be
//! sampled in closed form or co-integrated with a fixed-step scheme.

use nalgebra::DVector;
use thiserror::Error;

use crate::ode::{Integrator, Scratch};

pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("sample time {requested} precedes current integration time {current}")]
    TimeRegression { requested: f64, current: f64 },
    #[error("dimension mismatch: profile has {profile} components, initial state has {initial}")]
    Dimension { profile: usize, initial: usize },
    #[error("step size must be positive, got {0}")]
    StepSize(f64),
}

/// `t − 2·floor(t/2)`.
pub fn mod2(t: f64) -> f64 {
    t - 2.0 * (t / 2.0).floor()
}

/// Left limit of [`mod2`]: `2` instead of `0` at (or a rounding error past)
/// every positive even `t`.
pub fn mod2_left(t: f64) -> f64 {
    let m = mod2(t);
    if t > 0.0 && m <= 1e-9 {
        m + 2.0
    } else {
        m
    }
}

/// Benchmark acceleration of agent `i` (1-based) in three dimensions:
/// `i·[sin 5t + 0.1 t·mod(t,2), 3 cos 3t + 0.2 t·mod(t,2), 0.3 t·mod(t,2)]`.
pub fn paper_accel(i: usize, t: f64) -> [f64; 3] {
    let s = i as f64;
    let m = t * mod2(t);
    [
        s * ((5.0 * t).sin() + 0.1 * m),
        s * (3.0 * (3.0 * t).cos() + 0.2 * m),
        s * (0.3 * m),
    ]
}

/// One scalar acceleration channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AccelComponent {
    pub constant: f64,
    pub sin_amp: f64,
    pub sin_freq: f64,
    pub cos_amp: f64,
    pub cos_freq: f64,
    /// Coefficient of `t·mod(t, 2)`.
    pub ramp: f64,
}

impl AccelComponent {
    pub fn constant(value: f64) -> Self {
        Self {
            constant: value,
            ..Self::default()
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.constant
            + self.sin_amp * (self.sin_freq * t).sin()
            + self.cos_amp * (self.cos_freq * t).cos()
            + self.ramp * t * mod2(t)
    }

    /// Left limit at `t`; differs from [`eval`](Self::eval) only at the
    /// jumps of the ramp term.
    pub fn eval_left(&self, t: f64) -> f64 {
        self.constant
            + self.sin_amp * (self.sin_freq * t).sin()
            + self.cos_amp * (self.cos_freq * t).cos()
            + self.ramp * t * mod2_left(t)
    }

    /// `(∫₀ᵗ a, ∫₀ᵗ∫₀ˢ a)`.
    pub fn integrals(&self, t: f64) -> (f64, f64) {
        let mut once = self.constant * t;
        let mut twice = 0.5 * self.constant * t * t;

        if self.sin_freq != 0.0 {
            let w = self.sin_freq;
            once += self.sin_amp * (1.0 - (w * t).cos()) / w;
            twice += self.sin_amp * (t / w - (w * t).sin() / (w * w));
        }

        if self.cos_freq == 0.0 {
            once += self.cos_amp * t;
            twice += 0.5 * self.cos_amp * t * t;
        } else {
            let w = self.cos_freq;
            once += self.cos_amp * (w * t).sin() / w;
            twice += self.cos_amp * (1.0 - (w * t).cos()) / (w * w);
        }

        let (g1, g2) = ramp_integrals(t);
        once += self.ramp * g1;
        twice += self.ramp * g2;
        (once, twice)
    }
}

/// Single and double integrals of `g(t) = t·mod(t, 2)` from 0.
fn ramp_integrals(t: f64) -> (f64, f64) {
    let k = (t / 2.0).floor();
    let u = t - 2.0 * k;
    let g1_at_period = 8.0 * k / 3.0 + 2.0 * k * (k - 1.0);
    let g1 = g1_at_period + u * u * u / 3.0 + k * u * u;
    let g2_at_period = 4.0 * k * (k - 1.0) + 4.0 / 3.0 * k * (k - 1.0) * (k - 2.0) + 4.0 * k / 3.0;
    let g2 = g2_at_period + g1_at_period * u + u.powi(4) / 12.0 + k * u * u * u / 3.0;
    (g1, g2)
}

/// Acceleration profile, one channel per spatial dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelProfile {
    pub components: Vec<AccelComponent>,
}

impl AccelProfile {
    pub fn zero(dim: usize) -> Self {
        Self {
            components: vec![AccelComponent::default(); dim],
        }
    }

    pub fn constant(values: &[f64]) -> Self {
        Self {
            components: values.iter().map(|&v| AccelComponent::constant(v)).collect(),
        }
    }

    /// The benchmark profile for agent `i` (1-based), see [`paper_accel`].
    pub fn paper(i: usize) -> Self {
        let s = i as f64;
        Self {
            components: vec![
                AccelComponent {
                    sin_amp: s,
                    sin_freq: 5.0,
                    ramp: 0.1 * s,
                    ..AccelComponent::default()
                },
                AccelComponent {
                    cos_amp: 3.0 * s,
                    cos_freq: 3.0,
                    ramp: 0.2 * s,
                    ..AccelComponent::default()
                },
                AccelComponent {
                    ramp: 0.3 * s,
                    ..AccelComponent::default()
                },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, t: f64) -> Vector {
        Vector::from_iterator(self.dim(), self.components.iter().map(|c| c.eval(t)))
    }

    pub fn eval_left(&self, t: f64) -> Vector {
        Vector::from_iterator(self.dim(), self.components.iter().map(|c| c.eval_left(t)))
    }

    /// Write `a(t)` into `out` without allocating.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(t);
        }
    }

    /// Acceleration as seen by an integrator stage inside a step that
    /// started at `step_start`: right limit at the start, left limit at
    /// later stages, so jumps on step boundaries are integrated exactly.
    pub fn eval_stage_into(&self, t: f64, step_start: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = if t > step_start { c.eval_left(t) } else { c.eval(t) };
        }
    }
}

/// Reference position, velocity and acceleration at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSample {
    pub t: f64,
    pub r: Vector,
    pub vr: Vector,
    pub ar: Vector,
}

impl ReferenceSample {
    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(&self.vr).chain(&self.ar).all(|v| v.is_finite())
    }
}

/// A per-agent reference: acceleration profile plus initial position and
/// velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignal {
    pub accel: AccelProfile,
    pub r0: Vector,
    pub v0: Vector,
}

impl ReferenceSignal {
    pub fn new(accel: AccelProfile, r0: Vector, v0: Vector) -> Result<Self, SignalError> {
        if r0.len() != accel.dim() || v0.len() != accel.dim() {
            return Err(SignalError::Dimension {
                profile: accel.dim(),
                initial: r0.len().max(v0.len()),
            });
        }
        Ok(Self { accel, r0, v0 })
    }

    /// Starts at rest at the origin.
    pub fn from_rest(accel: AccelProfile) -> Self {
        let dim = accel.dim();
        Self {
            accel,
            r0: Vector::zeros(dim),
            v0: Vector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.accel.dim()
    }

    /// Exact evaluation from the analytic integrals.
    pub fn closed_form(&self, t: f64) -> ReferenceSample {
        let dim = self.dim();
        let mut r = Vector::zeros(dim);
        let mut vr = Vector::zeros(dim);
        for (d, c) in self.accel.components.iter().enumerate() {
            let (once, twice) = c.integrals(t);
            vr[d] = self.v0[d] + once;
            r[d] = self.r0[d] + self.v0[d] * t + twice;
        }
        ReferenceSample {
            t,
            r,
            vr,
            ar: self.accel.eval(t),
        }
    }

    pub fn co_integrated(&self, dt: f64, integrator: Integrator) -> Result<CoIntegrated, SignalError> {
        CoIntegrated::new(self.clone(), dt, integrator)
    }
}

/// A reference whose `(r, vʳ)` is advanced by a fixed-step integrator.
/// Samples must be requested at non-decreasing times.
#[derive(Debug, Clone)]
pub struct CoIntegrated {
    signal: ReferenceSignal,
    dt: f64,
    integrator: Integrator,
    t: f64,
    state: Vec<f64>,
    scratch: Scratch,
}

impl CoIntegrated {
    pub fn new(signal: ReferenceSignal, dt: f64, integrator: Integrator) -> Result<Self, SignalError> {
        if !(dt > 0.0) {
            return Err(SignalError::StepSize(dt));
        }
        let state = signal.r0.iter().chain(signal.v0.iter()).copied().collect();
        Ok(Self {
            signal,
            dt,
            integrator,
            t: 0.0,
            state,
            scratch: Scratch::default(),
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn sample(&mut self, t: f64) -> Result<ReferenceSample, SignalError> {
        if t < self.t - 1e-12 {
            return Err(SignalError::TimeRegression {
                requested: t,
                current: self.t,
            });
        }
        let dim = self.signal.dim();
        let accel = &self.signal.accel;
        let integrator = self.integrator;
        let advance = |t0: f64, h: f64, state: &mut [f64], scratch: &mut Scratch| {
            let mut rhs = |s: f64, y: &[f64], dy: &mut [f64]| {
                dy[..dim].copy_from_slice(&y[dim..]);
                accel.eval_stage_into(s, t0, &mut dy[dim..]);
            };
            integrator.step(&mut rhs, t0, h, state, scratch);
        };
        // Whole steps, then one partial step to land on t.
        let mut steps = 0u64;
        let start = self.t;
        loop {
            let next = start + (steps + 1) as f64 * self.dt;
            if next > t + 1e-9 * self.dt {
                break;
            }
            advance(self.t, self.dt, &mut self.state, &mut self.scratch);
            steps += 1;
            self.t = next;
        }
        let remaining = t - self.t;
        if remaining > 1e-9 * self.dt {
            advance(self.t, remaining, &mut self.state, &mut self.scratch);
        }
        self.t = self.t.max(t);
        Ok(ReferenceSample {
            t,
            r: Vector::from_column_slice(&self.state[..dim]),
            vr: Vector::from_column_slice(&self.state[dim..]),
            ar: accel.eval(t),
        })
    }
}

pub fn l1(v: &Vector) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `ψ = ‖r‖₁ + ‖vʳ‖₁ + ‖aʳ‖₁ + γ`.
pub fn psi_gain(sample: &ReferenceSample, gamma: f64) -> f64 {
    l1(&sample.r) + l1(&sample.vr) + l1(&sample.ar) + gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Composite Simpson on [a, b].
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let x = a + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn benchmark_accel_at_zero() {
        assert_eq!(paper_accel(1, 0.0), [0.0, 3.0, 0.0]);
        assert_eq!(paper_accel(4, 0.0), [0.0, 12.0, 0.0]);
    }

    #[test]
    fn benchmark_accel_at_one() {
        let a = paper_accel(2, 1.0);
        // sin 5 = −0.9589242746631385, cos 3 = −0.9899924966004454
        let expected = [
            2.0 * (-0.958_924_274_663_138_5 + 0.1),
            2.0 * (3.0 * -0.989_992_496_600_445_4 + 0.2),
            0.6,
        ];
        for d in 0..3 {
            assert!((a[d] - expected[d]).abs() < 1e-14);
        }
    }

    #[test]
    fn mod2_matches_definition() {
        assert_eq!(mod2(0.0), 0.0);
        assert_eq!(mod2(1.5), 1.5);
        assert_eq!(mod2(2.0), 0.0);
        assert!((mod2(5.25) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn benchmark_profile_matches_formula() {
        for i in 1..=4 {
            let p = AccelProfile::paper(i);
            for k in 0..200 {
                let t = k as f64 * 0.137;
                let a = p.eval(t);
                let b = paper_accel(i, t);
                for d in 0..3 {
                    assert!((a[d] - b[d]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        let c = AccelComponent {
            constant: 0.4,
            sin_amp: 1.3,
            sin_freq: 5.0,
            cos_amp: -2.0,
            cos_freq: 3.0,
            ramp: 0.7,
        };
        for &t in &[0.3f64, 1.0, 2.0, 3.7, 6.0, 9.1] {
            // Integrate piecewise so the mod(t,2) jumps sit on panel edges.
            let mut once = 0.0;
            let mut a = 0.0f64;
            while a < t {
                let b = (2.0 * ((a / 2.0).floor() + 1.0)).min(t);
                once += simpson(|s| c.eval(s.min(b - 1e-15)), a, b, 2000);
                a = b;
            }
            let (g1, g2) = c.integrals(t);
            assert!((g1 - once).abs() < 1e-8, "t={t}: {g1} vs {once}");

            let twice = {
                let mut acc = 0.0;
                let mut a = 0.0;
                while a < t {
                    let b = (a + 0.5).min(t);
                    acc += simpson(|s| c.integrals(s).0, a, b, 200);
                    a = b;
                }
                acc
            };
            assert!((g2 - twice).abs() < 1e-7, "t={t}: {g2} vs {twice}");
        }
    }

    #[test]
    fn constant_reference_stays_put() {
        let c = Vector::from_vec(vec![1.5, -2.0]);
        let sig = ReferenceSignal::new(AccelProfile::zero(2), c.clone(), Vector::zeros(2)).unwrap();
        let mut co = sig.co_integrated(1e-3, Integrator::Rk4).unwrap();
        for &t in &[0.0, 0.5, 3.0] {
            let s = co.sample(t).unwrap();
            assert_eq!(s.r, c);
            assert_eq!(s.vr, Vector::zeros(2));
            assert_eq!(s.ar, Vector::zeros(2));
            assert_eq!(sig.closed_form(t).r, c);
        }
    }

    #[test]
    fn constant_accel_kinematics() {
        let g = 2.5;
        let sig = ReferenceSignal::from_rest(AccelProfile::constant(&[g]));
        let mut co = sig.co_integrated(1e-3, Integrator::Rk4).unwrap();
        let s = co.sample(1.0).unwrap();
        assert!((s.vr[0] - g).abs() < 1e-9);
        assert!((s.r[0] - g / 2.0).abs() < 1e-9);
    }

    #[test]
    fn benchmark_velocity_small_time_series() {
        // v₂(t) = ∫ 3cos 3τ + 0.2τ² dτ = sin 3t + 0.2t³/3 ≈ 3t − 4.5t³ + ...
        let sig = ReferenceSignal::from_rest(AccelProfile::paper(1));
        let mut co = sig.co_integrated(1e-4, Integrator::Rk4).unwrap();
        let t = 0.01;
        let s = co.sample(t).unwrap();
        let series = 3.0 * t - 4.5 * t.powi(3) + 0.2 * t.powi(3) / 3.0;
        assert!((s.vr[1] - series).abs() < 1e-9);
        assert!((s.vr[1] - 3.0 * t).abs() < 1e-5);
    }

    #[test]
    fn co_integration_tracks_closed_form_through_jumps() {
        let sig = ReferenceSignal::new(
            AccelProfile::paper(3),
            Vector::from_vec(vec![1.0, -1.0, 0.5]),
            Vector::from_vec(vec![0.2, 0.0, -0.3]),
        )
        .unwrap();
        let mut co = sig.co_integrated(1e-3, Integrator::Rk4).unwrap();
        for k in 1..=10 {
            let t = k as f64 * 0.9;
            let a = co.sample(t).unwrap();
            let b = sig.closed_form(t);
            assert!((&a.r - &b.r).amax() < 1e-6, "t={t}");
            assert!((&a.vr - &b.vr).amax() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn rejects_time_regression() {
        let sig = ReferenceSignal::from_rest(AccelProfile::zero(1));
        let mut co = sig.co_integrated(1e-2, Integrator::Euler).unwrap();
        co.sample(1.0).unwrap();
        assert!(matches!(
            co.sample(0.5),
            Err(SignalError::TimeRegression { .. })
        ));
        assert!(co.sample(1.0).is_ok());
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ReferenceSignal::new(AccelProfile::zero(2), Vector::zeros(3), Vector::zeros(2)).is_err());
        let sig = ReferenceSignal::from_rest(AccelProfile::zero(1));
        assert!(sig.co_integrated(0.0, Integrator::Rk4).is_err());
    }

    #[test]
    fn first_order_consistency() {
        let sig = ReferenceSignal::from_rest(AccelProfile::paper(2));
        for &dt in &[1e-2, 5e-3] {
            let mut co = sig.co_integrated(dt, Integrator::Rk4).unwrap();
            let s0 = co.sample(1.3).unwrap();
            let s1 = co.sample(1.3 + dt).unwrap();
            let defect = (&s1.r - &s0.r - dt * &s0.vr).amax();
            // Second-order remainder ½dt²‖a‖ bounds the defect.
            assert!(defect <= 0.5 * dt * dt * s0.ar.amax() * 1.5 + 1e-12);
        }
    }

    #[test]
    fn psi_examples() {
        let zero = ReferenceSample {
            t: 0.0,
            r: Vector::zeros(3),
            vr: Vector::zeros(3),
            ar: Vector::zeros(3),
        };
        assert_eq!(psi_gain(&zero, 0.001), 0.001);
        let s = ReferenceSample {
            t: 0.0,
            r: Vector::from_vec(vec![1.0, -2.0, 0.0]),
            vr: Vector::from_vec(vec![0.0, 1.0, 0.0]),
            ar: Vector::from_vec(vec![3.0, 0.0, -1.0]),
        };
        assert_eq!(psi_gain(&s, 0.5), 8.5);
    }

    proptest! {
        #[test]
        fn psi_homogeneity(vals in prop::collection::vec(-100.0f64..100.0, 9), gamma in 1e-6f64..10.0) {
            let s = ReferenceSample {
                t: 0.0,
                r: Vector::from_column_slice(&vals[0..3]),
                vr: Vector::from_column_slice(&vals[3..6]),
                ar: Vector::from_column_slice(&vals[6..9]),
            };
            let doubled = ReferenceSample { t: 0.0, r: 2.0 * &s.r, vr: 2.0 * &s.vr, ar: 2.0 * &s.ar };
            let lhs = psi_gain(&doubled, gamma);
            let rhs = 2.0 * (psi_gain(&s, gamma) - gamma) + gamma;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            prop_assert!(psi_gain(&s, gamma) >= gamma);
        }
    }
}
