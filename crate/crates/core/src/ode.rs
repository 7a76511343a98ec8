//! Fixed-step explicit integrators over flat state vectors.
//!
//! No event location is performed: a right-hand side with jump
//! discontinuities (signum couplings, piecewise inputs) is simply sampled
//! at the stage points.

use std::fmt;
use std::str::FromStr;

/// Fixed-step integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
        }
    }

    /// Advance `y` in place from `t` to `t + dt`.
    ///
    /// `rhs(t, y, dy)` must overwrite every entry of `dy`.
    pub fn step<F>(self, rhs: &mut F, t: f64, dt: f64, y: &mut [f64], scratch: &mut Scratch)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        scratch.resize(n);
        match self {
            Integrator::Euler => {
                rhs(t, y, &mut scratch.k1);
                for (yi, ki) in y.iter_mut().zip(&scratch.k1) {
                    *yi += dt * ki;
                }
            }
            Integrator::Rk4 => {
                let half = 0.5 * dt;
                let Scratch {
                    k1,
                    k2,
                    k3,
                    k4,
                    tmp,
                } = scratch;
                rhs(t, y, k1);
                for i in 0..n {
                    tmp[i] = y[i] + half * k1[i];
                }
                rhs(t + half, tmp, k2);
                for i in 0..n {
                    tmp[i] = y[i] + half * k2[i];
                }
                rhs(t + half, tmp, k3);
                for i in 0..n {
                    tmp[i] = y[i] + dt * k3[i];
                }
                rhs(t + dt, tmp, k4);
                for i in 0..n {
                    y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Integrator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(format!("unknown integrator `{other}` (expected euler or rk4)")),
        }
    }
}

/// Stage buffers reused across steps.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn resize(&mut self, n: usize) {
        if self.k1.len() != n {
            for buf in [
                &mut self.k1,
                &mut self.k2,
                &mut self.k3,
                &mut self.k4,
                &mut self.tmp,
            ] {
                buf.resize(n, 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(integrator: Integrator, dt: f64, steps: usize) -> f64 {
        let mut y = [1.0];
        let mut scratch = Scratch::default();
        let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
        for k in 0..steps {
            integrator.step(&mut rhs, k as f64 * dt, dt, &mut y, &mut scratch);
        }
        y[0]
    }

    #[test]
    fn rk4_decay_is_fourth_order() {
        let exact = (-1.0f64).exp();
        let e1 = (integrate(Integrator::Rk4, 0.1, 10) - exact).abs();
        let e2 = (integrate(Integrator::Rk4, 0.05, 20) - exact).abs();
        let ratio = e1 / e2;
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn euler_decay_is_first_order() {
        let exact = (-1.0f64).exp();
        let e1 = (integrate(Integrator::Euler, 0.01, 100) - exact).abs();
        let e2 = (integrate(Integrator::Euler, 0.005, 200) - exact).abs();
        let ratio = e1 / e2;
        assert!(ratio > 1.9 && ratio < 2.1, "ratio {ratio}");
    }

    #[test]
    fn parses_names() {
        assert_eq!("RK4".parse::<Integrator>().unwrap(), Integrator::Rk4);
        assert_eq!("euler".parse::<Integrator>().unwrap(), Integrator::Euler);
        assert!("midpoint".parse::<Integrator>().is_err());
    }
}
