//! The flow `dy/dx = sigma(t, x, y)`, `y(t, 0) = v`, solved by fixed-step
//! RK4 in `x` with `t` frozen.
//!
//! Sensitivities come from the exponential formulas
//!
//! ```text
//! d_v phi = exp(I(x)),            I(u) = int_0^u d_y sigma(t, z, phi(t, z, v)) dz
//! d_t phi = exp(I(x)) * J(x),     J(u) = int_0^u d_t sigma(t, z, phi(t, z, v)) exp(-I(z)) dz
//! ```
//!
//! with `I` and `J` carried as extra RK4 components alongside `phi`.

use crate::coeff::Diffusion;
use crate::error::{Error, Result};
use crate::expr::EvalError;

pub const DEFAULT_X_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FlowField<D> {
    diffusion: D,
    x_step: f64,
}

/// `phi` and its partials at one `(t, x, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPoint {
    pub phi: f64,
    pub dv: f64,
    pub dt: f64,
}

fn flow_err(t: f64, x: f64, y: f64) -> impl Fn(EvalError) -> Error {
    move |source| Error::Flow { t, x, y, source }
}

impl<D: Diffusion> FlowField<D> {
    pub fn new(diffusion: D, x_step: f64) -> Result<Self> {
        if !(x_step > 0.0 && x_step.is_finite()) {
            return Err(Error::invalid(
                "x_step",
                format!("must be positive, got {x_step}"),
            ));
        }
        Ok(Self { diffusion, x_step })
    }

    pub fn diffusion(&self) -> &D {
        &self.diffusion
    }

    pub fn x_step(&self) -> f64 {
        self.x_step
    }

    /// Number of equal RK4 steps used to cover `|span|`.
    fn steps_for(&self, span: f64) -> usize {
        (span.abs() / self.x_step).ceil().max(1.0) as usize
    }

    fn sigma(&self, t: f64, u: f64, y: f64) -> Result<f64> {
        let s = self.diffusion.sigma(t, u, y).map_err(flow_err(t, u, y))?;
        Ok(s)
    }

    /// Integrates `y` from `from` to `to` starting at `y0`.
    fn integrate(&self, t: f64, from: f64, to: f64, y0: f64) -> Result<f64> {
        if from == to {
            return Ok(y0);
        }
        let n = self.steps_for(to - from);
        let h = (to - from) / n as f64;
        let mut y = y0;
        for k in 0..n {
            let u = from + k as f64 * h;
            let k1 = self.sigma(t, u, y)?;
            let k2 = self.sigma(t, u + 0.5 * h, y + 0.5 * h * k1)?;
            let k3 = self.sigma(t, u + 0.5 * h, y + 0.5 * h * k2)?;
            let k4 = self.sigma(t, u + h, y + h * k3)?;
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !y.is_finite() {
                return Err(Error::Flow {
                    t,
                    x: u + h,
                    y,
                    source: EvalError::NonFinite { t, x: u + h, y },
                });
            }
        }
        Ok(y)
    }

    /// `phi(t, x, v)`; exactly `v` at `x = 0`.
    pub fn phi(&self, t: f64, x: f64, v: f64) -> Result<f64> {
        self.integrate(t, 0.0, x, v)
    }

    /// The `v` with `phi(t, x, v) = w`, by integrating backward from `x` to 0.
    pub fn phi_inverse(&self, t: f64, x: f64, w: f64) -> Result<f64> {
        self.integrate(t, x, 0.0, w)
    }

    /// `phi(t, -x, phi(t, x, v)) - v`. Vanishes (up to RK4 error) when sigma
    /// does not depend on `x`; in general it does not.
    pub fn composition_gap(&self, t: f64, x: f64, v: f64) -> Result<f64> {
        let w = self.phi(t, x, v)?;
        Ok(self.phi(t, -x, w)? - v)
    }

    /// `phi` together with `d_v phi` and `d_t phi`.
    pub fn sensitivities(&self, t: f64, x: f64, v: f64) -> Result<FlowPoint> {
        if x == 0.0 {
            return Ok(FlowPoint {
                phi: v,
                dv: 1.0,
                dt: 0.0,
            });
        }
        let with_time = !self.diffusion.time_independent();
        let n = self.steps_for(x);
        let h = x / n as f64;
        // (y, I, J)
        let rhs = |u: f64, s: [f64; 3]| -> Result<[f64; 3]> {
            let j = self
                .diffusion
                .jet(t, u, s[0])
                .map_err(flow_err(t, u, s[0]))?;
            let dj = if with_time { j.dt * (-s[1]).exp() } else { 0.0 };
            Ok([j.value, j.dy, dj])
        };
        let axpy =
            |s: [f64; 3], a: f64, d: [f64; 3]| [s[0] + a * d[0], s[1] + a * d[1], s[2] + a * d[2]];
        let mut state = [v, 0.0, 0.0];
        for k in 0..n {
            let u = k as f64 * h;
            let k1 = rhs(u, state)?;
            let k2 = rhs(u + 0.5 * h, axpy(state, 0.5 * h, k1))?;
            let k3 = rhs(u + 0.5 * h, axpy(state, 0.5 * h, k2))?;
            let k4 = rhs(u + h, axpy(state, h, k3))?;
            for i in 0..3 {
                state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if state.iter().any(|s| !s.is_finite()) {
                return Err(Error::Flow {
                    t,
                    x: u + h,
                    y: state[0],
                    source: EvalError::NonFinite {
                        t,
                        x: u + h,
                        y: state[0],
                    },
                });
            }
        }
        let dv = state[1].exp();
        Ok(FlowPoint {
            phi: state[0],
            dv,
            dt: dv * state[2],
        })
    }

    pub fn phi_dv(&self, t: f64, x: f64, v: f64) -> Result<f64> {
        Ok(self.sensitivities(t, x, v)?.dv)
    }

    pub fn phi_dt(&self, t: f64, x: f64, v: f64) -> Result<f64> {
        Ok(self.sensitivities(t, x, v)?.dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::CoefficientSet;

    fn field(sigma: &str) -> FlowField<CoefficientSet> {
        let cs = CoefficientSet::parse("0", "0", sigma, 10.0, 10.0).unwrap();
        FlowField::new(cs, DEFAULT_X_STEP).unwrap()
    }

    #[test]
    fn constant_sigma_is_linear() {
        let ff = field("0.7");
        for &(x, v) in &[(1.3, 0.2), (-2.0, 1.0), (0.0, -4.0)] {
            assert!((ff.phi(0.4, x, v).unwrap() - (v + 0.7 * x)).abs() < 1e-12);
            assert!((ff.phi_inverse(0.4, x, v).unwrap() - (v - 0.7 * x)).abs() < 1e-12);
            assert_eq!(ff.phi_dv(0.4, x, v).unwrap(), 1.0);
            assert_eq!(ff.phi_dt(0.4, x, v).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_offset_is_identity() {
        let ff = field("tanh(y) + t");
        assert_eq!(ff.phi(0.3, 0.0, 1.25).unwrap(), 1.25);
        assert_eq!(ff.phi_inverse(0.3, 0.0, 1.25).unwrap(), 1.25);
        let p = ff.sensitivities(0.3, 0.0, 1.25).unwrap();
        assert_eq!((p.dv, p.dt), (1.0, 0.0));
    }

    #[test]
    fn tanh_flow_against_separation_of_variables() {
        // d/dx asinh... : sinh(phi) = e^x sinh(v)
        let ff = field("tanh(y)");
        for &(x, v) in &[(1.0f64, 0.5f64), (-1.5, 2.0), (2.0, -0.3)] {
            let phi: f64 = ff.phi(0.0, x, v).unwrap();
            let expected = x.exp() * v.sinh();
            assert!((phi.sinh() - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_in_time_sigma() {
        let ff = field("(1 + t) * 0.5");
        let (t, x, v) = (0.6, 1.7, -0.4);
        assert!((ff.phi(t, x, v).unwrap() - (v + 0.5 * (1.0 + t) * x)).abs() < 1e-12);
        assert!((ff.phi_dt(t, x, v).unwrap() - 0.5 * x).abs() < 1e-8);
    }

    #[test]
    fn x_dependent_sigma_breaks_the_reflection_identity() {
        // phi = v + x^2/2, so phi(-x, phi(x, v)) = v + x^2
        let ff = field("x");
        let gap = ff.composition_gap(0.0, 1.0, 0.0).unwrap();
        assert!((gap - 1.0).abs() < 1e-10);
        let inv = ff
            .phi_inverse(0.0, 1.0, ff.phi(0.0, 1.0, 0.3).unwrap())
            .unwrap();
        assert!((inv - 0.3).abs() < 1e-12);
    }

    #[test]
    fn eval_failures_carry_location() {
        let ff = field("1 / (y - 1)");
        match ff.phi(0.0, 1.0, 1.0).unwrap_err() {
            Error::Flow { t, x, y, source } => {
                assert_eq!((t, x, y), (0.0, 0.0, 1.0));
                assert!(matches!(source, EvalError::DivisionByZero { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sensitivities_need_a_derivative() {
        let ff = field("abs(y) + 1");
        assert!(ff.phi(0.0, 1.0, 0.5).is_ok());
        assert!(matches!(
            ff.phi_dv(0.0, 1.0, 0.5),
            Err(Error::Flow {
                source: EvalError::NotDifferentiable,
                ..
            })
        ));
    }
}
