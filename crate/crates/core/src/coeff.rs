//! Coefficient sets `b(t,x,y)`, `h(t,x,y)`, `sigma(t,x,y)` and the partials
//! of `sigma` the transformation needs.

use rand::RngExt;

use crate::error::{Error, Result};
use crate::expr::{parse, DiffError, EvalError, Expr, Var};
use crate::rng::rng_for;

/// `sigma` with its partial derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaJet {
    pub value: f64,
    pub dt: f64,
    pub dx: f64,
    pub dy: f64,
}

/// A diffusion coefficient the flow can integrate.
///
/// `sigma` must always work. `jet` may fail for coefficients without a
/// derivative, which rules out the sensitivities but not the flow itself.
pub trait Diffusion: Sync {
    fn sigma(&self, t: f64, x: f64, y: f64) -> Result<f64, EvalError>;

    fn jet(&self, t: f64, x: f64, y: f64) -> Result<SigmaJet, EvalError>;

    /// True when `d sigma / dt` vanishes identically.
    fn time_independent(&self) -> bool {
        false
    }
}

impl<D: Diffusion + ?Sized> Diffusion for &D {
    fn sigma(&self, t: f64, x: f64, y: f64) -> Result<f64, EvalError> {
        (**self).sigma(t, x, y)
    }

    fn jet(&self, t: f64, x: f64, y: f64) -> Result<SigmaJet, EvalError> {
        (**self).jet(t, x, y)
    }

    fn time_independent(&self) -> bool {
        (**self).time_independent()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPartials {
    pub dt: Expr,
    pub dx: Expr,
    pub dy: Expr,
}

impl SigmaPartials {
    pub fn of(sigma: &Expr) -> Result<Self, DiffError> {
        Ok(Self {
            dt: sigma.differentiate(Var::T)?,
            dx: sigma.differentiate(Var::X)?,
            dy: sigma.differentiate(Var::Y)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub b: Expr,
    pub h: Expr,
    pub sigma: Expr,
    partials: Result<SigmaPartials, DiffError>,
    /// User-asserted Lipschitz constant, checked by [`CoefficientSet::audit`].
    pub lipschitz_k: f64,
    /// User-asserted bound on `|b|`, `|h|`, `|sigma|`.
    pub bound_m: f64,
}

impl CoefficientSet {
    pub fn new(b: Expr, h: Expr, sigma: Expr, lipschitz_k: f64, bound_m: f64) -> Result<Self> {
        if !(lipschitz_k > 0.0 && lipschitz_k.is_finite()) {
            return Err(Error::invalid(
                "lipschitz_K",
                format!("must be positive, got {lipschitz_k}"),
            ));
        }
        if !(bound_m > 0.0 && bound_m.is_finite()) {
            return Err(Error::invalid(
                "bound_M",
                format!("must be positive, got {bound_m}"),
            ));
        }
        let partials = SigmaPartials::of(&sigma);
        Ok(Self {
            b,
            h,
            sigma,
            partials,
            lipschitz_k,
            bound_m,
        })
    }

    pub fn parse(b: &str, h: &str, sigma: &str, lipschitz_k: f64, bound_m: f64) -> Result<Self> {
        Self::new(parse(b)?, parse(h)?, parse(sigma)?, lipschitz_k, bound_m)
    }

    /// The symbolic partials of `sigma`, or why they do not exist.
    pub fn partials(&self) -> Result<&SigmaPartials, DiffError> {
        self.partials.as_ref().map_err(Clone::clone)
    }

    pub fn is_smooth(&self) -> bool {
        self.partials.is_ok()
    }

    /// Samples `samples` points of the box and checks the declared bound and
    /// Lipschitz constant. The first violation is returned as an error.
    ///
    /// Only sampled points are checked; nothing is claimed off the sample.
    pub fn audit(&self, bx: &AuditBox, samples: usize, seed: u64) -> Result<AuditReport> {
        const STEP: f64 = 1e-6;
        let mut rng = rng_for(seed);
        let mut report = AuditReport {
            samples,
            max_abs: 0.0,
            max_quotient: 0.0,
        };
        let named = [("b", &self.b), ("h", &self.h), ("sigma", &self.sigma)];
        for _ in 0..samples {
            let p = [
                rng.random::<f64>() * bx.t_max,
                (2.0 * rng.random::<f64>() - 1.0) * bx.x_max,
                (2.0 * rng.random::<f64>() - 1.0) * bx.y_max,
            ];
            for (name, e) in named {
                let at = |q: [f64; 3]| {
                    e.eval(q[0], q[1], q[2])
                        .map_err(|err| Error::Audit(format!("{name}: {err}")))
                };
                let v = at(p)?;
                if v.abs() > self.bound_m {
                    return Err(Error::Audit(format!(
                        "|{name}(t={}, x={}, y={})| = {} exceeds bound_M = {}",
                        p[0],
                        p[1],
                        p[2],
                        v.abs(),
                        self.bound_m
                    )));
                }
                report.max_abs = report.max_abs.max(v.abs());
                for axis in 0..3 {
                    let mut q = p;
                    q[axis] += STEP;
                    let quotient = (at(q)? - v).abs() / STEP;
                    if quotient > 1.05 * self.lipschitz_k {
                        return Err(Error::Audit(format!(
                            "{name} difference quotient {quotient} in {} at (t={}, x={}, y={}) exceeds 1.05 * lipschitz_K = {}",
                            ["t", "x", "y"][axis],
                            p[0],
                            p[1],
                            p[2],
                            1.05 * self.lipschitz_k
                        )));
                    }
                    report.max_quotient = report.max_quotient.max(quotient);
                }
            }
        }
        Ok(report)
    }
}

impl Diffusion for CoefficientSet {
    fn sigma(&self, t: f64, x: f64, y: f64) -> Result<f64, EvalError> {
        self.sigma.eval(t, x, y)
    }

    fn jet(&self, t: f64, x: f64, y: f64) -> Result<SigmaJet, EvalError> {
        let p = self
            .partials
            .as_ref()
            .map_err(|_| EvalError::NotDifferentiable)?;
        Ok(SigmaJet {
            value: self.sigma.eval(t, x, y)?,
            dt: p.dt.eval(t, x, y)?,
            dx: p.dx.eval(t, x, y)?,
            dy: p.dy.eval(t, x, y)?,
        })
    }

    fn time_independent(&self) -> bool {
        matches!(&self.partials, Ok(p) if p.dt.is_zero())
    }
}

/// `[0, t_max] x [-x_max, x_max] x [-y_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditBox {
    pub t_max: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditReport {
    pub samples: usize,
    pub max_abs: f64,
    pub max_quotient: f64,
}
