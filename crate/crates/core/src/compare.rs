//! Grid certification of comparison hypotheses and Monte Carlo checks of the
//! resulting pathwise orderings.
//!
//! Everything here is sampled: a certificate covers the grid points it lists
//! and nothing in between. The expression language only has continuous
//! primitives, which is the (weak) justification for trusting a fine grid.

use std::fmt;

use rayon::prelude::*;

use crate::coeff::CoefficientSet;
use crate::doss::{solve_doss, transformed_drifts, Method, PathSolution};
use crate::driver::{sample_path, uniform_grid, ControlKind, DrivenPath, VolatilityBand};
use crate::error::{Error, Result};
use crate::euler::solve_euler;
use crate::expr::{Expr, Var};
use crate::flow::FlowField;

/// Slack allowed on the sign conditions.
pub const CONDITION_SLACK: f64 = 1e-12;
/// Pathwise tolerance when both sides use the Doss scheme.
pub const DOSS_TOL: f64 = 1e-9;

/// One G-SDE with its starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub coeffs: CoefficientSet,
    pub x0: f64,
}

/// Explicit upper functions `sigma~, g~, f~` of `(t, x, v)`; `v` is written
/// as `y` in the expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub sigma: Expr,
    pub g: Expr,
    pub f: Expr,
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Upper {
    System(System),
    Bounds(Bounds),
}

impl Upper {
    pub fn x0(&self) -> f64 {
        match self {
            Upper::System(s) => s.x0,
            Upper::Bounds(b) => b.x0,
        }
    }
}

/// `[t.0, t.1] x [x.0, x.1] x [v.0, v.1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertBox {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub v: (f64, f64),
}

impl CertBox {
    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("t", self.t), ("x", self.x), ("v", self.v)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(
                    "box",
                    format!("{name} range [{lo}, {hi}] is not an interval"),
                ));
            }
        }
        Ok(())
    }

    /// Node `i` of `density` equally spaced points on each axis.
    fn point(&self, density: usize, i: usize) -> [f64; 3] {
        let at = |(lo, hi): (f64, f64), k: usize| {
            if density == 1 {
                lo
            } else {
                lo + (hi - lo) * k as f64 / (density - 1) as f64
            }
        };
        let (it, rest) = (i / (density * density), i % (density * density));
        [
            at(self.t, it),
            at(self.x, rest / density),
            at(self.v, rest % density),
        ]
    }
}

impl fmt::Display for CertBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t in [{}, {}], x in [{}, {}], v in [{}, {}]",
            self.t.0, self.t.1, self.x.0, self.x.1, self.v.0, self.v.1
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSpec {
    pub left: System,
    pub right: Upper,
    pub band: VolatilityBand,
    pub cert_box: CertBox,
    /// Points per axis of the certification grid.
    pub grid_density: usize,
    pub x_step: f64,
}

impl ComparisonSpec {
    fn validate(&self) -> Result<()> {
        self.cert_box.validate()?;
        if self.grid_density == 0 {
            return Err(Error::invalid("grid_density", "must be positive"));
        }
        if self.left.x0 > self.right.x0() {
            return Err(Error::invalid(
                "x0",
                format!(
                    "left start {} exceeds right start {}",
                    self.left.x0,
                    self.right.x0()
                ),
            ));
        }
        Ok(())
    }
}

/// Result of scanning the certification grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Both conditions hold at every grid point.
    pub certified: bool,
    /// Largest `2G(f - f~) + g - g~`, with its `(t, x, v)`.
    pub worst: f64,
    pub worst_at: [f64; 3],
    /// Largest `x (sigma - sigma~)`, with its `(t, x, y)`.
    pub sigma_worst: f64,
    pub sigma_worst_at: [f64; 3],
    pub points: usize,
}

/// First index wins ties, so the reduction does not depend on scheduling.
fn index_ordered_max(values: Vec<(f64, [f64; 3])>) -> (f64, [f64; 3]) {
    values
        .into_iter()
        .fold((f64::NEG_INFINITY, [f64::NAN; 3]), |best, cur| {
            if cur.0 > best.0 || (cur.0.is_nan() && !best.0.is_nan()) {
                cur
            } else {
                best
            }
        })
}

fn eval_at(e: &Expr, what: &'static str, p: [f64; 3]) -> Result<f64> {
    e.eval(p[0], p[1], p[2])
        .map_err(|err| Error::invalid(what, err.to_string()))
}

/// Scans `2G(f - f~) + (g - g~) <= 0` and `x sigma <= x sigma~` over the box.
pub fn certify_g_condition(spec: &ComparisonSpec) -> Result<Certificate> {
    spec.validate()?;
    let left_ff = FlowField::new(&spec.left.coeffs, spec.x_step)?;
    let right_ff = match &spec.right {
        Upper::System(s) => Some(FlowField::new(&s.coeffs, spec.x_step)?),
        Upper::Bounds(_) => None,
    };
    let sigma_tilde = match &spec.right {
        Upper::System(s) => &s.coeffs.sigma,
        Upper::Bounds(b) => &b.sigma,
    };
    let d = spec.grid_density;
    let points = d * d * d;
    let scanned: Vec<Result<((f64, [f64; 3]), (f64, [f64; 3]))>> = (0..points)
        .into_par_iter()
        .map(|i| {
            let p = spec.cert_box.point(d, i);
            let [t, x, v] = p;
            let l = transformed_drifts(&spec.left.coeffs, &left_ff, t, x, v)?;
            let (g, f) = match (&spec.right, &right_ff) {
                (Upper::System(s), Some(ff)) => {
                    let r = transformed_drifts(&s.coeffs, ff, t, x, v)?;
                    (r.g, r.f)
                }
                (Upper::Bounds(b), _) => (eval_at(&b.g, "g~", p)?, eval_at(&b.f, "f~", p)?),
                _ => unreachable!("flow exists for system right sides"),
            };
            let cond = 2.0 * spec.band.g(l.f - f) + (l.g - g);
            let s = eval_at(&spec.left.coeffs.sigma, "sigma", p)?;
            let st = eval_at(sigma_tilde, "sigma~", p)?;
            Ok(((cond, p), (x * (s - st), p)))
        })
        .collect();
    let scanned = scanned.into_iter().collect::<Result<Vec<_>>>()?;
    let (conds, sigmas): (Vec<_>, Vec<_>) = scanned.into_iter().unzip();
    let (worst, worst_at) = index_ordered_max(conds);
    let (sigma_worst, sigma_worst_at) = index_ordered_max(sigmas);
    Ok(Certificate {
        certified: worst <= CONDITION_SLACK && sigma_worst <= CONDITION_SLACK,
        worst,
        worst_at,
        sigma_worst,
        sigma_worst_at,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Consistent,
    Violated,
    HypothesesFail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Consistent => "consistent",
            Verdict::Violated => "violated",
            Verdict::HypothesesFail => "hypotheses-fail",
        })
    }
}

/// A grid node where the left solution exceeds the right one.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub seed: u64,
    pub control_id: String,
    pub index: usize,
    pub t: f64,
    pub x_left: f64,
    pub x_right: f64,
}

/// A path on which a solver failed; it is skipped, not silently dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFailure {
    pub seed: u64,
    pub control_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseConfig {
    pub horizon: f64,
    pub grid_n: usize,
    pub controls: Vec<ControlKind>,
    /// Replicates per control; replicate `i` reuses its seed across controls.
    pub paths: usize,
    pub seed: u64,
    pub method: Method,
    /// Multiplier `c` of `c sqrt(dt)` for Euler; `None` picks `3 K sigma_hi`.
    pub tol_c: Option<f64>,
    /// Fixed tolerance replacing the method default.
    pub abs_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub certificate: Certificate,
    pub cert_box: CertBox,
    pub grid_density: usize,
    pub method: Method,
    pub tolerance: f64,
    pub paths_checked: usize,
    pub violations: Vec<Violation>,
    pub failures: Vec<PathFailure>,
    pub verdict: Verdict,
}

impl ComparisonReport {
    pub fn condition_certified_on_grid(&self) -> bool {
        self.certificate.certified
    }
}

/// Heun for `dV~ = g~ dt + f~ d<B>` with the driver frozen per cell, then
/// `X~ = phi~(t, B, V~)`.
fn solve_bounds(
    b: &Bounds,
    ff: &FlowField<CoefficientSet>,
    driver: &DrivenPath,
) -> Result<Vec<f64>> {
    let n = driver.steps();
    let mut v = b.x0;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let (t, x) = (driver.grid[k], driver.b_vals[k]);
        out.push(
            ff.phi(t, x, v)
                .map_err(|e| Error::at_step("bound assembly", k, e))?,
        );
        if k == n {
            break;
        }
        let (dt, dq) = (driver.dt(k), driver.dqv(k));
        let rate = |t: f64, v: f64| -> Result<f64> {
            let p = [t, x, v];
            Ok(eval_at(&b.g, "g~", p)? * dt + eval_at(&b.f, "f~", p)? * dq)
        };
        let k1 = rate(t, v)?;
        let k2 = rate(t + dt, v + k1)?;
        v += 0.5 * (k1 + k2);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "V~",
                step: k + 1,
            });
        }
    }
    Ok(out)
}

fn solve_system(
    s: &System,
    ff: &FlowField<&CoefficientSet>,
    driver: &DrivenPath,
    method: Method,
) -> Result<PathSolution> {
    match method {
        Method::Doss => solve_doss(&s.coeffs, ff, driver, s.x0),
        Method::Euler => solve_euler(&s.coeffs, driver, s.x0),
    }
}

/// Certifies the hypotheses, then solves both sides on identical drivers and
/// flags every node with `X_left > X_right + tol`. The Monte Carlo part runs
/// even when certification fails, as a probe.
pub fn verify_pathwise(spec: &ComparisonSpec, cfg: &PathwiseConfig) -> Result<ComparisonReport> {
    let certificate = certify_g_condition(spec)?;
    if cfg.controls.is_empty() || cfg.paths == 0 {
        return Err(Error::invalid(
            "pathwise",
            "need at least one control and one path",
        ));
    }
    let grid = uniform_grid(cfg.horizon, cfg.grid_n)?;
    let tolerance = match (cfg.abs_tol, cfg.method) {
        (Some(tol), _) => tol,
        (None, Method::Doss) => DOSS_TOL,
        (None, Method::Euler) => {
            let k = match &spec.right {
                Upper::System(s) => spec.left.coeffs.lipschitz_k.max(s.coeffs.lipschitz_k),
                Upper::Bounds(_) => spec.left.coeffs.lipschitz_k,
            };
            let c = cfg.tol_c.unwrap_or(3.0 * k * spec.band.sigma_hi());
            c * (cfg.horizon / cfg.grid_n as f64).sqrt()
        }
    };
    if let (Upper::Bounds(_), Method::Euler) = (&spec.right, cfg.method) {
        return Err(Error::invalid(
            "method",
            "explicit bounds can only be compared with the doss scheme",
        ));
    }
    let left_ff = FlowField::new(&spec.left.coeffs, spec.x_step)?;
    let right_sys_ff = match &spec.right {
        Upper::System(s) => Some(FlowField::new(&s.coeffs, spec.x_step)?),
        Upper::Bounds(_) => None,
    };
    let bound_ff = match &spec.right {
        Upper::Bounds(b) => Some(FlowField::new(
            CoefficientSet::new(
                Expr::Const(0.0),
                Expr::Const(0.0),
                b.sigma.clone(),
                1.0,
                1.0,
            )?,
            spec.x_step,
        )?),
        Upper::System(_) => None,
    };

    let jobs: Vec<(ControlKind, usize)> = cfg
        .controls
        .iter()
        .flat_map(|&c| (0..cfg.paths).map(move |i| (c, i)))
        .collect();
    type Outcome = std::result::Result<Vec<Violation>, PathFailure>;
    let outcomes: Vec<Result<Outcome>> = jobs
        .par_iter()
        .map(|&(kind, i)| {
            let driver = sample_path(kind, &spec.band, &grid, cfg.seed, i)?;
            let solved = (|| -> Result<(Vec<f64>, Vec<f64>)> {
                let left = solve_system(&spec.left, &left_ff, &driver, cfg.method)?.x_vals;
                let right = match (&spec.right, &right_sys_ff, &bound_ff) {
                    (Upper::System(s), Some(ff), _) => {
                        solve_system(s, ff, &driver, cfg.method)?.x_vals
                    }
                    (Upper::Bounds(b), _, Some(ff)) => solve_bounds(b, ff, &driver)?,
                    _ => unreachable!("flows match the right side"),
                };
                Ok((left, right))
            })();
            let (left, right) = match solved {
                Ok(lr) => lr,
                Err(e) => {
                    return Ok(Err(PathFailure {
                        seed: driver.seed,
                        control_id: driver.control_id.clone(),
                        message: e.to_string(),
                    }))
                }
            };
            Ok(Ok(left
                .iter()
                .zip(&right)
                .enumerate()
                .filter(|(_, (l, r))| **l > **r + tolerance)
                .map(|(k, (l, r))| Violation {
                    seed: driver.seed,
                    control_id: driver.control_id.clone(),
                    index: k,
                    t: driver.grid[k],
                    x_left: *l,
                    x_right: *r,
                })
                .collect()))
        })
        .collect();
    let mut violations = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o? {
            Ok(v) => violations.extend(v),
            Err(f) => failures.push(f),
        }
    }
    let verdict = if !certificate.certified {
        Verdict::HypothesesFail
    } else if violations.is_empty() {
        Verdict::Consistent
    } else {
        Verdict::Violated
    };
    Ok(ComparisonReport {
        certificate,
        cert_box: spec.cert_box,
        grid_density: spec.grid_density,
        method: cfg.method,
        tolerance,
        paths_checked: jobs.len(),
        violations,
        failures,
        verdict,
    })
}

/// Outcome of comparing two scalar ODEs `y' = f(t, y)`, `y~' = f~(t, y~)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeComparison {
    /// `(t - t0)(f - f~) <= 0` at every sampled point.
    pub hypothesis_holds: bool,
    /// Largest sampled `(t - t0)(f - f~)` and its `(t, y)`.
    pub worst: f64,
    pub worst_at: (f64, f64),
    pub y: Vec<f64>,
    pub y_tilde: Vec<f64>,
    /// `Some(ordered)` only when the hypothesis holds.
    pub ordered: Option<bool>,
    pub tolerance: f64,
}

const HULL_SAMPLES: usize = 65;

fn rk4(f: &Expr, grid: &[f64], y0: f64) -> Result<Vec<f64>> {
    let rhs = |t: f64, y: f64| f.eval(t, 0.0, y).map_err(Error::from);
    let mut y = y0;
    let mut out = vec![y];
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let k1 = rhs(t, y)?;
        let k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)?;
        let k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)?;
        let k4 = rhs(t + h, y + h * k3)?;
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !y.is_finite() {
            return Err(Error::NonFinite {
                what: "ODE state",
                step: out.len(),
            });
        }
        out.push(y);
    }
    Ok(out)
}

/// Integrates both ODEs on `grid` (state variable `y`; `x` is unused) and,
/// if the sign hypothesis holds on the grid times crossed with the hull of
/// both trajectories, checks `y <= y~ + tol`, `tol = 1e-9 + 10 step^4`.
pub fn check_ode_comparison(
    f: &Expr,
    f_tilde: &Expr,
    y0: f64,
    y0_tilde: f64,
    grid: &[f64],
) -> Result<OdeComparison> {
    crate::driver::validate_grid(grid)?;
    if y0 > y0_tilde {
        return Err(Error::invalid("y0", format!("{y0} exceeds {y0_tilde}")));
    }
    let y = rk4(f, grid, y0)?;
    let y_tilde = rk4(f_tilde, grid, y0_tilde)?;
    let lo = y
        .iter()
        .chain(&y_tilde)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = y
        .iter()
        .chain(&y_tilde)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let t0 = grid[0];
    let mut worst = (f64::NEG_INFINITY, (f64::NAN, f64::NAN));
    for &t in grid {
        for j in 0..HULL_SAMPLES {
            let s = lo + (hi - lo) * j as f64 / (HULL_SAMPLES - 1) as f64;
            let val = (t - t0) * (f.eval(t, 0.0, s)? - f_tilde.eval(t, 0.0, s)?);
            if val > worst.0 {
                worst = (val, (t, s));
            }
        }
    }
    let hypothesis_holds = worst.0 <= CONDITION_SLACK;
    let step = grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let tolerance = 1e-9 + 10.0 * step.powi(4);
    let ordered =
        hypothesis_holds.then(|| y.iter().zip(&y_tilde).all(|(a, b)| *a <= *b + tolerance));
    Ok(OdeComparison {
        hypothesis_holds,
        worst: worst.0,
        worst_at: worst.1,
        y,
        y_tilde,
        ordered,
        tolerance,
    })
}

/// The two conditions of the equivalence for autonomous coefficients,
/// sampled over `y` in `range` (`t = x = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NecessityCheck {
    pub sigma_equal: bool,
    pub sigma_gap: f64,
    pub sigma_gap_at: f64,
    pub drift_condition: bool,
    /// Largest `b1 - b2 + 2G(h1 - h2)` and where.
    pub worst_drift: f64,
    pub worst_drift_at: f64,
    pub sufficient_holds: bool,
}

pub fn necessary_sufficient_check(
    cs1: &CoefficientSet,
    cs2: &CoefficientSet,
    range: (f64, f64),
    density: usize,
    band: &VolatilityBand,
) -> Result<NecessityCheck> {
    for cs in [cs1, cs2] {
        for e in [&cs.b, &cs.h, &cs.sigma] {
            if e.contains_var(Var::T) || e.contains_var(Var::X) {
                return Err(Error::invalid(
                    "coefficients",
                    format!("`{e}` depends on t or x; the equivalence covers autonomous coefficients only"),
                ));
            }
        }
    }
    if density < 2 || !(range.0 < range.1) {
        return Err(Error::invalid(
            "range",
            "need density >= 2 on a nondegenerate interval",
        ));
    }
    let mut out = NecessityCheck {
        sigma_equal: true,
        sigma_gap: 0.0,
        sigma_gap_at: range.0,
        drift_condition: true,
        worst_drift: f64::NEG_INFINITY,
        worst_drift_at: range.0,
        sufficient_holds: true,
    };
    for k in 0..density {
        let y = range.0 + (range.1 - range.0) * k as f64 / (density - 1) as f64;
        let e = |x: &Expr| x.eval(0.0, 0.0, y);
        let gap = (e(&cs1.sigma)? - e(&cs2.sigma)?).abs();
        if gap > out.sigma_gap {
            out.sigma_gap = gap;
            out.sigma_gap_at = y;
        }
        let drift = e(&cs1.b)? - e(&cs2.b)? + 2.0 * band.g(e(&cs1.h)? - e(&cs2.h)?);
        if drift > out.worst_drift {
            out.worst_drift = drift;
            out.worst_drift_at = y;
        }
    }
    out.sigma_equal = out.sigma_gap <= 1e-10;
    out.drift_condition = out.worst_drift <= CONDITION_SLACK;
    out.sufficient_holds = out.sigma_equal && out.drift_condition;
    Ok(out)
}

/// Adaptive Simpson with the usual `|S2 - S1| <= 15 tol` acceptance.
fn adaptive_simpson(f: &impl Fn(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn go(
        f: &impl Fn(f64) -> Result<f64>,
        (a, fa): (f64, f64),
        (m, fm): (f64, f64),
        (b, fb): (f64, f64),
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64> {
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm)?, f(rm)?);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return Ok(left + right + diff / 15.0);
        }
        Ok(
            go(f, (a, fa), (lm, flm), (m, fm), left, 0.5 * tol, depth - 1)?
                + go(f, (m, fm), (rm, frm), (b, fb), right, 0.5 * tol, depth - 1)?,
        )
    }
    if a == b {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a)?, f(m)?, f(b)?);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    go(f, (a, fa), (m, fm), (b, fb), whole, tol, 48)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PureDiffusionReport {
    /// `int_{x01}^y ds/sigma1 >= int_{x02}^y ds/sigma2` at every grid `y`.
    pub condition_holds: bool,
    /// Smallest `int 1/sigma1 - int 1/sigma2` and where.
    pub worst_margin: f64,
    pub worst_at: f64,
    /// Nodes with `phi1(B, x01) > phi2(B, x02) + 1e-9`, computed either way.
    pub violations: Vec<Violation>,
    /// The pathwise order is only claimed when the condition holds.
    pub order_asserted: bool,
}

/// Pure-diffusion pair `dX = sigma_i(X) dB + sigma_i sigma_i'/2 d<B>`, for which
/// `X^i_t = phi_i(B_t, x0_i)`.
pub fn pure_diffusion_compare(
    sigma1: &Expr,
    sigma2: &Expr,
    x01: f64,
    x02: f64,
    y_grid: &[f64],
    drivers: &[DrivenPath],
    x_step: f64,
) -> Result<PureDiffusionReport> {
    for s in [sigma1, sigma2] {
        if s.contains_var(Var::T) || s.contains_var(Var::X) {
            return Err(Error::invalid(
                "sigma",
                format!("`{s}` must depend on y only"),
            ));
        }
    }
    if y_grid.is_empty() {
        return Err(Error::invalid("y grid", "empty"));
    }
    let recip = |s: &Expr| {
        let s = s.clone();
        move |y: f64| -> Result<f64> {
            let v = s.eval(0.0, 0.0, y)?;
            if v > 0.0 {
                Ok(1.0 / v)
            } else {
                Err(Error::invalid(
                    "sigma",
                    format!("`{s}` is {v} at y={y}; must be positive"),
                ))
            }
        }
    };
    let (r1, r2) = (recip(sigma1), recip(sigma2));
    let mut worst = (f64::INFINITY, y_grid[0]);
    for &y in y_grid {
        let margin = adaptive_simpson(&r1, x01, y, 1e-10)? - adaptive_simpson(&r2, x02, y, 1e-10)?;
        if margin < worst.0 {
            worst = (margin, y);
        }
    }
    let condition_holds = worst.0 >= -CONDITION_SLACK;

    let flow = |s: &Expr| -> Result<FlowField<CoefficientSet>> {
        FlowField::new(
            CoefficientSet::new(Expr::Const(0.0), Expr::Const(0.0), s.clone(), 1.0, 1.0)?,
            x_step,
        )
    };
    let (f1, f2) = (flow(sigma1)?, flow(sigma2)?);
    let per_path: Vec<Result<Vec<Violation>>> = drivers
        .par_iter()
        .map(|d| {
            let mut found = Vec::new();
            for (k, (&t, &b)) in d.grid.iter().zip(&d.b_vals).enumerate() {
                let a = f1
                    .phi(t, b, x01)
                    .map_err(|e| Error::at_step("phi1", k, e))?;
                let c = f2
                    .phi(t, b, x02)
                    .map_err(|e| Error::at_step("phi2", k, e))?;
                if a > c + DOSS_TOL {
                    found.push(Violation {
                        seed: d.seed,
                        control_id: d.control_id.clone(),
                        index: k,
                        t,
                        x_left: a,
                        x_right: c,
                    });
                }
            }
            Ok(found)
        })
        .collect();
    let mut violations = Vec::new();
    for v in per_path {
        violations.extend(v?);
    }
    Ok(PureDiffusionReport {
        condition_holds,
        worst_margin: worst.0,
        worst_at: worst.1,
        violations,
        order_asserted: condition_holds,
    })
}

/// Constant `C` with `|sigma| <= C` and `|g| + sigma_hi^2 |f| <= C e^{C|x|}`,
/// from the declared (and audited) bound `M` and Lipschitz constant `K`.
///
/// With `d_v phi >= e^{-K|x|}`: `|g| <= M e^{K|x|}` and
/// `|f| <= (M + K(1 + M)/2) e^{K|x|}`. Time-dependent sigma would need a
/// bound on `d_t phi` as well and is rejected.
pub fn envelope_constant(cs: &CoefficientSet, band: &VolatilityBand) -> Result<f64> {
    if cs.sigma.contains_var(Var::T) {
        return Err(Error::invalid(
            "sigma",
            "envelope constant needs a time-independent sigma",
        ));
    }
    let (m, k) = (cs.bound_m, cs.lipschitz_k);
    let s2 = band.sigma_hi() * band.sigma_hi();
    Ok(m.max(k).max(m + s2 * (m + 0.5 * k * (1.0 + m))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeViolation {
    pub seed: u64,
    pub control_id: String,
    pub index: usize,
    pub x: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Checks `|X_t - X_0| <= C|B_t| + C int_0^t e^{C|B_s|} ds` (trapezoid) at
/// every node of Doss solutions on `drivers`.
pub fn path_envelope(
    cs: &CoefficientSet,
    x0: f64,
    c: f64,
    drivers: &[DrivenPath],
    x_step: f64,
) -> Result<Vec<EnvelopeViolation>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid("C", format!("must be positive, got {c}")));
    }
    let ff = FlowField::new(cs, x_step)?;
    let per_path: Vec<Result<Vec<EnvelopeViolation>>> = drivers
        .par_iter()
        .map(|d| {
            let sol = solve_doss(cs, &ff, d, x0)?;
            let mut found = Vec::new();
            let mut integral = 0.0;
            for (k, &x) in sol.x_vals.iter().enumerate() {
                if k > 0 {
                    let (e0, e1) = (
                        (c * d.b_vals[k - 1].abs()).exp(),
                        (c * d.b_vals[k].abs()).exp(),
                    );
                    integral += 0.5 * (e0 + e1) * d.dt(k - 1);
                }
                let spread = c * d.b_vals[k].abs() + c * integral;
                let (lower, upper) = (x0 - spread, x0 + spread);
                if x < lower - DOSS_TOL || x > upper + DOSS_TOL {
                    found.push(EnvelopeViolation {
                        seed: d.seed,
                        control_id: d.control_id.clone(),
                        index: k,
                        x,
                        lower,
                        upper,
                    });
                }
            }
            Ok(found)
        })
        .collect();
    let mut out = Vec::new();
    for p in per_path {
        out.extend(p?);
    }
    Ok(out)
}
