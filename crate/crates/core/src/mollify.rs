//! Mollification of a Lipschitz diffusion coefficient in the state variable.
//!
//! `sigma^n(y) = int sigma(y + u) rho_n(u) du` with the bump kernel
//! `rho(s) = c exp(-1 / (1 - s^2))` on `|s| < 1`, `rho_n(u) = n rho(n u)`.
//! Both `sigma^n` and its derivative are Gauss–Legendre sums on fixed panels
//! of the `y` axis, so one pass of `sigma` evaluations yields the pair.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use rayon::prelude::*;

use crate::coeff::{CoefficientSet, Diffusion, SigmaJet};
use crate::doss::solve_doss;
use crate::driver::{
    path_seed, sample_path, uniform_grid, ControlKind, DrivenPath, VolatilityBand,
};
use crate::error::{Error, Result};
use crate::euler::solve_euler;
use crate::expr::{EvalError, Expr, Var};
use crate::flow::FlowField;
use crate::rng::mix;

pub const DEFAULT_QUAD_NODES: usize = 64;

/// Unnormalized bump `exp(-1/(1-s^2))` and its derivative.
fn bump(s: f64) -> (f64, f64) {
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - s * s;
    let r = (-1.0 / q).exp();
    (r, r * (-2.0 * s / (q * q)))
}

/// Kernel of bandwidth `1/n` with its quadrature.
///
/// The `y` axis is cut into fixed panels `[k/n, (k+1)/n]`, each carrying a
/// `quad_nodes`-point Gauss–Legendre rule. Because the nodes do not move with
/// the evaluation point, `sigma^n` is a smooth function of `y` even when
/// `sigma` has kinks, and the derivative sum is its exact derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct Mollifier {
    n: u32,
    quad_nodes: usize,
    /// Normalization of the bump on `[-1, 1]`.
    c: f64,
    /// Gauss–Legendre rule on `[-1, 1]`.
    rule: Vec<(f64, f64)>,
}

impl Mollifier {
    pub fn new(n: u32, quad_nodes: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("mollifier", "n must be positive"));
        }
        let degree = NonZeroUsize::new(quad_nodes)
            .ok_or_else(|| Error::invalid("mollifier", "quad_nodes must be positive"))?;
        let rule = GaussLegendre::new(degree);
        let mass = rule.integrate(-1.0, 1.0, |s| bump(s).0);
        // independent check of the normalization with a much finer rule
        let fine = GaussLegendre::new(NonZeroUsize::new(1024).expect("nonzero"));
        let reference = fine.integrate(-1.0, 1.0, |s| bump(s).0);
        if !((mass - reference).abs() <= 1e-10 * reference) {
            return Err(Error::Quadrature(format!(
                "{quad_nodes}-node rule gives kernel mass {mass}, reference {reference}"
            )));
        }
        let m = Self {
            n,
            quad_nodes,
            c: 1.0 / mass,
            rule: rule.iter().copied().collect(),
        };
        // the panel rule sees the support edge mid-panel, so it is only
        // close to normalized; callers divide by the local mass
        for k in 0..8 {
            let y = (k as f64 / 8.0 + 0.0625) / f64::from(n);
            let got = m.mass_at(y);
            if !((got - 1.0).abs() <= 1e-6) {
                return Err(Error::Quadrature(format!(
                    "panel quadrature mass {got} at y={y} with {quad_nodes} nodes"
                )));
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn quad_nodes(&self) -> usize {
        self.quad_nodes
    }

    pub fn bandwidth(&self) -> f64 {
        1.0 / f64::from(self.n)
    }

    /// `rho_n(u)` and `rho_n'(u)`.
    pub fn kernel(&self, u: f64) -> (f64, f64) {
        let nf = f64::from(self.n);
        let (r, dr) = bump(nf * u);
        (nf * self.c * r, nf * nf * self.c * dr)
    }

    /// Calls `visit(node, weight * rho_n(node - y), weight * rho_n'(node - y))`
    /// for every quadrature node whose kernel value is nonzero.
    fn for_each_tap(&self, y: f64, mut visit: impl FnMut(f64, f64, f64)) {
        let nf = f64::from(self.n);
        let first = ((y * nf).floor() as i64) - 1;
        let half = 0.5 / nf;
        for k in first..=first + 2 {
            let mid = (k as f64 + 0.5) / nf;
            for &(s, w) in &self.rule {
                let node = mid + half * s;
                let (r, dr) = self.kernel(node - y);
                if r > 0.0 {
                    visit(node, half * w * r, half * w * dr);
                }
            }
        }
    }

    /// Quadrature mass of the kernel centred at `y` (1 up to quadrature error).
    pub fn mass_at(&self, y: f64) -> f64 {
        let mut total = 0.0;
        self.for_each_tap(y, |_, w, _| total += w);
        total
    }

    /// Every kernel weight used around `y`; all are nonnegative.
    pub fn weights_at(&self, y: f64) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_tap(y, |_, w, _| out.push(w));
        out
    }
}

/// `sigma^n`, usable wherever a smooth diffusion is expected.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifiedSigma {
    sigma: Expr,
    kernel: Mollifier,
}

impl MollifiedSigma {
    pub fn value(&self, y: f64) -> Result<f64, EvalError> {
        Ok(self.value_and_derivative(y)?.0)
    }

    pub fn derivative(&self, y: f64) -> Result<f64, EvalError> {
        Ok(self.value_and_derivative(y)?.1)
    }

    /// The quadrature weights are renormalized at every `y` to reproduce
    /// constants and linear functions exactly: divided by their sum and
    /// tilted by `1 + alpha (z - y)` so the first moment vanishes. The
    /// derivative is that of the resulting smooth function of `y`.
    pub fn value_and_derivative(&self, y: f64) -> Result<(f64, f64), EvalError> {
        // moments m_k = sum w d^k and s_k = sum w d^k sigma, d = z - y,
        // each paired with its y-derivative (w' = -dw, d' = -1)
        let mut m = [0.0; 3];
        let mut dm = [0.0; 3];
        let mut sm = [0.0; 2];
        let mut dsm = [0.0; 2];
        let mut err = None;
        self.kernel.for_each_tap(y, |z, w, dw| {
            if err.is_some() {
                return;
            }
            match self.sigma.eval(0.0, 0.0, z) {
                Ok(sig) => {
                    let d = z - y;
                    m[0] += w;
                    m[1] += w * d;
                    m[2] += w * d * d;
                    dm[0] -= dw;
                    dm[1] -= dw * d + w;
                    dm[2] -= dw * d * d + 2.0 * w * d;
                    sm[0] += w * sig;
                    sm[1] += w * d * sig;
                    dsm[0] -= dw * sig;
                    dsm[1] -= (dw * d + w) * sig;
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let alpha = -m[1] / m[2];
        let dalpha = -(dm[1] * m[2] - m[1] * dm[2]) / (m[2] * m[2]);
        let num = sm[0] + alpha * sm[1];
        let den = m[0] + alpha * m[1];
        let dnum = dsm[0] + dalpha * sm[1] + alpha * dsm[1];
        let dden = dm[0] + dalpha * m[1] + alpha * dm[1];
        let v = num / den;
        Ok((v, (dnum - v * dden) / den))
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.kernel
    }
}

/// Smooths a state-only `sigma(y)` (it may contain `abs`).
pub fn smooth_sigma(sigma: &Expr, m: &Mollifier) -> Result<MollifiedSigma> {
    if sigma.contains_var(Var::T) || sigma.contains_var(Var::X) {
        return Err(Error::invalid(
            "sigma",
            "mollification is in y only; sigma must not depend on t or x",
        ));
    }
    Ok(MollifiedSigma {
        sigma: sigma.clone(),
        kernel: m.clone(),
    })
}

impl Diffusion for MollifiedSigma {
    fn sigma(&self, _t: f64, _x: f64, y: f64) -> Result<f64, EvalError> {
        self.value(y)
    }

    fn jet(&self, _t: f64, _x: f64, y: f64) -> Result<SigmaJet, EvalError> {
        let (value, dy) = self.value_and_derivative(y)?;
        Ok(SigmaJet {
            value,
            dt: 0.0,
            dx: 0.0,
            dy,
        })
    }

    fn time_independent(&self) -> bool {
        true
    }
}

impl MollifiedSigma {
    /// Samples `sigma^n` and its derivative every `step` on `[lo, hi]`.
    pub fn tabulate(&self, lo: f64, hi: f64, step: f64) -> Result<TabulatedSigma> {
        if !(lo < hi && step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(
                "table",
                format!("range [{lo}, {hi}] with step {step}"),
            ));
        }
        let count = ((hi - lo) / step).ceil() as usize + 1;
        let nodes: Vec<std::result::Result<(f64, f64), EvalError>> = (0..count)
            .into_par_iter()
            .map(|i| self.value_and_derivative(lo + i as f64 * step))
            .collect();
        Ok(TabulatedSigma {
            nodes: nodes.into_iter().collect::<std::result::Result<_, _>>()?,
            inner: self.clone(),
            lo,
            step,
        })
    }
}

/// `sigma^n` by cubic Hermite interpolation of tabulated values and
/// derivatives; off the table it falls back to the quadrature. The
/// interpolant is C^1 and its derivative is the exact derivative of the
/// interpolated values.
#[derive(Debug, Clone)]
pub struct TabulatedSigma {
    inner: MollifiedSigma,
    lo: f64,
    step: f64,
    nodes: Vec<(f64, f64)>,
}

impl TabulatedSigma {
    pub fn value_and_derivative(&self, y: f64) -> Result<(f64, f64), EvalError> {
        let u = (y - self.lo) / self.step;
        if !(u >= 0.0 && u < (self.nodes.len() - 1) as f64) {
            return self.inner.value_and_derivative(y);
        }
        let i = u as usize;
        let s = u - i as f64;
        let ((v0, d0), (v1, d1)) = (self.nodes[i], self.nodes[i + 1]);
        let h = self.step;
        let (s2, s3) = (s * s, s * s * s);
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * v0
            + (s3 - 2.0 * s2 + s) * h * d0
            + (-2.0 * s3 + 3.0 * s2) * v1
            + (s3 - s2) * h * d1;
        let slope = (6.0 * s2 - 6.0 * s) * (v0 - v1) / h
            + (3.0 * s2 - 4.0 * s + 1.0) * d0
            + (3.0 * s2 - 2.0 * s) * d1;
        Ok((value, slope))
    }
}

impl Diffusion for TabulatedSigma {
    fn sigma(&self, _t: f64, _x: f64, y: f64) -> Result<f64, EvalError> {
        Ok(self.value_and_derivative(y)?.0)
    }

    fn jet(&self, _t: f64, _x: f64, y: f64) -> Result<SigmaJet, EvalError> {
        let (value, dy) = self.value_and_derivative(y)?;
        Ok(SigmaJet {
            value,
            dt: 0.0,
            dx: 0.0,
            dy,
        })
    }

    fn time_independent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub horizon: f64,
    pub grid_n: usize,
    /// Cells of the Doss grid are halved this many times (Brownian bridge)
    /// for the Euler reference, which is compared at the Doss nodes.
    pub reference_refinements: u32,
    pub x_step: f64,
    pub quad_nodes: usize,
    pub x0: f64,
    pub controls: Vec<ControlKind>,
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: u32,
    pub mean_sq_sup_err: f64,
    pub max_sup_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// `p` in a least-squares fit `mean_sq_sup_err ~ n^-p`.
    pub fitted_exponent: f64,
}

/// Least-squares slope of `log err` against `log n`, negated.
pub fn fit_decay_exponent(ns: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(errs)
        .filter(|(_, e)| **e > 0.0)
        .map(|(n, e)| (n.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    -sxy / sxx
}

/// Mollified-Doss against raw-Euler on shared drivers, for each `n`.
pub fn convergence_study(
    cs: &CoefficientSet,
    band: &VolatilityBand,
    n_list: &[u32],
    cfg: &StudyConfig,
) -> Result<StudyReport> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "n_list",
            "must be nonempty and strictly increasing",
        ));
    }
    if cfg.paths == 0 || cfg.controls.is_empty() {
        return Err(Error::invalid(
            "study",
            "need at least one path and one control",
        ));
    }
    let grid = uniform_grid(cfg.horizon, cfg.grid_n)?;
    // (coarse driver, Euler reference sampled at coarse nodes)
    let cases: Vec<Result<(DrivenPath, Vec<f64>)>> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let kind = cfg.controls[i % cfg.controls.len()];
            let seed = path_seed(cfg.seed, i);
            let coarse = sample_path(kind, band, &grid, cfg.seed, i)?;
            let mut fine = coarse.clone();
            for level in 0..cfg.reference_refinements {
                fine = fine.refine(mix(seed, 2 + u64::from(level)));
            }
            let stride = 1usize << cfg.reference_refinements;
            let reference = solve_euler(cs, &fine, cfg.x0)?;
            let at_coarse = reference.x_vals.iter().step_by(stride).copied().collect();
            Ok((coarse, at_coarse))
        })
        .collect();
    let cases = cases.into_iter().collect::<Result<Vec<_>>>()?;

    // states the flows visit lie near the reference paths; the table covers
    // their hull generously and quadrature handles anything beyond it
    let (lo, hi) = cases
        .iter()
        .flat_map(|(_, r)| r.iter())
        .fold((cfg.x0, cfg.x0), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let margin = 1.0 + 0.5 * (hi - lo);

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let smoothed = smooth_sigma(&cs.sigma, &Mollifier::new(n, cfg.quad_nodes)?)?;
        let table = smoothed.tabulate(lo - margin, hi + margin, 1.0 / (256.0 * f64::from(n)))?;
        let ff = FlowField::new(table, cfg.x_step)?;
        let sups: Vec<Result<f64>> = cases
            .par_iter()
            .map(|(driver, reference)| {
                let sol = solve_doss(cs, &ff, driver, cfg.x0)?;
                Ok(sol
                    .x_vals
                    .iter()
                    .zip(reference)
                    .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs())))
            })
            .collect();
        let sups = sups.into_iter().collect::<Result<Vec<f64>>>()?;
        rows.push(StudyRow {
            n,
            mean_sq_sup_err: sups.iter().map(|s| s * s).sum::<f64>() / sups.len() as f64,
            max_sup_err: sups.iter().copied().fold(0.0, f64::max),
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| f64::from(r.n)).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.mean_sq_sup_err).collect();
    Ok(StudyReport {
        fitted_exponent: fit_decay_exponent(&ns, &errs),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn kernel_is_a_probability_density() {
        for n in [1, 10, 40] {
            let m = Mollifier::new(n, DEFAULT_QUAD_NODES).unwrap();
            for y in [-1.234, -0.01, 0.0, 0.003, 0.5, 7.77] {
                assert!((m.mass_at(y) - 1.0).abs() < 1e-8, "n={n} y={y}");
                assert!(m.weights_at(y).iter().all(|&w| w >= 0.0));
            }
            assert_eq!(m.kernel(1.0 / n as f64), (0.0, 0.0));
        }
    }

    #[test]
    fn too_few_nodes_fail_normalization() {
        assert!(matches!(Mollifier::new(10, 4), Err(Error::Quadrature(_))));
        assert!(Mollifier::new(0, 64).is_err());
        assert!(Mollifier::new(10, 0).is_err());
    }

    #[test]
    fn linear_sigma_is_unchanged() {
        let m = Mollifier::new(7, DEFAULT_QUAD_NODES).unwrap();
        let s = smooth_sigma(&parse("2 - 0.5*y").unwrap(), &m).unwrap();
        for y in [-3.0, 0.0, 0.01, 2.5] {
            let (v, d) = s.value_and_derivative(y).unwrap();
            assert!((v - (2.0 - 0.5 * y)).abs() < 1e-10);
            assert!((d + 0.5).abs() < 1e-10, "y={y}: {d}");
        }
    }

    #[test]
    fn abs_kink_is_lifted_but_within_bandwidth() {
        let m = Mollifier::new(10, DEFAULT_QUAD_NODES).unwrap();
        let s = smooth_sigma(&parse("abs(y)").unwrap(), &m).unwrap();
        let at0 = s.value(0.0).unwrap();
        assert!(at0 > 0.0 && at0 <= 0.1);
        for k in -300..=300 {
            let y = k as f64 * 0.01;
            assert!((s.value(y).unwrap() - y.abs()).abs() <= 0.1);
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let m = Mollifier::new(20, DEFAULT_QUAD_NODES).unwrap();
        let s = smooth_sigma(&parse("abs(y) + 1").unwrap(), &m).unwrap();
        let h = 1e-6;
        for y in [-0.5, -0.03, 0.0, 0.01, 0.04, 1.0] {
            let fd = (s.value(y + h).unwrap() - s.value(y - h).unwrap()) / (2.0 * h);
            let d = s.derivative(y).unwrap();
            assert!(
                (d - fd).abs() <= 1e-6 * d.abs().max(1.0),
                "y={y}: {d} vs {fd}"
            );
        }
    }

    #[test]
    fn rejects_time_or_space_dependence() {
        let m = Mollifier::new(5, DEFAULT_QUAD_NODES).unwrap();
        assert!(smooth_sigma(&parse("abs(y) + t").unwrap(), &m).is_err());
        assert!(smooth_sigma(&parse("abs(x*y)").unwrap(), &m).is_err());
    }

    #[test]
    fn uniform_error_is_at_most_k_over_n() {
        // sigma = 0.5*abs(y - 0.3) + 1 has K = 0.5
        let sigma = parse("0.5*abs(y - 0.3) + 1").unwrap();
        for n in [5, 10, 40] {
            let s = smooth_sigma(&sigma, &Mollifier::new(n, DEFAULT_QUAD_NODES).unwrap()).unwrap();
            for k in -400..=400 {
                let y = k as f64 * 0.005;
                let exact = sigma.eval(0.0, 0.0, y).unwrap();
                assert!((s.value(y).unwrap() - exact).abs() <= 0.5 / n as f64);
            }
        }
    }

    #[test]
    fn smoothed_flow_stays_close_to_the_rough_one() {
        // |y| + 1 is 1-Lipschitz; C = 1 covers the stability estimate
        let sigma = parse("abs(y) + 1").unwrap();
        let rough = FlowField::new(
            CoefficientSet::new(Expr::Const(0.0), Expr::Const(0.0), sigma.clone(), 1.0, 10.0)
                .unwrap(),
            1e-3,
        )
        .unwrap();
        for n in [10, 40] {
            let s = smooth_sigma(&sigma, &Mollifier::new(n, DEFAULT_QUAD_NODES).unwrap()).unwrap();
            let smooth = FlowField::new(s, 1e-3).unwrap();
            for x in [-1.5, -0.2, 0.4, 1.0] {
                for (v1, v2) in [(0.0f64, 0.0f64), (-0.05, 0.0), (0.3, 0.25), (-1.0, -1.1)] {
                    let gap =
                        (smooth.phi(0.0, x, v1).unwrap() - rough.phi(0.0, x, v2).unwrap()).abs();
                    let bound = ((v1 - v2).abs() + x.abs() / n as f64) * x.abs().exp();
                    assert!(
                        gap <= bound + 1e-9,
                        "n={n} x={x} v=({v1},{v2}): {gap} > {bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn small_study_improves_with_n() {
        let cs = CoefficientSet::parse("0.1", "0", "abs(y) + 1", 1.0, 10.0).unwrap();
        let band = VolatilityBand::new(0.5, 1.0).unwrap();
        let cfg = StudyConfig {
            horizon: 1.0,
            grid_n: 64,
            reference_refinements: 2,
            x_step: 0.02,
            quad_nodes: DEFAULT_QUAD_NODES,
            x0: 0.0,
            controls: vec![ControlKind::ConstantHi, ControlKind::BangBangRandom],
            paths: 8,
            seed: 3,
        };
        let report = convergence_study(&cs, &band, &[5, 20], &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[1].mean_sq_sup_err < report.rows[0].mean_sq_sup_err);
        assert!(convergence_study(&cs, &band, &[20, 5], &cfg).is_err());
    }

    #[test]
    fn table_interpolates_smoothly() {
        let s = smooth_sigma(
            &parse("abs(y) + 1").unwrap(),
            &Mollifier::new(20, DEFAULT_QUAD_NODES).unwrap(),
        )
        .unwrap();
        let t = s.tabulate(-1.0, 1.0, 1.0 / 5120.0).unwrap();
        let h = 1e-6;
        for k in 0..400 {
            let y = -1.2 + k as f64 * 0.006;
            let (a, da) = s.value_and_derivative(y).unwrap();
            let (b, db) = t.value_and_derivative(y).unwrap();
            assert!((a - b).abs() < 1e-10 && (da - db).abs() < 1e-6, "y={y}");
            let fd = (t.value_and_derivative(y + h).unwrap().0
                - t.value_and_derivative(y - h).unwrap().0)
                / (2.0 * h);
            assert!((fd - db).abs() <= 1e-6 * db.abs().max(1.0), "y={y}");
        }
    }

    #[test]
    fn exponent_fit() {
        let ns = [10.0, 20.0, 40.0];
        let errs: Vec<f64> = ns.iter().map(|n: &f64| 3.0 * n.powf(-2.0)).collect();
        assert!((fit_decay_exponent(&ns, &errs) - 2.0).abs() < 1e-12);
        assert!(fit_decay_exponent(&ns, &[1.0, 1.0, 1.0]).abs() < 1e-12);
    }
}
