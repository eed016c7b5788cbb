//! Sample-solution engine.
//!
//! Along a driver path the G-SDE `dX = b dt + h d<B> + sigma dB` is solved as
//! `X_t = phi(t, B_t, V_t)`, where `V` solves the pathwise ODE
//! `dV = g(t, B_t, V) dt + f(t, B_t, V) d<B>_t`, `V_0 = X_0`, with
//!
//! ```text
//! g = (b(t,x,phi) - d_t phi) / d_v phi
//! f = (h(t,x,phi) - (d_x sigma + d_y sigma * sigma)(t,x,phi) / 2) / d_v phi
//! ```

use std::fmt;

use crate::coeff::{CoefficientSet, Diffusion};
use crate::driver::DrivenPath;
use crate::error::{Error, Result};
use crate::flow::FlowField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Doss,
    Euler,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Doss => "doss",
            Method::Euler => "euler",
        })
    }
}

/// A solution on the grid of the driver it was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSolution {
    pub grid: Vec<f64>,
    /// `None` for the Euler scheme, which has no `V` component.
    pub v_vals: Option<Vec<f64>>,
    pub x_vals: Vec<f64>,
    pub method: Method,
    pub control_id: String,
    pub seed: u64,
}

impl PathSolution {
    /// `max_k |X_k - other_k|` over a common grid.
    pub fn sup_distance(&self, other: &PathSolution) -> f64 {
        debug_assert_eq!(self.x_vals.len(), other.x_vals.len());
        self.x_vals
            .iter()
            .zip(&other.x_vals)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformedDrifts {
    pub g: f64,
    pub f: f64,
    pub phi: f64,
    pub phi_dv: f64,
}

/// `g` and `f` at `(t, x, v)`, with `b` and `h` from `cs` and sigma from the
/// flow. The flow's sigma need not be `cs.sigma` (mollified runs swap it).
pub fn transformed_drifts<D: Diffusion>(
    cs: &CoefficientSet,
    ff: &FlowField<D>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<TransformedDrifts> {
    let p = ff.sensitivities(t, x, v)?;
    let b = cs.b.eval(t, x, p.phi)?;
    let h = cs.h.eval(t, x, p.phi)?;
    let j = ff
        .diffusion()
        .jet(t, x, p.phi)
        .map_err(|source| Error::Flow {
            t,
            x,
            y: p.phi,
            source,
        })?;
    let inv = 1.0 / p.dv;
    Ok(TransformedDrifts {
        g: inv * (b - p.dt),
        f: inv * (h - 0.5 * (j.dx + j.dy * j.value)),
        phi: p.phi,
        phi_dv: p.dv,
    })
}

pub fn transformed_drift_g<D: Diffusion>(
    cs: &CoefficientSet,
    ff: &FlowField<D>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<f64> {
    Ok(transformed_drifts(cs, ff, t, x, v)?.g)
}

pub fn transformed_drift_f<D: Diffusion>(
    cs: &CoefficientSet,
    ff: &FlowField<D>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<f64> {
    Ok(transformed_drifts(cs, ff, t, x, v)?.f)
}

/// Heun integration of the `V` equation. Returns `V` and `X = phi(t, B, V)`
/// on every node.
fn integrate_v<D: Diffusion>(
    cs: &CoefficientSet,
    ff: &FlowField<D>,
    driver: &DrivenPath,
    x0: f64,
    substeps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    driver.validate()?;
    if substeps == 0 {
        return Err(Error::invalid("substeps", "must be positive"));
    }
    let n = driver.steps();
    let mut v_vals = Vec::with_capacity(n + 1);
    let mut x_vals = Vec::with_capacity(n + 1);
    let mut v = x0;
    v_vals.push(v);
    for k in 0..n {
        // B frozen at the left node for the whole cell
        let b = driver.b_vals[k];
        let dt = driver.dt(k) / substeps as f64;
        let dq = driver.dqv(k) / substeps as f64;
        for j in 0..substeps {
            let t = driver.grid[k] + j as f64 * dt;
            let d1 = transformed_drifts(cs, ff, t, b, v)
                .map_err(|e| Error::at_step("V integration", k, e))?;
            if j == 0 {
                x_vals.push(d1.phi);
            }
            let v_pred = v + d1.g * dt + d1.f * dq;
            let d2 = transformed_drifts(cs, ff, t + dt, b, v_pred)
                .map_err(|e| Error::at_step("V integration", k, e))?;
            v += 0.5 * (d1.g + d2.g) * dt + 0.5 * (d1.f + d2.f) * dq;
        }
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "V",
                step: k + 1,
            });
        }
        v_vals.push(v);
    }
    let x_end = ff
        .phi(driver.grid[n], driver.b_vals[n], v)
        .map_err(|e| Error::at_step("X assembly", n, e))?;
    x_vals.push(x_end);
    Ok((v_vals, x_vals))
}

/// `V` on the driver grid, one Heun step per cell.
pub fn solve_v<D: Diffusion>(
    cs: &CoefficientSet,
    ff: &FlowField<D>,
    driver: &DrivenPath,
    x0: f64,
) -> Result<Vec<f64>> {
    Ok(integrate_v(cs, ff, driver, x0, 1)?.0)
}

/// As [`solve_v`] with every cell split into `substeps` Heun steps (driver
/// still frozen at the left node, `<B>` linear inside the cell).
pub fn solve_v_substeps<D: Diffusion>(
    cs: &CoefficientSet,
    ff: &FlowField<D>,
    driver: &DrivenPath,
    x0: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    Ok(integrate_v(cs, ff, driver, x0, substeps)?.0)
}

pub fn solve_doss<D: Diffusion>(
    cs: &CoefficientSet,
    ff: &FlowField<D>,
    driver: &DrivenPath,
    x0: f64,
) -> Result<PathSolution> {
    let (v_vals, x_vals) = integrate_v(cs, ff, driver, x0, 1)?;
    Ok(PathSolution {
        grid: driver.grid.clone(),
        v_vals: Some(v_vals),
        x_vals,
        method: Method::Doss,
        control_id: driver.control_id.clone(),
        seed: driver.seed,
    })
}

/// `V_k = phi^{-1}(t_k, B_k, X_k)`.
pub fn recover_v<D: Diffusion>(
    ff: &FlowField<D>,
    driver: &DrivenPath,
    x_path: &[f64],
) -> Result<Vec<f64>> {
    if x_path.len() != driver.b_vals.len() {
        return Err(Error::invalid(
            "state path",
            format!(
                "{} values for {} driver nodes",
                x_path.len(),
                driver.b_vals.len()
            ),
        ));
    }
    x_path
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            ff.phi_inverse(driver.grid[k], driver.b_vals[k], x)
                .map_err(|e| Error::at_step("V recovery", k, e))
        })
        .collect()
}

/// Running total variation `sum |dV|`.
pub fn total_variation(v_vals: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(v_vals.len());
    out.push(0.0);
    for w in v_vals.windows(2) {
        acc += (w[1] - w[0]).abs();
        out.push(acc);
    }
    out.truncate(v_vals.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{make_control, simulate_driver, uniform_grid, ControlKind, VolatilityBand};

    fn setup(b: &str, h: &str, sigma: &str) -> (CoefficientSet, FlowField<CoefficientSet>) {
        let cs = CoefficientSet::parse(b, h, sigma, 10.0, 10.0).unwrap();
        let ff = FlowField::new(cs.clone(), 1e-3).unwrap();
        (cs, ff)
    }

    fn driver(n: usize, seed: u64) -> DrivenPath {
        let band = VolatilityBand::new(0.5, 1.0).unwrap();
        let grid = uniform_grid(1.0, n).unwrap();
        let c = make_control(ControlKind::BangBangRandom, &band, &grid, seed).unwrap();
        simulate_driver(&c, seed + 1)
    }

    #[test]
    fn constant_coefficients_drift() {
        let (cs, ff) = setup("0.3", "0", "0.8");
        let d = transformed_drifts(&cs, &ff, 0.2, 1.1, -0.5).unwrap();
        assert!((d.g - 0.3).abs() < 1e-15);
        assert_eq!(d.f, 0.0);
        let (cs, ff) = setup("0", "0", "tanh(y) + 2");
        assert_eq!(transformed_drift_g(&cs, &ff, 0.0, 0.7, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn ito_correction_cancels() {
        // h = sigma sigma' / 2 with sigma = tanh(y) + 2
        let (cs, ff) = setup(
            "0",
            "0.5 * (tanh(y) + 2) * (1 - tanh(y)*tanh(y))",
            "tanh(y) + 2",
        );
        for &(x, v) in &[(0.0, 0.3), (0.8, -1.0), (-1.2, 2.0)] {
            assert!(transformed_drift_f(&cs, &ff, 0.0, x, v).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn f_at_zero_offset_by_hand() {
        let (cs, ff) = setup("0", "0", "tanh(y)");
        let th = 0.3f64.tanh();
        let expected = -0.5 * (1.0 - th * th) * th;
        assert!((transformed_drift_f(&cs, &ff, 0.0, 0.0, 0.3).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_drifts_keep_v_constant() {
        let (cs, ff) = setup("0", "0", "1.2");
        let v = solve_v(&cs, &ff, &driver(64, 1), 0.7).unwrap();
        assert!(v.iter().all(|&x| x == 0.7));
    }

    #[test]
    fn linear_v_is_exact() {
        let (cs, ff) = setup("0.4", "0", "0.9");
        let p = driver(128, 2);
        let v = solve_v(&cs, &ff, &p, 1.0).unwrap();
        for (k, vk) in v.iter().enumerate() {
            assert!((vk - (1.0 + 0.4 * p.grid[k])).abs() < 1e-13);
        }
        let sol = solve_doss(&cs, &ff, &p, 1.0).unwrap();
        for k in 0..=p.steps() {
            let exact = 1.0 + 0.4 * p.grid[k] + 0.9 * p.b_vals[k];
            assert!((sol.x_vals[k] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn pure_diffusion_keeps_initial_v() {
        // h = sigma sigma'/2 and b = 0 make both transformed drifts vanish
        let (cs, ff) = setup(
            "0",
            "0.5 * (tanh(y) + 2) * (1 - tanh(y)*tanh(y))",
            "tanh(y) + 2",
        );
        let p = driver(64, 3);
        let sol = solve_doss(&cs, &ff, &p, 0.25).unwrap();
        for (k, v) in sol.v_vals.as_ref().unwrap().iter().enumerate() {
            assert!((v - 0.25).abs() < 1e-10);
            let x = ff.phi(p.grid[k], p.b_vals[k], 0.25).unwrap();
            assert!((sol.x_vals[k] - x).abs() < 1e-9);
        }
    }

    #[test]
    fn recover_inverts_the_representation() {
        let (cs, ff) = setup("sin(y)", "0.2*cos(y)", "tanh(y) + 1.5");
        let p = driver(64, 4);
        let sol = solve_doss(&cs, &ff, &p, 0.3).unwrap();
        let back = recover_v(&ff, &p, &sol.x_vals).unwrap();
        for (a, b) in back.iter().zip(sol.v_vals.as_ref().unwrap()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn recover_special_cases() {
        let (_, ff) = setup("0", "0", "0.6");
        let p = driver(16, 5);
        let xs: Vec<f64> = (0..=16).map(|k| k as f64 * 0.1).collect();
        let v = recover_v(&ff, &p, &xs).unwrap();
        for k in 0..=16 {
            assert!((v[k] - (xs[k] - 0.6 * p.b_vals[k])).abs() < 1e-12);
        }
        let mut flat = p.clone();
        flat.b_vals.iter_mut().for_each(|b| *b = 0.0);
        let (_, ff) = setup("0", "0", "tanh(y) + 1");
        assert_eq!(recover_v(&ff, &flat, &xs).unwrap(), xs);
        assert!(recover_v(&ff, &flat, &xs[..3]).is_err());
    }

    #[test]
    fn total_variation_cases() {
        assert_eq!(
            total_variation(&[1.0, 1.5, 2.0, 4.0]),
            vec![0.0, 0.5, 1.0, 3.0]
        );
        assert_eq!(total_variation(&[2.0; 5]), vec![0.0; 5]);
        assert_eq!(total_variation(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn non_finite_v_reports_step() {
        // V' = exp(V) blows up in finite time
        let (cs, ff) = setup("exp(y)", "0", "1");
        let p = DrivenPath {
            grid: vec![0.0, 1.0, 2.0, 3.0],
            b_vals: vec![0.0; 4],
            qv_vals: vec![0.0, 1.0, 2.0, 3.0],
            theta: vec![1.0; 3],
            control_id: "c".into(),
            seed: 0,
        };
        let err = solve_v(&cs, &ff, &p, 5.0).unwrap_err();
        assert!(
            matches!(err, Error::AtStep { step: 1, .. } | Error::NonFinite { .. }),
            "{err:?}"
        );
    }
}
