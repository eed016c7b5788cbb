//! Euler–Maruyama on a fixed driver path, the reference the representation
//! is checked against.

use crate::coeff::CoefficientSet;
use crate::doss::{Method, PathSolution};
use crate::driver::DrivenPath;
use crate::error::{Error, Result};

/// `X_{k+1} = X_k + b dt_k + h dqv_k + sigma dB_k`, coefficients at `(t_k, B_k, X_k)`.
pub fn solve_euler(cs: &CoefficientSet, driver: &DrivenPath, x0: f64) -> Result<PathSolution> {
    driver.validate()?;
    let n = driver.steps();
    let mut x_vals = Vec::with_capacity(n + 1);
    let mut x = x0;
    x_vals.push(x);
    for k in 0..n {
        let (t, b) = (driver.grid[k], driver.b_vals[k]);
        let step = || -> Result<f64> {
            Ok(cs.b.eval(t, b, x)? * driver.dt(k)
                + cs.h.eval(t, b, x)? * driver.dqv(k)
                + cs.sigma.eval(t, b, x)? * driver.db(k))
        };
        x += step().map_err(|e| Error::at_step("Euler step", k, e))?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what: "X",
                step: k + 1,
            });
        }
        x_vals.push(x);
    }
    Ok(PathSolution {
        grid: driver.grid.clone(),
        v_vals: None,
        x_vals,
        method: Method::Euler,
        control_id: driver.control_id.clone(),
        seed: driver.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{make_control, simulate_driver, uniform_grid, ControlKind, VolatilityBand};

    fn path(kind: ControlKind, seed: u64) -> DrivenPath {
        let band = VolatilityBand::new(0.5, 1.0).unwrap();
        let grid = uniform_grid(1.0, 200).unwrap();
        simulate_driver(&make_control(kind, &band, &grid, seed).unwrap(), seed)
    }

    #[test]
    fn zero_coefficients() {
        let cs = CoefficientSet::parse("0", "0", "0", 1.0, 1.0).unwrap();
        let sol = solve_euler(&cs, &path(ControlKind::BangBangRandom, 1), 2.0).unwrap();
        assert!(sol.x_vals.iter().all(|&x| x == 2.0));
        assert!(sol.v_vals.is_none());
    }

    #[test]
    fn constant_coefficients_are_exact() {
        let cs = CoefficientSet::parse("0.25", "0", "1.5", 1.0, 2.0).unwrap();
        let p = path(ControlKind::Piecewise { blocks: 5 }, 2);
        let sol = solve_euler(&cs, &p, -1.0).unwrap();
        let exact = -1.0 + 0.25 + 1.5 * p.b_vals[200];
        assert!((sol.x_vals[200] - exact).abs() < 1e-12);
    }

    #[test]
    fn quadratic_variation_versus_its_upper_rate() {
        // X1 = x + <B>, X2 = x + sigma_hi^2 t
        let one = CoefficientSet::parse("0", "1", "0", 1.0, 1.0).unwrap();
        let two = CoefficientSet::parse("1", "0", "0", 1.0, 1.0).unwrap();
        for kind in [
            ControlKind::ConstantLo,
            ControlKind::BangBangRandom,
            ControlKind::ConstantHi,
        ] {
            let p = path(kind, 3);
            let a = solve_euler(&one, &p, 0.5).unwrap();
            let b = solve_euler(&two, &p, 0.5).unwrap();
            for k in 0..=p.steps() {
                assert!((a.x_vals[k] - (0.5 + p.qv_vals[k])).abs() < 1e-12);
                assert!((b.x_vals[k] - (0.5 + p.grid[k])).abs() < 1e-12);
                assert!(a.x_vals[k] <= b.x_vals[k] + 1e-12);
            }
        }
    }
}
