//! G-Brownian driver paths.
//!
//! Under a volatility control `theta` with values in the band, the driver is
//! `B_t = int theta dW` and its quadratic variation `<B>_t = int theta^2 ds`.
//! Sublinear expectations are estimated as the largest Monte Carlo mean over a
//! finite control family, which is a lower bound of the true supremum.

use std::fmt;
use std::str::FromStr;

use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{mix, rng_for};

/// The uncertainty interval `[sigma_lo, sigma_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolatilityBand {
    sigma_lo: f64,
    sigma_hi: f64,
}

impl VolatilityBand {
    pub fn new(sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        if !(sigma_lo > 0.0 && sigma_lo <= sigma_hi && sigma_hi.is_finite()) {
            return Err(Error::invalid(
                "volatility band",
                format!("need 0 < sigma_lo <= sigma_hi, got [{sigma_lo}, {sigma_hi}]"),
            ));
        }
        Ok(Self { sigma_lo, sigma_hi })
    }

    pub fn sigma_lo(&self) -> f64 {
        self.sigma_lo
    }

    pub fn sigma_hi(&self) -> f64 {
        self.sigma_hi
    }

    /// `G(a) = (sigma_hi^2 a^+ - sigma_lo^2 a^-) / 2`.
    pub fn g(&self, a: f64) -> f64 {
        0.5 * (self.sigma_hi * self.sigma_hi * a.max(0.0)
            - self.sigma_lo * self.sigma_lo * (-a).max(0.0))
    }

    pub fn contains(&self, theta: f64) -> bool {
        self.sigma_lo <= theta && theta <= self.sigma_hi
    }
}

pub fn g_function(a: f64, band: &VolatilityBand) -> f64 {
    band.g(a)
}

/// `n` equal cells on `[0, horizon]`. Nodes are computed as `k * T / n`.
pub fn uniform_grid(horizon: f64, n: usize) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && horizon.is_finite()) || n == 0 {
        return Err(Error::invalid(
            "time grid",
            format!("need T > 0 and at least one cell, got T={horizon}, n={n}"),
        ));
    }
    Ok((0..=n)
        .map(|k| {
            if k == n {
                horizon
            } else {
                k as f64 * horizon / n as f64
            }
        })
        .collect())
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::invalid("time grid", "need at least two nodes"));
    }
    if grid[0] != 0.0 {
        return Err(Error::invalid(
            "time grid",
            format!("must start at 0, got {}", grid[0]),
        ));
    }
    for (k, w) in grid.windows(2).enumerate() {
        if !(w[1] > w[0]) || !w[1].is_finite() {
            return Err(Error::invalid(
                "time grid",
                format!(
                    "not strictly increasing at node {}: {} -> {}",
                    k + 1,
                    w[0],
                    w[1]
                ),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    ConstantLo,
    ConstantHi,
    /// `blocks` equal stretches of the grid, each at an independent uniform level.
    Piecewise {
        blocks: usize,
    },
    /// Every cell independently at `sigma_lo` or `sigma_hi`.
    BangBangRandom,
}

impl FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "constant_lo" => Ok(ControlKind::ConstantLo),
            "constant_hi" => Ok(ControlKind::ConstantHi),
            "bang_bang_random" => Ok(ControlKind::BangBangRandom),
            "piecewise" => Ok(ControlKind::Piecewise { blocks: 4 }),
            _ => {
                if let Some(k) = s.strip_prefix("piecewise:") {
                    let blocks: usize = k.parse().map_err(|_| {
                        Error::invalid("control kind", format!("bad block count in `{s}`"))
                    })?;
                    if blocks == 0 {
                        return Err(Error::invalid(
                            "control kind",
                            "piecewise needs at least one block",
                        ));
                    }
                    Ok(ControlKind::Piecewise { blocks })
                } else {
                    Err(Error::invalid(
                        "control kind",
                        format!("unknown kind `{s}`"),
                    ))
                }
            }
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlKind::ConstantLo => f.write_str("constant_lo"),
            ControlKind::ConstantHi => f.write_str("constant_hi"),
            ControlKind::Piecewise { blocks } => write!(f, "piecewise:{blocks}"),
            ControlKind::BangBangRandom => f.write_str("bang_bang_random"),
        }
    }
}

/// A volatility control, one value per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub id: String,
    pub grid: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ControlPath {
    pub fn validate(&self, band: &VolatilityBand) -> Result<()> {
        validate_grid(&self.grid)?;
        if self.theta.len() + 1 != self.grid.len() {
            return Err(Error::invalid(
                "control",
                format!(
                    "{} values for {} cells",
                    self.theta.len(),
                    self.grid.len() - 1
                ),
            ));
        }
        if let Some(k) = self.theta.iter().position(|&th| !band.contains(th)) {
            return Err(Error::invalid(
                "control",
                format!("theta[{k}] = {} outside the band", self.theta[k]),
            ));
        }
        Ok(())
    }
}

pub fn make_control(
    kind: ControlKind,
    band: &VolatilityBand,
    grid: &[f64],
    seed: u64,
) -> Result<ControlPath> {
    validate_grid(grid)?;
    let n = grid.len() - 1;
    let (lo, hi) = (band.sigma_lo, band.sigma_hi);
    let mut rng = rng_for(seed);
    let (id, theta) = match kind {
        ControlKind::ConstantLo => ("constant_lo".to_string(), vec![lo; n]),
        ControlKind::ConstantHi => ("constant_hi".to_string(), vec![hi; n]),
        ControlKind::Piecewise { blocks } => {
            let levels: Vec<f64> = (0..blocks)
                .map(|_| (lo + rng.random::<f64>() * (hi - lo)).clamp(lo, hi))
                .collect();
            let theta = (0..n).map(|k| levels[k * blocks / n]).collect();
            (format!("piecewise{blocks}-{seed}"), theta)
        }
        ControlKind::BangBangRandom => {
            let theta = (0..n)
                .map(|_| if rng.random::<bool>() { hi } else { lo })
                .collect();
            (format!("bang_bang-{seed}"), theta)
        }
    };
    Ok(ControlPath {
        id,
        grid: grid.to_vec(),
        theta,
    })
}

/// A sampled driver: `B` and `<B>` on the grid nodes plus the control that
/// generated them (so quadratic-variation increments are exact).
#[derive(Debug, Clone, PartialEq)]
pub struct DrivenPath {
    pub grid: Vec<f64>,
    pub b_vals: Vec<f64>,
    pub qv_vals: Vec<f64>,
    pub theta: Vec<f64>,
    pub control_id: String,
    pub seed: u64,
}

impl DrivenPath {
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.grid[self.steps()]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.grid[k + 1] - self.grid[k]
    }

    pub fn db(&self, k: usize) -> f64 {
        self.b_vals[k + 1] - self.b_vals[k]
    }

    /// Exact increment `theta_k^2 dt_k`.
    pub fn dqv(&self, k: usize) -> f64 {
        self.theta[k] * self.theta[k] * self.dt(k)
    }

    pub fn max_dt(&self) -> f64 {
        (0..self.steps()).map(|k| self.dt(k)).fold(0.0, f64::max)
    }

    pub fn sup_abs_b(&self) -> f64 {
        self.b_vals.iter().fold(0.0, |m, b| m.max(b.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.grid)?;
        let n = self.steps();
        if self.b_vals.len() != n + 1 || self.qv_vals.len() != n + 1 || self.theta.len() != n {
            return Err(Error::invalid(
                "driver",
                "array lengths do not match the grid",
            ));
        }
        if self.b_vals[0] != 0.0 || self.qv_vals[0] != 0.0 {
            return Err(Error::invalid("driver", "B and <B> must start at 0"));
        }
        if self
            .b_vals
            .iter()
            .chain(&self.qv_vals)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("driver", "non-finite values"));
        }
        Ok(())
    }

    /// Halves every cell, filling midpoints from the Brownian bridge
    /// conditioned on the endpoints. `<B>` is linear inside a cell.
    pub fn refine(&self, seed: u64) -> DrivenPath {
        let n = self.steps();
        let mut rng = rng_for(seed);
        let mut grid = Vec::with_capacity(2 * n + 1);
        let mut b_vals = Vec::with_capacity(2 * n + 1);
        let mut theta = Vec::with_capacity(2 * n);
        grid.push(self.grid[0]);
        b_vals.push(self.b_vals[0]);
        for k in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let mid_b = 0.5 * (self.b_vals[k] + self.b_vals[k + 1])
                + 0.5 * self.theta[k] * self.dt(k).sqrt() * z;
            grid.push(0.5 * (self.grid[k] + self.grid[k + 1]));
            grid.push(self.grid[k + 1]);
            b_vals.push(mid_b);
            b_vals.push(self.b_vals[k + 1]);
            theta.push(self.theta[k]);
            theta.push(self.theta[k]);
        }
        let qv_vals = cumulative_qv(&grid, &theta);
        DrivenPath {
            grid,
            b_vals,
            qv_vals,
            theta,
            control_id: self.control_id.clone(),
            seed: self.seed,
        }
    }
}

fn cumulative_qv(grid: &[f64], theta: &[f64]) -> Vec<f64> {
    let mut qv = Vec::with_capacity(grid.len());
    qv.push(0.0);
    let mut acc = 0.0;
    for (k, th) in theta.iter().enumerate() {
        acc += th * th * (grid[k + 1] - grid[k]);
        qv.push(acc);
    }
    qv
}

/// `dB_k = theta_k sqrt(dt_k) z_k` with `z_k` drawn from the generator keyed by `seed`.
pub fn simulate_driver(control: &ControlPath, seed: u64) -> DrivenPath {
    let n = control.theta.len();
    let mut rng = rng_for(seed);
    let mut b_vals = Vec::with_capacity(n + 1);
    b_vals.push(0.0);
    let mut b = 0.0;
    for k in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let dt = control.grid[k + 1] - control.grid[k];
        b += control.theta[k] * dt.sqrt() * z;
        b_vals.push(b);
    }
    DrivenPath {
        grid: control.grid.clone(),
        b_vals,
        qv_vals: cumulative_qv(&control.grid, &control.theta),
        theta: control.theta.clone(),
        control_id: control.id.clone(),
        seed,
    }
}

/// Seed of replicate `i` under `master`. Shared by every control so per-control
/// means use common random numbers.
pub fn path_seed(master: u64, i: usize) -> u64 {
    mix(master, i as u64)
}

/// Replicate `i` under `kind`: the control (if random) and the noise are both
/// derived from `path_seed(master, i)`.
pub fn sample_path(
    kind: ControlKind,
    band: &VolatilityBand,
    grid: &[f64],
    master: u64,
    i: usize,
) -> Result<DrivenPath> {
    let seed = path_seed(master, i);
    let control = make_control(kind, band, grid, mix(seed, 1))?;
    Ok(simulate_driver(&control, seed))
}

/// Cumulative sums of squared increments of `B`.
pub fn realized_qv(path: &DrivenPath) -> Vec<f64> {
    let mut out = Vec::with_capacity(path.b_vals.len());
    out.push(0.0);
    let mut acc = 0.0;
    for k in 0..path.steps() {
        let d = path.db(k);
        acc += d * d;
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublinearEstimate {
    /// Maximum of the per-control means. Only a lower bound of the supremum
    /// over all admissible controls.
    pub estimate: f64,
    pub per_control_means: Vec<(String, f64)>,
}

/// Largest Monte Carlo mean of `functional` over the given controls.
pub fn sublinear_expectation<F>(
    functional: F,
    controls: &[ControlPath],
    paths_per_control: usize,
    seed: u64,
) -> Result<SublinearEstimate>
where
    F: Fn(&DrivenPath) -> f64 + Sync,
{
    if controls.is_empty() {
        return Err(Error::invalid("control set", "empty"));
    }
    if paths_per_control == 0 {
        return Err(Error::invalid("paths_per_control", "must be positive"));
    }
    let mut per_control_means = Vec::with_capacity(controls.len());
    for control in controls {
        let values: Vec<Result<f64>> = (0..paths_per_control)
            .into_par_iter()
            .map(|i| {
                let s = path_seed(seed, i);
                let v = functional(&simulate_driver(control, s));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteFunctional {
                        seed: s,
                        control: control.id.clone(),
                    })
                }
            })
            .collect();
        // first failure in index order, whatever the thread schedule
        let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        per_control_means.push((control.id.clone(), mean));
    }
    let estimate = per_control_means
        .iter()
        .map(|(_, m)| *m)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SublinearEstimate {
        estimate,
        per_control_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band() -> VolatilityBand {
        VolatilityBand::new(0.5, 1.0).unwrap()
    }

    #[test]
    fn g_function_values() {
        assert_eq!(g_function(1.0, &band()), 0.5);
        assert_eq!(g_function(0.0, &band()), 0.0);
        assert_eq!(g_function(-2.0, &band()), -0.25);
    }

    #[test]
    fn band_rejects_bad_intervals() {
        assert!(VolatilityBand::new(0.0, 1.0).is_err());
        assert!(VolatilityBand::new(1.0, 0.5).is_err());
        assert!(VolatilityBand::new(0.7, 0.7).is_ok());
    }

    #[test]
    fn constant_controls() {
        let grid = uniform_grid(1.0, 8).unwrap();
        let hi = make_control(ControlKind::ConstantHi, &band(), &grid, 0).unwrap();
        let lo = make_control(ControlKind::ConstantLo, &band(), &grid, 0).unwrap();
        assert!(hi.theta.iter().all(|&t| t == 1.0));
        assert!(lo.theta.iter().all(|&t| t == 0.5));
    }

    #[test]
    fn bang_bang_is_extremal_and_reproducible() {
        let grid = uniform_grid(1.0, 64).unwrap();
        let a = make_control(ControlKind::BangBangRandom, &band(), &grid, 11).unwrap();
        let b = make_control(ControlKind::BangBangRandom, &band(), &grid, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.theta.iter().all(|&t| t == 0.5 || t == 1.0));
        assert!(a.theta.contains(&0.5) && a.theta.contains(&1.0));
    }

    #[test]
    fn piecewise_has_requested_blocks() {
        let grid = uniform_grid(1.0, 12).unwrap();
        let c = make_control(ControlKind::Piecewise { blocks: 3 }, &band(), &grid, 5).unwrap();
        c.validate(&band()).unwrap();
        for chunk in c.theta.chunks(4) {
            assert!(chunk.iter().all(|&t| t == chunk[0]));
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("constant_mid".parse::<ControlKind>().is_err());
        assert_eq!(
            "piecewise:6".parse::<ControlKind>().unwrap(),
            ControlKind::Piecewise { blocks: 6 }
        );
    }

    #[test]
    fn qv_is_deterministic_under_constant_control() {
        let grid = uniform_grid(2.0, 100).unwrap();
        let c = make_control(ControlKind::ConstantHi, &band(), &grid, 0).unwrap();
        let p = simulate_driver(&c, 3);
        assert!((p.qv_vals[100] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_single_cell() {
        let c = ControlPath {
            id: "c".into(),
            grid: vec![0.0, 1.0],
            theta: vec![1.0],
        };
        let mut p = simulate_driver(&c, 0);
        p.b_vals[1] = 0.0;
        assert_eq!(p.b_vals, vec![0.0, 0.0]);
    }

    #[test]
    fn realized_qv_small_cases() {
        let flat = DrivenPath {
            grid: vec![0.0, 0.5, 1.0],
            b_vals: vec![0.0; 3],
            qv_vals: vec![0.0, 0.5, 1.0],
            theta: vec![1.0, 1.0],
            control_id: "c".into(),
            seed: 0,
        };
        assert_eq!(realized_qv(&flat), vec![0.0; 3]);
        let one = DrivenPath {
            grid: vec![0.0, 1.0],
            b_vals: vec![0.0, 0.3],
            qv_vals: vec![0.0, 1.0],
            theta: vec![1.0],
            control_id: "c".into(),
            seed: 0,
        };
        let r = realized_qv(&one);
        assert!((r[1] - 0.09).abs() < 1e-16);
    }

    #[test]
    fn refine_keeps_coarse_nodes() {
        let grid = uniform_grid(1.0, 16).unwrap();
        let c = make_control(ControlKind::BangBangRandom, &band(), &grid, 2).unwrap();
        let p = simulate_driver(&c, 9);
        let f = p.refine(99);
        f.validate().unwrap();
        assert_eq!(f.steps(), 32);
        for k in 0..=16 {
            assert_eq!(f.b_vals[2 * k], p.b_vals[k]);
            assert_eq!(f.grid[2 * k], p.grid[k]);
            assert!((f.qv_vals[2 * k] - p.qv_vals[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_functional_is_preserved() {
        let grid = uniform_grid(1.0, 4).unwrap();
        let controls = vec![
            make_control(ControlKind::ConstantLo, &band(), &grid, 0).unwrap(),
            make_control(ControlKind::ConstantHi, &band(), &grid, 0).unwrap(),
        ];
        let est = sublinear_expectation(|_| 2.5, &controls, 10, 1).unwrap();
        assert_eq!(est.estimate, 2.5);
        let qv = sublinear_expectation(|p| p.qv_vals[p.steps()], &controls, 10, 1).unwrap();
        assert_eq!(qv.estimate, 1.0);
        assert_eq!(qv.per_control_means[0].1, 0.25);
    }

    #[test]
    fn non_finite_functional_names_the_seed() {
        let grid = uniform_grid(1.0, 4).unwrap();
        let controls = vec![make_control(ControlKind::ConstantLo, &band(), &grid, 0).unwrap()];
        let err = sublinear_expectation(|_| f64::NAN, &controls, 3, 1).unwrap_err();
        match err {
            Error::NonFiniteFunctional { seed, control } => {
                assert_eq!(seed, path_seed(1, 0));
                assert_eq!(control, "constant_lo");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
