//! INI experiment configuration with `section.key=value` overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use gsde::coeff::{AuditBox, CoefficientSet};
use gsde::driver::{ControlKind, VolatilityBand};
use ini::{Ini, ParseOption};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Every key the tool understands, by section.
const KNOWN: &[(&str, &[&str])] = &[
    (
        "run",
        &["T", "grid_n", "x_step", "paths", "seed", "controls"],
    ),
    ("band", &["sigma_lo", "sigma_hi"]),
    (
        "system1",
        &["b", "h", "sigma", "x0", "lipschitz_K", "bound_M"],
    ),
    (
        "system2",
        &["b", "h", "sigma", "x0", "lipschitz_K", "bound_M"],
    ),
    ("audit", &["samples", "x_max", "y_max"]),
    ("simulate", &[]),
    ("represent", &["save_paths"]),
    ("converge", &["levels", "factor"]),
    (
        "mollify",
        &["n_list", "quad_nodes", "reference_refinements"],
    ),
    (
        "compare",
        &[
            "mode",
            "method",
            "tol_c",
            "box_t",
            "box_x",
            "box_v",
            "grid_density",
            "sigma_tilde",
            "g_tilde",
            "f_tilde",
            "x0_tilde",
        ],
    ),
    (
        "flow_check",
        &["t", "x_min", "x_max", "v_min", "v_max", "points", "fd_step"],
    ),
];

/// Flat view of the file after overrides; keys are `(section, key)`.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<(String, String), String>,
}

fn check_known(section: &str, key: &str) -> Result<(), CliError> {
    match KNOWN.iter().find(|(s, _)| *s == section) {
        None => Err(CliError::Validation(format!(
            "unknown config section [{section}]"
        ))),
        Some((_, keys)) if !keys.contains(&key) => Err(CliError::Validation(format!(
            "unknown config key {section}.{key}"
        ))),
        Some(_) => Ok(()),
    }
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "config file {} not found",
                path.display()
            )));
        }
        let opt = ParseOption {
            enabled_quote: true,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_file_opt(path, opt)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = RawConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(CliError::Validation(format!(
                        "{}: keys before the first [section]",
                        path.display()
                    )));
                }
                continue;
            };
            for (key, value) in props.iter() {
                check_known(section, key)?;
                cfg.values.insert(
                    (section.to_string(), key.to_string()),
                    value.trim().to_string(),
                );
            }
        }
        Ok(cfg)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, spec: &str) -> Result<(), CliError> {
        let bad = || CliError::Validation(format!("override `{spec}` is not section.key=value"));
        let (name, value) = spec.split_once('=').ok_or_else(bad)?;
        let (section, key) = name.trim().split_once('.').ok_or_else(bad)?;
        check_known(section, key)?;
        let value = value.trim().trim_matches('"');
        self.values
            .insert((section.to_string(), key.to_string()), value.to_string());
        Ok(())
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.values.keys().any(|(s, _)| s == section)
    }

    /// SHA-256 of the sorted `section.key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for ((s, k), v) in &self.values {
            h.update(format!("{s}.{k}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        self.raw(section, key)
            .map(|v| {
                v.parse::<T>().map_err(|_| {
                    CliError::Validation(format!("{section}.{key}: cannot read `{v}`"))
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T, CliError> {
        self.get(section, key)?
            .ok_or_else(|| CliError::Validation(format!("missing config key {section}.{key}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, CliError> {
        let Some(v) = self.raw(section, key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|item| {
                item.trim().parse::<T>().map_err(|_| {
                    CliError::Validation(format!("{section}.{key}: cannot read `{}`", item.trim()))
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// `lo,hi` pair.
    pub fn range(
        &self,
        section: &str,
        key: &str,
        default: (f64, f64),
    ) -> Result<(f64, f64), CliError> {
        match self.list::<f64>(section, key)? {
            None => Ok(default),
            Some(v) if v.len() == 2 && v[0] <= v[1] => Ok((v[0], v[1])),
            Some(_) => Err(CliError::Validation(format!(
                "{section}.{key}: expected `lo,hi` with lo <= hi"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub coeffs: CoefficientSet,
    pub x0: f64,
}

/// The validated common part of a configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub horizon: f64,
    pub grid_n: usize,
    pub x_step: f64,
    pub paths: usize,
    pub seed: u64,
    pub controls: Vec<ControlKind>,
    pub band: VolatilityBand,
    pub system1: Option<SystemConfig>,
    pub system2: Option<SystemConfig>,
    pub audit_samples: usize,
    pub audit_box: AuditBox,
}

fn system(raw: &RawConfig, section: &str) -> Result<Option<SystemConfig>, CliError> {
    if !raw.has_section(section) {
        return Ok(None);
    }
    let expr = |key: &str, default: &str| -> Result<gsde::expr::Expr, CliError> {
        let src = raw.raw(section, key).unwrap_or(default);
        gsde::expr::parse(src).map_err(|e| CliError::Validation(format!("{section}.{key}: {e}")))
    };
    let sigma = raw
        .raw(section, "sigma")
        .ok_or_else(|| CliError::Validation(format!("missing config key {section}.sigma")))?;
    let sigma = gsde::expr::parse(sigma)
        .map_err(|e| CliError::Validation(format!("{section}.sigma: {e}")))?;
    let coeffs = CoefficientSet::new(
        expr("b", "0")?,
        expr("h", "0")?,
        sigma,
        raw.require(section, "lipschitz_K")?,
        raw.require(section, "bound_M")?,
    )
    .map_err(|e| CliError::Validation(format!("[{section}]: {e}")))?;
    Ok(Some(SystemConfig {
        coeffs,
        x0: raw.get_or(section, "x0", 0.0)?,
    }))
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let horizon: f64 = raw.get_or("run", "T", 1.0)?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(CliError::Validation(format!(
                "run.T must be positive, got {horizon}"
            )));
        }
        let grid_n: usize = raw.get_or("run", "grid_n", 1024)?;
        if grid_n < 2 {
            return Err(CliError::Validation(format!(
                "run.grid_n must be at least 2, got {grid_n}"
            )));
        }
        let paths: usize = raw.get_or("run", "paths", 100)?;
        if paths < 1 {
            return Err(CliError::Validation("run.paths must be at least 1".into()));
        }
        let x_step: f64 = raw.get_or("run", "x_step", 0.01)?;
        if !(x_step > 0.0 && x_step.is_finite()) {
            return Err(CliError::Validation(format!(
                "run.x_step must be positive, got {x_step}"
            )));
        }
        let controls = raw
            .list::<ControlKind>("run", "controls")?
            .unwrap_or_else(|| {
                vec![
                    ControlKind::ConstantLo,
                    ControlKind::ConstantHi,
                    ControlKind::BangBangRandom,
                ]
            });
        if controls.is_empty() {
            return Err(CliError::Validation("run.controls is empty".into()));
        }
        let band = VolatilityBand::new(
            raw.require("band", "sigma_lo")?,
            raw.require("band", "sigma_hi")?,
        )
        .map_err(|e| CliError::Validation(format!("[band]: {e}")))?;
        Ok(Self {
            horizon,
            grid_n,
            x_step,
            paths,
            seed: raw.get_or("run", "seed", 1)?,
            controls,
            band,
            system1: system(raw, "system1")?,
            system2: system(raw, "system2")?,
            audit_samples: raw.get_or("audit", "samples", 1000)?,
            audit_box: AuditBox {
                t_max: horizon,
                x_max: raw.get_or("audit", "x_max", 3.0)?,
                y_max: raw.get_or("audit", "y_max", 3.0)?,
            },
        })
    }

    pub fn system1(&self) -> Result<&SystemConfig, CliError> {
        self.system1
            .as_ref()
            .ok_or_else(|| CliError::Validation("missing config section [system1]".into()))
    }

    pub fn system2(&self) -> Result<&SystemConfig, CliError> {
        self.system2
            .as_ref()
            .ok_or_else(|| CliError::Validation("missing config section [system2]".into()))
    }

    /// Checks declared bounds and Lipschitz constants of every system present.
    pub fn audit(&self) -> Result<(), CliError> {
        if self.audit_samples == 0 {
            return Ok(());
        }
        for (name, s) in [("system1", &self.system1), ("system2", &self.system2)] {
            if let Some(s) = s {
                s.coeffs
                    .audit(&self.audit_box, self.audit_samples, self.seed)
                    .map_err(|e| CliError::Validation(format!("[{name}] {e}")))?;
            }
        }
        Ok(())
    }
}
