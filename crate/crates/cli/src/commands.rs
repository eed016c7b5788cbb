use std::path::Path;
use std::process::ExitCode;

use gsde::compare::{
    self, Bounds, CertBox, ComparisonReport, ComparisonSpec, PathwiseConfig, System, Upper, Verdict,
};
use gsde::doss::{solve_doss, Method, PathSolution};
use gsde::driver::{sample_path, uniform_grid, ControlKind, DrivenPath};
use gsde::euler::solve_euler;
use gsde::flow::FlowField;
use gsde::mollify::{convergence_study, StudyConfig, DEFAULT_QUAD_NODES};
use gsde::rng::mix;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, RawConfig};
use crate::output::{num, Output};
use crate::{CliError, Command};

pub fn run(cmd: Command, raw: &RawConfig, out_dir: &Path) -> Result<ExitCode, CliError> {
    let cfg = ExperimentConfig::from_raw(raw)?;
    cfg.audit()?;
    let out = Output::new(out_dir, &raw.hash(), cfg.seed)?;
    match cmd {
        Command::Simulate => simulate(&cfg, &out),
        Command::Represent => represent(&cfg, raw, &out),
        Command::Converge => converge(&cfg, raw, &out),
        Command::Mollify => mollify(&cfg, raw, &out),
        Command::Compare => compare(&cfg, raw, &out),
        Command::FlowCheck => flow_check(&cfg, raw, &out),
    }
}

/// Drivers for every (control, replicate) pair, in that order.
fn drivers(cfg: &ExperimentConfig) -> Result<Vec<DrivenPath>, CliError> {
    let grid = uniform_grid(cfg.horizon, cfg.grid_n)?;
    let jobs: Vec<(ControlKind, usize)> = cfg
        .controls
        .iter()
        .flat_map(|&k| (0..cfg.paths).map(move |i| (k, i)))
        .collect();
    let paths: Vec<_> = jobs
        .par_iter()
        .map(|&(k, i)| sample_path(k, &cfg.band, &grid, cfg.seed, i))
        .collect();
    Ok(paths.into_iter().collect::<Result<Vec<_>, _>>()?)
}

fn simulate(cfg: &ExperimentConfig, out: &Output) -> Result<ExitCode, CliError> {
    let all = drivers(cfg)?;
    for (kind, chunk) in cfg.controls.iter().zip(all.chunks(cfg.paths)) {
        let mut lines = vec!["t,B,QV,control_id,seed".to_string()];
        for d in chunk {
            for k in 0..d.grid.len() {
                lines.push(format!(
                    "{},{},{},{},{}",
                    num(d.grid[k]),
                    num(d.b_vals[k]),
                    num(d.qv_vals[k]),
                    d.control_id,
                    d.seed
                ));
            }
        }
        let name = format!("driver_{}.csv", kind.to_string().replace(':', "_"));
        let p = out.write(&name, lines)?;
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn solution_lines(d: &DrivenPath, sols: &[&PathSolution]) -> Vec<String> {
    let mut lines = vec!["t,B,QV,V,X,method".to_string()];
    for s in sols {
        for k in 0..d.grid.len() {
            let v = s.v_vals.as_ref().map(|v| num(v[k])).unwrap_or_default();
            lines.push(format!(
                "{},{},{},{},{},{}",
                num(d.grid[k]),
                num(d.b_vals[k]),
                num(d.qv_vals[k]),
                v,
                num(s.x_vals[k]),
                s.method
            ));
        }
    }
    lines
}

fn represent(cfg: &ExperimentConfig, raw: &RawConfig, out: &Output) -> Result<ExitCode, CliError> {
    let sys = cfg.system1()?;
    let save: usize = raw.get_or("represent", "save_paths", 1)?;
    let ff = FlowField::new(&sys.coeffs, cfg.x_step)?;
    let ds = drivers(cfg)?;
    let solved: Vec<Result<(PathSolution, PathSolution), gsde::Error>> = ds
        .par_iter()
        .map(|d| {
            Ok((
                solve_doss(&sys.coeffs, &ff, d, sys.x0)?,
                solve_euler(&sys.coeffs, d, sys.x0)?,
            ))
        })
        .collect();
    let solved = solved.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut lines = vec!["control_id,seed,max_abs_err".to_string()];
    let mut worst = 0.0f64;
    for (d, (doss, euler)) in ds.iter().zip(&solved) {
        let e = doss.sup_distance(euler);
        worst = worst.max(e);
        lines.push(format!("{},{},{}", d.control_id, d.seed, num(e)));
    }
    out.write("represent.csv", lines)?;
    for (j, (d, (doss, euler))) in ds.iter().zip(&solved).take(save).enumerate() {
        out.write(
            &format!("solution_{j}.csv"),
            solution_lines(d, &[doss, euler]),
        )?;
    }
    println!("paths={} max_abs_err={}", ds.len(), num(worst));
    Ok(ExitCode::SUCCESS)
}

fn converge(cfg: &ExperimentConfig, raw: &RawConfig, out: &Output) -> Result<ExitCode, CliError> {
    let sys = cfg.system1()?;
    let levels: usize = raw.get_or("converge", "levels", 3)?;
    let factor: usize = raw.get_or("converge", "factor", 4)?;
    if levels < 2 || !factor.is_power_of_two() || factor < 2 {
        return Err(CliError::Validation(
            "converge.levels must be >= 2 and converge.factor a power of two >= 2".into(),
        ));
    }
    let halvings = factor.trailing_zeros();
    let ff = FlowField::new(&sys.coeffs, cfg.x_step)?;
    let ds = drivers(cfg)?;
    let errs: Vec<Result<Vec<f64>, gsde::Error>> = ds
        .par_iter()
        .map(|coarse| {
            let mut d = coarse.clone();
            let mut row = Vec::with_capacity(levels);
            for level in 0..levels {
                if level > 0 {
                    for h in 0..halvings {
                        d = d.refine(mix(coarse.seed, u64::from(h) + 16 * level as u64));
                    }
                }
                let doss = solve_doss(&sys.coeffs, &ff, &d, sys.x0)?;
                let euler = solve_euler(&sys.coeffs, &d, sys.x0)?;
                row.push(doss.sup_distance(&euler));
            }
            Ok(row)
        })
        .collect();
    let errs = errs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut lines = vec!["grid_n,max_sup_err,mean_sup_err,ratio".to_string()];
    let mut prev: Option<f64> = None;
    for level in 0..levels {
        let col: Vec<f64> = errs.iter().map(|r| r[level]).collect();
        let max = col.iter().copied().fold(0.0, f64::max);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let ratio = prev.map(|p| num(p / max)).unwrap_or_default();
        lines.push(format!(
            "{},{},{},{}",
            cfg.grid_n * factor.pow(level as u32),
            num(max),
            num(mean),
            ratio
        ));
        prev = Some(max);
    }
    for l in &lines[1..] {
        println!("{l}");
    }
    out.write("converge.csv", lines)?;
    Ok(ExitCode::SUCCESS)
}

fn mollify(cfg: &ExperimentConfig, raw: &RawConfig, out: &Output) -> Result<ExitCode, CliError> {
    let sys = cfg.system1()?;
    let n_list = raw
        .list::<u32>("mollify", "n_list")?
        .unwrap_or_else(|| vec![10, 20, 40]);
    let study = StudyConfig {
        horizon: cfg.horizon,
        grid_n: cfg.grid_n,
        reference_refinements: raw.get_or("mollify", "reference_refinements", 2)?,
        x_step: cfg.x_step,
        quad_nodes: raw.get_or("mollify", "quad_nodes", DEFAULT_QUAD_NODES)?,
        x0: sys.x0,
        controls: cfg.controls.clone(),
        paths: cfg.paths,
        seed: cfg.seed,
    };
    let report = convergence_study(&sys.coeffs, &cfg.band, &n_list, &study)?;
    let mut lines = vec!["n,mean_sq_sup_err,max_sup_err,fitted_exponent".to_string()];
    for r in &report.rows {
        lines.push(format!(
            "{},{},{},{}",
            r.n,
            num(r.mean_sq_sup_err),
            num(r.max_sup_err),
            num(report.fitted_exponent)
        ));
    }
    for l in &lines[1..] {
        println!("{l}");
    }
    out.write("mollify.csv", lines)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_expr(raw: &RawConfig, section: &str, key: &str) -> Result<gsde::expr::Expr, CliError> {
    let src: String = raw.require(section, key)?;
    gsde::expr::parse(&src).map_err(|e| CliError::Validation(format!("{section}.{key}: {e}")))
}

fn compare(cfg: &ExperimentConfig, raw: &RawConfig, out: &Output) -> Result<ExitCode, CliError> {
    let left = cfg.system1()?;
    let mode: String = raw.get_or("compare", "mode", "system".to_string())?;
    let right = match mode.as_str() {
        "system" => {
            let s = cfg.system2()?;
            Upper::System(System {
                coeffs: s.coeffs.clone(),
                x0: s.x0,
            })
        }
        "bounds" => Upper::Bounds(Bounds {
            sigma: parse_expr(raw, "compare", "sigma_tilde")?,
            g: parse_expr(raw, "compare", "g_tilde")?,
            f: parse_expr(raw, "compare", "f_tilde")?,
            x0: raw.require("compare", "x0_tilde")?,
        }),
        other => {
            return Err(CliError::Validation(format!(
                "compare.mode must be `system` or `bounds`, got `{other}`"
            )))
        }
    };
    let method = match raw
        .get_or("compare", "method", "doss".to_string())?
        .as_str()
    {
        "doss" => Method::Doss,
        "euler" => Method::Euler,
        other => {
            return Err(CliError::Validation(format!(
                "compare.method must be `doss` or `euler`, got `{other}`"
            )))
        }
    };
    let spec = ComparisonSpec {
        left: System {
            coeffs: left.coeffs.clone(),
            x0: left.x0,
        },
        right,
        band: cfg.band,
        cert_box: CertBox {
            t: raw.range("compare", "box_t", (0.0, cfg.horizon))?,
            x: raw.range("compare", "box_x", (-3.0, 3.0))?,
            v: raw.range("compare", "box_v", (-3.0, 3.0))?,
        },
        grid_density: raw.get_or("compare", "grid_density", 11)?,
        x_step: cfg.x_step,
    };
    let pathwise = PathwiseConfig {
        horizon: cfg.horizon,
        grid_n: cfg.grid_n,
        controls: cfg.controls.clone(),
        paths: cfg.paths,
        seed: cfg.seed,
        method,
        tol_c: raw.get("compare", "tol_c")?,
        abs_tol: None,
    };
    let report = compare::verify_pathwise(&spec, &pathwise)?;
    let mut lines = vec!["seed,control_id,index,t,X_left,X_right".to_string()];
    for v in &report.violations {
        lines.push(format!(
            "{},{},{},{},{},{}",
            v.seed,
            v.control_id,
            v.index,
            num(v.t),
            num(v.x_left),
            num(v.x_right)
        ));
    }
    out.write("violations.csv", lines)?;
    let summary = summary_lines(&report);
    for l in &summary {
        println!("{l}");
    }
    out.write("summary.txt", summary)?;
    if report.verdict == Verdict::Violated {
        return Ok(ExitCode::from(3));
    }
    if !report.failures.is_empty() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn summary_lines(r: &ComparisonReport) -> Vec<String> {
    let c = &r.certificate;
    let at = |p: [f64; 3]| format!("({}, {}, {})", num(p[0]), num(p[1]), num(p[2]));
    let mut lines = vec![
        format!("verdict: {}", r.verdict),
        format!("condition_certified_on_grid: {}", c.certified),
        format!(
            "worst_condition_value: {} at (t, x, v) = {}",
            num(c.worst),
            at(c.worst_at)
        ),
        format!(
            "worst_sigma_order_value: {} at (t, x, y) = {}",
            num(c.sigma_worst),
            at(c.sigma_worst_at)
        ),
        format!("certification_box: {}", r.cert_box),
        format!(
            "grid_density: {} per axis ({} points)",
            r.grid_density, c.points
        ),
        "scope: conditions were checked at the grid points only".to_string(),
        format!("method: {}", r.method),
        format!("tolerance: {}", num(r.tolerance)),
        format!("paths_checked: {}", r.paths_checked),
        format!("violations: {}", r.violations.len()),
        format!("failed_paths: {}", r.failures.len()),
    ];
    for f in &r.failures {
        lines.push(format!(
            "failed: seed={} control={} error={}",
            f.seed, f.control_id, f.message
        ));
    }
    lines
}

fn flow_check(cfg: &ExperimentConfig, raw: &RawConfig, out: &Output) -> Result<ExitCode, CliError> {
    let sys = cfg.system1()?;
    let t: f64 = raw.get_or("flow_check", "t", 0.0)?;
    let xs = (
        raw.get_or("flow_check", "x_min", -2.0)?,
        raw.get_or("flow_check", "x_max", 2.0)?,
    );
    let vs = (
        raw.get_or("flow_check", "v_min", -2.0)?,
        raw.get_or("flow_check", "v_max", 2.0)?,
    );
    let points: usize = raw.get_or("flow_check", "points", 21)?;
    let h: f64 = raw.get_or("flow_check", "fd_step", 1e-5)?;
    if points < 2 || !(h > 0.0) {
        return Err(CliError::Validation(
            "flow_check.points must be >= 2 and flow_check.fd_step positive".into(),
        ));
    }
    let ff = FlowField::new(&sys.coeffs, cfg.x_step)?;
    let at = |(lo, hi): (f64, f64), k: usize| lo + (hi - lo) * k as f64 / (points - 1) as f64;
    let rows: Vec<Result<(f64, f64, f64, f64, f64), gsde::Error>> = (0..points * points)
        .into_par_iter()
        .map(|i| {
            let (x, v) = (at(xs, i / points), at(vs, i % points));
            let p = ff.sensitivities(t, x, v)?;
            let fd = (ff.phi(t, x, v + h)? - ff.phi(t, x, v - h)?) / (2.0 * h);
            Ok((x, v, p.phi, p.dv, fd))
        })
        .collect();
    let mut lines = vec!["x,v,phi,phi_dv,fd_dv,abs_err".to_string()];
    let mut worst_rel = 0.0f64;
    for r in rows {
        let (x, v, phi, dv, fd) = r?;
        worst_rel = worst_rel.max((dv - fd).abs() / dv.abs().max(1e-300));
        lines.push(format!(
            "{},{},{},{},{},{}",
            num(x),
            num(v),
            num(phi),
            num(dv),
            num(fd),
            num((dv - fd).abs())
        ));
    }
    out.write("flow_check.csv", lines)?;
    println!("points={} max_rel_err={}", points * points, num(worst_rel));
    Ok(ExitCode::SUCCESS)
}
