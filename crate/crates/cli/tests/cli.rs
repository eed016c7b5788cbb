use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn gsde(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsde"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsde(&["simulate", "--config", "no/such/file.ini"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no/such/file.ini"));
}

#[test]
fn bad_override_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("represent_const.ini");
    let o = gsde(
        &[
            "represent",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "run.grid=3",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.grid"));
    let o = gsde(
        &[
            "represent",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "system1.sigma=1 +",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("system1.sigma"));
}

#[test]
fn understated_metadata_fails_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("represent_const.ini");
    let o = gsde(
        &[
            "represent",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "system1.sigma=2*y",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("audit"));
}

#[test]
fn constant_coefficients_are_represented_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsde(
        &[
            "represent",
            "--config",
            config("represent_const.ini").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&dir.path().join("represent.csv"));
    assert_eq!(rows.len(), 150);
    for r in rows {
        assert!(r[2].parse::<f64>().unwrap() <= 1e-10);
    }
    let sol = fs::read_to_string(dir.path().join("solution_0.csv")).unwrap();
    let lines: Vec<&str> = sol.lines().collect();
    assert_eq!(lines[1], "t,B,QV,V,X,method");
    // Euler rows carry no V
    assert!(lines.last().unwrap().contains(",,") && lines.last().unwrap().ends_with(",euler"));
}

#[test]
fn remark_config_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsde(
        &[
            "compare",
            "--config",
            config("remark56.ini").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("verdict: consistent"));
    assert!(summary.contains("worst_condition_value: 0.0000000000000000e0"));
    assert!(summary.contains("certification_box: t in [0, 1]"));
    assert_eq!(read_csv(&dir.path().join("violations.csv")).len(), 0);
}

#[test]
fn certified_box_that_misses_the_paths_gives_exit_three() {
    // the condition holds on the box but the left drift wins where paths go
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("remark56.ini");
    let o = gsde(
        &[
            "compare",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "system1.b=y",
            "--set",
            "system1.h=0",
            "--set",
            "system2.b=0",
            "--set",
            "system1.bound_M=10",
            "--set",
            "audit.samples=0",
            "--set",
            "compare.box_v=-3,-2",
            "--set",
            "compare.box_x=-1,1",
            "--set",
            "run.paths=5",
        ],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(
        summary.contains("verdict: violated")
            && summary.contains("condition_certified_on_grid: true")
    );
    assert!(!read_csv(&dir.path().join("violations.csv")).is_empty());
}

#[test]
fn necessity_probe_finds_crossings_without_certification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("necessity.ini");
    let o = gsde(
        &[
            "compare",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "run.paths=50",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("verdict: hypotheses-fail"));
    assert!(!read_csv(&dir.path().join("violations.csv")).is_empty());
}

#[test]
fn flow_check_matches_finite_differences() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsde(
        &[
            "flow-check",
            "--config",
            config("flow_tanh.ini").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let rows = read_csv(&dir.path().join("flow_check.csv"));
    assert_eq!(rows.len(), 441);
    for r in rows {
        let (dv, err): (f64, f64) = (r[3].parse().unwrap(), r[5].parse().unwrap());
        assert!(err <= 1e-5 * dv.abs());
    }
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical_and_headed() {
    let runs: &[(&str, &str, &[&str])] = &[
        (
            "simulate",
            "nonlinear.ini",
            &["--set", "run.paths=3", "--set", "run.grid_n=32"],
        ),
        (
            "represent",
            "nonlinear.ini",
            &["--set", "run.paths=2", "--set", "run.grid_n=32"],
        ),
        (
            "converge",
            "nonlinear.ini",
            &["--set", "run.paths=2", "--set", "run.grid_n=16"],
        ),
        (
            "mollify",
            "mollify_abs.ini",
            &[
                "--set",
                "run.paths=2",
                "--set",
                "run.grid_n=16",
                "--set",
                "mollify.reference_refinements=1",
            ],
        ),
        ("compare", "remark56.ini", &["--set", "run.paths=3"]),
        (
            "flow-check",
            "flow_tanh.ini",
            &["--set", "flow_check.points=4"],
        ),
    ];
    for (cmd, cfg, extra) in runs {
        let cfg = config(cfg);
        let mut args = vec![*cmd, "--config", cfg.to_str().unwrap(), "--seed", "99"];
        args.extend_from_slice(extra);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert!(gsde(&args, a.path()).status.success(), "{cmd}");
        args.extend_from_slice(&["--threads", "1"]);
        assert!(gsde(&args, b.path()).status.success(), "{cmd}");
        let (fa, fb) = (outputs(a.path()), outputs(b.path()));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{cmd}");
        for (name, bytes) in &fa {
            let text = String::from_utf8_lossy(bytes);
            let first = text.lines().next().unwrap();
            assert!(
                first.starts_with("# config_hash=") && first.ends_with(" seed=99"),
                "{cmd}/{name}: {first}"
            );
            assert!(!text.contains('\r'));
        }
    }
}
