use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cpsc"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// `u_max` from the conserved energy: the root above `ū` of
/// `u² − u^{2n/(n−2)} = ε² − ε^{2n/(n−2)}`, by bisection.
fn umax_oracle(n: f64, eps: f64) -> f64 {
    let q = 2.0 * n / (n - 2.0);
    let g = |u: f64| (u * u - u.powf(q)) - (eps * eps - eps.powf(q));
    let ubar = ((n - 2.0) / n).powf((n - 2.0) / 4.0);
    let (mut lo, mut hi) = (ubar, 2.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn delaunay_reports_period_energy_and_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["delaunay", "--n", "3", "--eps", "0.3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&dir.path().join("delaunay.json"));
    let r = &v["result"];
    let u_max = r["u_max"].as_f64().unwrap();
    assert!((u_max - umax_oracle(3.0, 0.3)).abs() < 1e-8);
    assert!((u_max - 0.9757).abs() < 1e-4);
    assert_eq!(r["degenerate"], Value::Bool(false));
    assert_eq!(v["version"].as_str().unwrap(), "cpsc-core 0.1.0");
    assert_eq!(v["config"]["eps"].as_f64().unwrap(), 0.3);
    let csv = std::fs::read_to_string(dir.path().join("orbit.csv")).unwrap();
    assert!(csv.starts_with("t,u,up\n"));
}

#[test]
fn delaunay_at_the_cylinder_constant_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let ubar = (1.0f64 / 3.0).powf(0.25);
    let o = run(&["delaunay", "--n", "3", "--eps", &format!("{ubar:.17}")], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&dir.path().join("delaunay.json"));
    assert_eq!(v["result"]["degenerate"], Value::Bool(true));
}

#[test]
fn configuration_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"n\": 3, \"eps\": }").unwrap();
    let o = run(&["delaunay", "--config", bad.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema error"));

    let o = run(&["delaunay", "--n", "3", "--eps", "0.9"], &dir.path().join("b"));
    assert_eq!(o.status.code(), Some(3));

    let o = run(&["bogus"], &dir.path().join("c"));
    assert_eq!(o.status.code(), Some(3));

    let text = std::fs::read_to_string(configs().join("dipole.json")).unwrap();
    let low = dir.path().join("low.json");
    std::fs::write(&low, text.replace("\"T\": [12.0]", "\"T\": [3.5]")).unwrap();
    let o = run(&["solve", "--config", low.to_str().unwrap()], &dir.path().join("d"));
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("must exceed 2·(cutoff_width + 1)"));

    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, text.replace("\"seed\": 7", "\"sead\": 7")).unwrap();
    let o = run(&["check", "--config", unknown.to_str().unwrap()], &dir.path().join("e"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn modes_table_has_delta_one_equal_to_the_period() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("orbit_n3.json");
    let o = run(&["modes", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&dir.path().join("modes.json"));
    let rows = v["result"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["class"], "jordan");
    assert!(rows[1]["delta_minus_period"].as_f64().unwrap() < 1e-6);
    assert_eq!(rows[1]["multiplicity"].as_u64().unwrap(), 3);
    for f in ["jacobi_translation.csv", "jacobi_parameter.csv", "jacobi_explicit_plus.csv"] {
        assert!(dir.path().join(f).exists());
    }

    let dir = tempfile::tempdir().unwrap();
    let o = run(&["modes", "--n", "4", "--eps", "0.3", "--jmax", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&dir.path().join("modes.json"));
    assert_eq!(v["result"]["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn floquet_reports_reciprocal_multipliers() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["floquet", "--n", "3", "--eps", "0.3", "--j", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&dir.path().join("floquet.json"));
    let r = &v["result"];
    assert!((r["determinant"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let mu = &r["record"]["multipliers"];
    let prod = mu[0][0].as_f64().unwrap() * mu[1][0].as_f64().unwrap();
    assert!((prod - 1.0).abs() < 1e-6);
}

#[test]
fn check_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("chain.json");
    let o = run(&["check", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["gluing"]["grids"]["x_order"].as_u64().unwrap(), 6);
    assert_eq!(v["solver"]["residual_target"].as_f64().unwrap(), 2e-9);
}

#[test]
fn glue_writes_fields_and_support() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("dipole.json");
    let o = run(&["glue", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&dir.path().join("glue.json"));
    let r = &v["result"];
    assert!(r["error_outside_transition"].as_f64().unwrap() <= 1e-8 * r["error_sup"].as_f64().unwrap());
    for f in ["u_T_body0.csv", "u_T_neck0.csv", "f_T_body1.csv"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn dipole_solve_is_certified_and_deterministic() {
    let cfg = configs().join("dipole.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["solve", "--config", cfg.to_str().unwrap(), "--threads", "2"], d.path());
        assert_eq!(o.status.code(), Some(0));
    }
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
    let v = read_json(&a.path().join("report.json"));
    let r = &v["result"]["report"];
    assert_eq!(r["status"], "converged");
    assert_eq!(r["kernel_count"].as_u64().unwrap(), 0);
    assert!(r["curvature_defect"].as_f64().unwrap() < 7.05e-4);
    assert_eq!(r["threads"].as_u64().unwrap(), 2);
    assert_eq!(v["config"]["gluing"]["T"][0].as_f64().unwrap(), 12.0);
    let iters = std::fs::read_to_string(a.path().join("iterations.csv")).unwrap();
    assert!(iters.starts_with("iteration,residual,increment,ratio,damping\n"));
    for f in ["factor_body0.csv", "u_T_neck0.csv", "f_T_body1.csv", "correction_neck0.csv"] {
        assert!(a.path().join(f).exists());
    }
}

#[test]
fn verify_passes_on_the_dipole() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("dipole.json");
    let o = run(&["verify", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let v = read_json(&dir.path().join("verify.json"));
    assert_eq!(v["result"]["pass"], Value::Bool(true));
}

#[test]
fn chain_sample_reports_six_ends() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("chain.json");
    let o = run(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&dir.path().join("report.json"));
    assert_eq!(v["result"]["report"]["end_estimates"].as_array().unwrap().len(), 6);
}

#[test]
fn sweeps_fit_the_decay_rate_and_plateau() {
    for (file, n) in [("sweep_n3.json", 3.0), ("sweep_n4.json", 4.0)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = configs().join(file);
        let o = run(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(0));
        let v = read_json(&dir.path().join("sweep.json"));
        let r = &v["result"];
        let rate = r["decay"]["rate"].as_f64().unwrap();
        assert!(rate <= -(n - 2.0) / 4.0 + 0.05, "{file}: {rate}");
        assert!(r["decay"]["r_squared"].as_f64().unwrap() >= 0.99);
        if n == 4.0 {
            assert!((rate + 0.5).abs() <= 0.1);
        }
        assert_eq!(r["norms"]["plateau"], Value::Bool(true));
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }
}
