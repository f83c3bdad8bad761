use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridstorm::grid::bundled_case_path;
use tempfile::TempDir;

fn gridstorm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridstorm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("sweep.toml");
    fs::write(&p, body).unwrap();
    p
}

fn run_sweep(dir: &Path, cfg: &Path, out: &str) -> (Output, PathBuf) {
    let o = gridstorm(&["run", "--config", cfg.to_str().unwrap(), "--out", out], dir);
    (o, dir.join(out))
}

#[test]
fn sweep_writes_reports_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "strategies = [\"naive\", \"insidious\"]\npenetrations = [0.1, 0.5]\ngammas = [0.0]\n",
    );
    let (a, da) = run_sweep(tmp.path(), &cfg, "a");
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let (b, db) = run_sweep(tmp.path(), &cfg, "b");
    assert!(b.status.success());
    for name in ["summary.csv", "margins.csv"] {
        assert_eq!(fs::read(da.join(name)).unwrap(), fs::read(db.join(name)).unwrap(), "{name}");
    }
    let summary = fs::read_to_string(da.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,penetration,gamma,ens_mw,ens_cost_usd,grid_separated,iterations"
    );
    assert_eq!(lines.count(), 4);
    assert!(summary.contains("insidious,0.5,0,21.000"), "{summary}");
    assert!(da.join("run.json").exists());
    assert!(!da.join("errors.json").exists());
    assert!(da.join("plan_naive_rho0.5_gamma0.json").exists());
}

#[test]
fn zero_penetration_sheds_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "penetrations = [0.0]\n");
    let (o, dir) = run_sweep(tmp.path(), &cfg, "out");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    for row in summary.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[3], "0.000", "{row}");
        assert_eq!(cols[5], "false");
    }
}

#[test]
fn bad_configs_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    for body in ["penetrations = [1.5]\n", "strategies = [\"greedy\"]\n", "colour = 3\n", "gammas = ["] {
        let cfg = write_config(tmp.path(), body);
        let (o, _) = run_sweep(tmp.path(), &cfg, "out");
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
    let o = gridstorm(&["run", "--config", "missing.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_accepts_the_bundled_case_and_rejects_a_broken_one() {
    let tmp = TempDir::new().unwrap();
    let ok = gridstorm(&["validate", bundled_case_path().to_str().unwrap()], tmp.path());
    assert_eq!(ok.status.code(), Some(0));

    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(bundled_case_path()).unwrap()).unwrap();
    doc["feeders"][0]["buses"][2]["load_p"] = serde_json::json!(-1.0);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, doc.to_string()).unwrap();
    let o = gridstorm(&["validate", bad.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stdout.is_empty());
}

#[test]
fn attack_prints_a_plan() {
    let tmp = TempDir::new().unwrap();
    let o = gridstorm(
        &["attack", "--strategy", "naive", "--rho", "0.25", bundled_case_path().to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["strategy"], "naive");
    assert_eq!(plan["penetration"], 0.25);
    let o = gridstorm(
        &["attack", "--strategy", "naive", "--rho", "2", bundled_case_path().to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}
