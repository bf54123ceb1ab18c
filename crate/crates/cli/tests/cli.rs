use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aggsolve(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggsolve"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AGGSOLVE_OUT")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.toml");
    fs::write(
        &p,
        r#"
        horizon = 300
        replications = 2
        master_seed = 3
        metrics = ["rel_residual", "consensus_error", "drift"]
        [game]
        preset = "desk-small"
        "#,
    )
    .unwrap();
    p
}

#[test]
fn template_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = aggsolve(&["gen", "--template", "-o", "exp.toml"], dir.path());
    assert!(out.status.success());
    let out = aggsolve(&["run", "exp.toml", "--horizon", "200", "--replications", "2", "-o", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["resolved_config.json", "summary.json", "averaged.csv", "run_000.csv", "run_001.json"] {
        assert!(dir.path().join("res").join(f).exists(), "{f}");
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_aggsolve"))
        .args(["run", cfg.to_str().unwrap()])
        .env("AGGSOLVE_OUT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("root/small/summary.json").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "horizon = 10\n[game]\npreset = \"nope\"\n").unwrap();
    let out = aggsolve(&["run", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("available presets"));
    let out = aggsolve(&["gen", "--preset", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn instances_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(aggsolve(&["gen", "--seed", "4", "-o", "inst.json"], dir.path()).status.success());
    fs::write(
        dir.path().join("file.toml"),
        "horizon = 100\nreplications = 1\n[game]\nfile = \"inst.json\"\n[graph]\nkind = \"ring\"\n",
    )
    .unwrap();
    let out = aggsolve(&["run", "file.toml", "-o", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_reports_admissible_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = aggsolve(&["validate", cfg.to_str().unwrap(), "--horizon", "100"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("bound violations=0"));
}

#[test]
fn compare_then_plot_draws_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = aggsolve(&["compare", cfg.to_str().unwrap(), "-o", "cmp"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("cmp/comparison.csv").exists());
    let out = aggsolve(&["plot", "cmp", "-o", "figs", "--log-x"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(dir.path().join("figs/rel_residual.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    // zero drift on every row has nothing to draw on a log axis
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping `drift`") || dir.path().join("figs/drift.svg").exists());
}

#[test]
fn plot_rejects_mismatched_traces() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "k,gap\n0,1e0\n10,1e-1\n").unwrap();
    fs::write(dir.path().join("b.csv"), "k,norm\n0,1e0\n10,1e-1\n").unwrap();
    let out = aggsolve(&["plot", "a.csv", "b.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("column mismatch"));
}
