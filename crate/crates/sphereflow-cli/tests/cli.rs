//! End-to-end runs of the `sphereflow` binary.

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sphereflow(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphereflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SPHEREFLOW_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Header fields and data rows of a headered CSV.
fn parse_csv(text: &str) -> (Vec<(String, String)>, Vec<String>, Vec<Vec<f64>>) {
    let mut header = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(l) = lines.peek().and_then(|l| l.strip_prefix("# ")) {
        let (k, v) = l.split_once(": ").unwrap();
        header.push((k.to_string(), v.to_string()));
        lines.next();
    }
    let cols = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, cols, rows)
}

fn header<'a>(h: &'a [(String, String)], key: &str) -> &'a str {
    &h.iter().find(|(k, _)| k == key).unwrap().1
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, json).unwrap();
    p
}

const SMALL_2B: [&str; 9] = [
    "simulate", "--scenario", "2b", "--seed", "7", "--n", "300", "--steps", "50",
];

#[test]
fn simulate_writes_trajectory_and_metrics_with_echo() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(sphereflow(dir.path(), &SMALL_2B));
    let stdout = String::from_utf8_lossy(&o.stdout);
    // Default stride 25 on 50 steps: records at 0, 25, 50.
    assert_eq!(stdout.lines().filter(|l| l.starts_with("step")).count(), 3);

    let (h, cols, rows) = parse_csv(&read(dir.path().join("traj.csv")));
    assert_eq!(header(&h, "schema"), "sphereflow-trajectory/v1");
    assert_eq!(header(&h, "seed"), "7");
    assert!(header(&h, "content-hash").starts_with("sha256:"));
    let echo: Value = serde_json::from_str(header(&h, "config")).unwrap();
    assert_eq!(echo["version"], "v1");
    assert_eq!(echo["scenario"], "2b");
    assert_eq!(echo["seed"], 7);
    assert_eq!(echo["n"], 300);
    assert_eq!(echo["integrator"]["clock"], "heat");
    assert_eq!(cols, ["step", "time", "rescaled_time", "particle", "c0", "c1"]);
    assert_eq!(rows.len(), 300 * 3);
    for r in &rows {
        assert!((r[4].hypot(r[5]) - 1.0).abs() < 1e-9);
    }

    let m: Value = serde_json::from_str(&read(dir.path().join("metrics.json"))).unwrap();
    assert_eq!(m["config"], echo);
    let w1 = m["series"]["oracle_w1"].as_array().unwrap();
    assert_eq!(w1.len(), 3);
    assert!(w1[0]["t"].is_number() && w1[0]["value"].is_number());
}

#[test]
fn reruns_are_byte_identical_across_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(sphereflow(a.path(), &[&SMALL_2B[..], &["--threads", "1"]].concat()));
    ok(sphereflow(b.path(), &[&SMALL_2B[..], &["--threads", "3"]].concat()));
    for f in ["traj.csv", "metrics.json"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
}

#[test]
fn config_echo_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    ok(sphereflow(
        a.path(),
        &["simulate", "--scenario", "1b", "--n", "200", "--steps", "20", "--seed", "3"],
    ));
    let traj = read(a.path().join("traj.csv"));
    let (h, _, _) = parse_csv(&traj);
    let cfg = write_config(a.path(), header(&h, "config"));

    let b = tempfile::tempdir().unwrap();
    ok(sphereflow(b.path(), &["simulate", "--config", cfg.to_str().unwrap()]));
    assert_eq!(read(b.path().join("traj.csv")), traj);
}

#[test]
fn collapse_distance_decreases() {
    let dir = tempfile::tempdir().unwrap();
    ok(sphereflow(
        dir.path(),
        &[
            "simulate", "--scenario", "1a", "--observe", "subspace_distance", "--n", "500",
            "--steps", "200", "--stride", "20",
        ],
    ));
    let m: Value = serde_json::from_str(&read(dir.path().join("metrics.json"))).unwrap();
    let v: Vec<f64> = m["series"]["subspace_distance"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["value"].as_f64().unwrap())
        .collect();
    assert_eq!(v.len(), 11);
    assert!(v.windows(2).all(|w| w[1] < w[0]), "{v:?}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for json in [
        r#"{"version":"v1","scenario":"1a","betta":2}"#,
        r#"{"version":"v0"}"#,
        r#"{"version":"v1","q":[[1,0],[0,1]],"d":3}"#,
        "not json",
    ] {
        let cfg = write_config(dir.path(), json);
        let o = sphereflow(dir.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{json}: {}", stderr(&o));
    }
    let o = sphereflow(dir.path(), &["simulate", "--scenario", "9z"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn io_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = sphereflow(dir.path(), &["simulate", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    // A regular file where the output directory should be.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let o = sphereflow(&blocker.join("out"), &["simulate", "--n", "10", "--steps", "2"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_3_with_step_and_particle() {
    let dir = tempfile::tempdir().unwrap();
    // V = -I on a lone particle: the layer map sends x to 0.
    let cfg = write_config(
        dir.path(),
        r#"{"version":"v1","beta":1,"v":[[-1,0],[0,-1]],
            "init":{"kind":"points","coords":[[1,0]]},
            "integrator":{"scheme":"discrete-layer","h":1,"steps":3}}"#,
    );
    let o = sphereflow(dir.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("step 0, particle 0"), "{}", stderr(&o));
    assert!(!dir.path().join("traj.csv").exists());
}

#[test]
fn oracle_blocks_and_collapse() {
    let dir = tempfile::tempdir().unwrap();
    ok(sphereflow(
        dir.path(),
        &["oracle", "--scenario", "2a", "--times", "0,0.005,0.01", "--grid", "64"],
    ));
    let (h, cols, rows) = parse_csv(&read(dir.path().join("oracle.csv")));
    assert_eq!(header(&h, "schema"), "sphereflow-oracle/v1");
    assert_eq!(cols, ["t", "theta", "density"]);
    assert_eq!(rows.len(), 3 * 64);
    for block in rows.chunks(64) {
        assert!(block.iter().all(|r| r[0] == block[0][0]));
        let mass: f64 = block.iter().map(|r| r[2]).sum::<f64>() * std::f64::consts::TAU / 64.0;
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    let o = sphereflow(dir.path(), &["oracle", "--scenario", "2a", "--times", "0.02"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("component #"), "{}", stderr(&o));
}

#[test]
fn forward_oracle_flattens_to_uniform() {
    let dir = tempfile::tempdir().unwrap();
    ok(sphereflow(dir.path(), &["oracle", "--scenario", "2b", "--times", "40", "--grid", "32"]));
    let (_, _, rows) = parse_csv(&read(dir.path().join("oracle.csv")));
    let uniform = 1.0 / std::f64::consts::TAU;
    assert!(rows.iter().all(|r| (r[2] - uniform).abs() < 1e-6));
}

#[test]
fn verify_reports_and_rejects_unknown_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(sphereflow(dir.path(), &["verify", "integral_asymptotics"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("integral_asymptotics: PASS"));
    let r: Value = serde_json::from_str(&read(dir.path().join("verify.json"))).unwrap();
    assert_eq!(r["schema"], "sphereflow-verify/v1");
    assert_eq!(r["passed"], true);
    let c = &r["checks"][0];
    assert_eq!(c["id"], "integral_asymptotics");
    assert!(c["runtime_s"].as_f64().unwrap() < c["runtime_limit_s"].as_f64().unwrap());
    assert!(c["slopes"].as_object().unwrap().len() >= 4);
    assert!(!c["criteria"].as_array().unwrap().is_empty());

    let o = sphereflow(dir.path(), &["verify", "no_such_check"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn failing_check_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    // The d = 3 residual of the mean-resultant expansion is identically
    // zero, so its slope cannot be fitted and the check reports a failure.
    let o = sphereflow(dir.path(), &["verify", "vmf_asymptotics"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&read(dir.path().join("verify.json"))).unwrap();
    assert_eq!(r["passed"], false);
}

#[test]
fn limit_flows_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(sphereflow(
        dir.path(),
        &["limit", "alignment", "--scenario", "1a", "--n", "100", "--steps", "50"],
    ));
    let m: Value = serde_json::from_str(&read(dir.path().join("metrics.json"))).unwrap();
    let d = m["series"]["subspace_distance"].as_array().unwrap();
    assert!(d.last().unwrap()["value"].as_f64() < d[0]["value"].as_f64());
    assert_eq!(m["config"]["limit"]["flow"], "alignment");

    let pdir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        pdir.path(),
        r#"{"version":"v1","init":{"kind":"points","coords":[
            [1,0,0],[0.6216099682706644,0.7833269096274834,0],
            [0.3623577544766736,0,0.9320390859672263],[-0.5773502691896258,-0.5773502691896258,-0.5773502691896258]]},
            "integrator":{"h":0.01,"steps":2000},"limit":{"flow":"pairing"}}"#,
    );
    let o = ok(sphereflow(pdir.path(), &["limit", "--config", cfg.to_str().unwrap()]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pair (0, 1) reaches"));
    let m: Value = serde_json::from_str(&read(pdir.path().join("metrics.json"))).unwrap();
    assert_eq!(m["series"]["t_eps"].as_array().unwrap().len(), 1);
    assert_eq!(m["config"]["limit"]["eps"], 0.1);
}

#[test]
fn sweep_writes_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    ok(sphereflow(
        dir.path(),
        &[
            "sweep", "--scenario", "1a", "--betas", "5,10", "--sizes", "50,80", "--steps", "10",
        ],
    ));
    let idx: Value = serde_json::from_str(&read(dir.path().join("sweep.json"))).unwrap();
    let cells = idx["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    for c in cells {
        let sub = dir.path().join(c["dir"].as_str().unwrap());
        let (h, _, rows) = parse_csv(&read(sub.join("traj.csv")));
        let echo: Value = serde_json::from_str(header(&h, "config")).unwrap();
        assert_eq!(echo["beta"], c["beta"]);
        assert_eq!(rows.len() as u64, 2 * c["n"].as_u64().unwrap());
        assert!(c["last"]["subspace_distance"].is_number());
    }
}

#[test]
fn heat_panel_export_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    ok(sphereflow(dir.path(), &SMALL_2B));
    let traj = dir.path().join("traj.csv");
    let args = ["export-plot", "--kind", "heat-panels", "--bins", "16", "--traj", traj.to_str().unwrap()];
    ok(sphereflow(dir.path(), &args));
    let first = read(dir.path().join("plot_heat_panels.csv"));
    ok(sphereflow(dir.path(), &args));
    assert_eq!(read(dir.path().join("plot_heat_panels.csv")), first);

    let (_, cols, rows) = parse_csv(&first);
    assert_eq!(cols, ["panel", "step", "time", "heat_time", "theta", "histogram", "oracle"]);
    assert_eq!(rows.len(), 3 * 16);
    for panel in rows.chunks(16) {
        let hist: f64 = panel.iter().map(|r| r[5]).sum::<f64>() * std::f64::consts::TAU / 16.0;
        assert!((hist - 1.0).abs() < 1e-12);
        assert!(panel.iter().all(|r| r[6] > 0.0));
    }
}

#[test]
fn energy_export_and_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    ok(sphereflow(
        dir.path(),
        &["simulate", "--n", "50", "--steps", "30", "--observe", "energy", "--beta", "2"],
    ));
    let metrics = dir.path().join("metrics.json");
    ok(sphereflow(
        dir.path(),
        &["export-plot", "--kind", "energy-log", "--metrics", metrics.to_str().unwrap()],
    ));
    let (_, cols, rows) = parse_csv(&read(dir.path().join("plot_energy_log.csv")));
    assert_eq!(cols, ["log10_time", "energy"]);
    assert_eq!(rows.len(), 3);

    // A trajectory is not a metrics file, and vice versa.
    let traj = dir.path().join("traj.csv");
    let o = sphereflow(
        dir.path(),
        &["export-plot", "--kind", "energy-log", "--metrics", traj.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    let o = sphereflow(
        dir.path(),
        &["export-plot", "--kind", "heat-panels", "--traj", metrics.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    // The custom scenario has no heat oracle.
    let o = sphereflow(
        dir.path(),
        &["export-plot", "--kind", "heat-panels", "--traj", traj.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn env_var_sets_the_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sphereflow"))
        .args(["simulate", "--n", "10", "--steps", "2"])
        .env("SPHEREFLOW_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("metrics.json").exists());
}
