use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use hybridlv::cli::{cmd_simulate, cmd_verify, run, Overrides, Suite};
use serde_json::Value;

const ONE_STATE: &str = r#"{
    "name": "logistic",
    "states": [{"b": [1.0, 0.8], "a": [[1.0, 0.2], [0.1, 1.0]], "sigma": [0.3, 0.2]}],
    "generator": {"trunc_size": 1, "rows": []},
    "x0": [0.5, 0.5],
    "horizon": 1.0,
    "scheme": {"dt": 0.01}
}"#;

const EXTINCTION: &str = r#"{
    "name": "extinction",
    "states": [{"b": [-1.5], "a": [[1.0]], "sigma": [2.0]}],
    "generator": {"trunc_size": 1, "rows": []},
    "x0": [0.5],
    "horizon": 2.0
}"#;

const SWITCHING: &str = r#"{
    "name": "switching",
    "states": [
        {"b": [4.0], "a": [[1.0]], "sigma": [0.5]},
        {"b": [-1.0], "a": [[1.0]], "sigma": [0.5]}
    ],
    "generator": {"trunc_size": 2, "rows": [
        {"from": 1, "to": 2, "rate": 1.0},
        {"from": 2, "to": 1, "rate": 1.0}
    ]},
    "epsilon": 0.1,
    "epsilons": [0.2, 0.05],
    "x0": [1.0],
    "horizon": 5.0,
    "scheme": {"dt": 0.002, "record_every": 5},
    "probes": {"paths": 2000, "occupation_reps": 200, "radii": [0.01, 0.001]}
}"#;

fn scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn exe(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_hybridlv"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn simulate_writes_trajectories_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.json", ONE_STATE);
    let out = dir.path().join("out");
    let code = exe(&["simulate", s.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(out.join("trajectory_0001.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,x_1,x_2,regime");
    assert_eq!(lines.count(), 101);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["scenario_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let good = scenario(dir.path(), "good.json", ONE_STATE);
    let good = good.to_str().unwrap();
    let a1 = scenario(dir.path(), "a1.json", &ONE_STATE.replace("[[1.0, 0.2]", "[[0.0, 0.2]"));
    let broken = scenario(dir.path(), "broken.json", "{\"name\": 1}");

    assert_eq!(exe(&["simulate", a1.to_str().unwrap(), "--out", out, "--seed", "1"]), 3);
    assert_eq!(exe(&["simulate", "/no/such/file.json", "--out", out, "--seed", "1"]), 2);
    assert_eq!(exe(&["simulate", broken.to_str().unwrap(), "--out", out, "--seed", "1"]), 2);
    assert_eq!(exe(&["verify", good, "--out", out, "--seed", "1", "--suite", "bogus"]), 2);
    assert_eq!(exe(&["simulate", good, "--out", out]), 2);
    assert_eq!(exe(&["simulate", good, "--out", out, "--seed", "1", "--dt", "-1"]), 2);
    assert_eq!(run(["hybridlv", "verify", good, "--out", out, "--seed", "1", "--suite", "nope"]), 2);
}

#[test]
fn conditions_suite_reports_extinction_margin() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "ext.json", EXTINCTION);
    let out = dir.path().join("out");
    cmd_verify(&s, Suite::Conditions, &out, 1, Overrides::default()).unwrap();
    let ine1: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("condition_ine1.json")).unwrap()).unwrap();
    assert_eq!(ine1["verdict"], "holds");
    assert_eq!(ine1["witness"]["margin"], 1.5);
    assert_eq!(ine1["constants"]["c"], 1.5);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("file,name,verdict,metric,value\n"));
    assert!(summary.contains("condition_ine1.json,ine1,holds,margin,1.5"));
    assert!(summary.contains("condition_permanence.json,permanence,fails"));
}

#[test]
fn convergence_suite_distances_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "sw.json", SWITCHING);
    let out = dir.path().join("out");
    cmd_verify(&s, Suite::Convergence, &out, 5, Overrides::default()).unwrap();
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("convergence.json")).unwrap()).unwrap();
    let ks: Vec<f64> = report["series"]["ks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(ks.len(), 2);
    assert!(ks[1] < ks[0], "{ks:?}");
    assert!(out.join("holder.json").exists());
    assert!(out.join("o_epsilon.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "sw.json", SWITCHING);
    let ov = Overrides {
        paths: Some(150),
        horizon: Some(2.0),
        dt: None,
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_verify(&s, Suite::All, &a, 17, ov).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    single.install(|| cmd_verify(&s, Suite::All, &b, 17, ov)).unwrap();
    assert_eq!(read_dir(&a), read_dir(&b));

    let (c, d) = (dir.path().join("c"), dir.path().join("d"));
    cmd_simulate(&s, &c, 4, Overrides { paths: Some(3), ..Overrides::default() }).unwrap();
    cmd_simulate(&s, &d, 4, Overrides { paths: Some(3), ..Overrides::default() }).unwrap();
    assert_eq!(read_dir(&c), read_dir(&d));
    assert_eq!(read_dir(&c).len(), 7);
}
