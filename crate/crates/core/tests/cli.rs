mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::small_config;

fn chartless(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chartless"))
        .args(args)
        .env_remove("CHARTLESS_SEED")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let file = dir.join("small.toml");
    std::fs::write(&file, toml::to_string(&small_config()).unwrap()).unwrap();
    path(&file).to_string()
}

#[test]
fn staged_subcommands_reproduce_the_experiment_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let whole = tmp.path().join("whole");
    let staged = tmp.path().join("staged");
    let o = chartless(&["experiment", "--config", &cfg, "--out", path(&whole)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rms ds1="));

    let s = path(&staged);
    let run = |args: &[&str]| {
        let o = chartless(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["simulate", "--config", &cfg, "--out", s]);
    for m in ["a", "b"] {
        let trajectory = staged.join(format!("trajectory_{m}.csv"));
        run(&["fit", "--config", &cfg, "--machine", m, "--trajectory", path(&trajectory), "--out", s]);
        let model = staged.join(format!("model_{m}.json"));
        let suite = staged.join(format!("suite_{m}.toml"));
        run(&["locate", "--config", &cfg, "--machine", m, "--model", path(&model), "--suite", path(&suite), "--out", s]);
    }
    let (ma, mb) = (staged.join("map_a.csv"), staged.join("map_b.csv"));
    run(&["compare", "--config", &cfg, path(&ma), path(&mb), "--out", s]);

    let mut names: Vec<String> = std::fs::read_dir(&whole)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 12, "{names:?}");
    for name in &names {
        let a = std::fs::read(whole.join(name)).unwrap();
        let b = std::fs::read(staged.join(name)).unwrap_or_else(|_| panic!("staged run lacks {name}"));
        assert!(a == b, "{name} differs between the staged and whole runs");
    }
}

#[test]
fn repeated_runs_are_identical_and_the_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let dirs: Vec<_> = ["one", "two", "three"].iter().map(|d| tmp.path().join(d)).collect();
    assert!(chartless(&["simulate", "--config", &cfg, "--seed", "5", "--out", path(&dirs[0])]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_chartless"))
        .args(["--sequential", "simulate", "--config", &cfg, "--out", path(&dirs[1])])
        .env("CHARTLESS_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(chartless(&["simulate", "--config", &cfg, "--out", path(&dirs[2])]).status.success());
    let read = |d: &Path| std::fs::read(d.join("trajectory_a.csv")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
    assert_ne!(read(&dirs[0]), read(&dirs[2]));
}

#[test]
fn comparing_a_map_with_itself_reports_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let map = tmp.path().join("map.csv");
    std::fs::write(&map, "test_id,s1,s2,converged,residual\n0,1.5,-2,true,1e-9\n1,3,4,true,2e-9\n2,,,false,\n").unwrap();
    let o = chartless(&["compare", path(&map), path(&map)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("common 2/3"), "{out}");
    assert!(out.contains("rms ds1=0 ds2=0"), "{out}");
}

#[test]
fn malformed_config_fails_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seed = \"many\"\n").unwrap();
    let out = tmp.path().join("out");
    let o = chartless(&["experiment", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config:"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let o = chartless(&["compare", path(&missing), path(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("io:") && stderr(&o).contains("nope.csv"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(chartless(&["experiment", "--bogus"]).status.code(), Some(2));
    assert_eq!(chartless(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(chartless(&["fit", "--machine", "c", "--trajectory", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(chartless(&["--help"]).status.code(), Some(0));
}
