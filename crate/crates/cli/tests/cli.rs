use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lockin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lockin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut full: Vec<&str> = args.to_vec();
    let out = dir.to_str().unwrap();
    full.extend(["--out", out]);
    lockin(&full)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let args = [
        "simulate",
        "--benchmark",
        "P1",
        "--steps",
        "500",
        "--seed",
        "7",
    ];
    let oa = run_in(a.path(), &args);
    assert!(oa.status.success(), "{}", stderr(&oa));
    let mut with_threads = args.to_vec();
    with_threads.extend(["--threads", "3"]);
    let ob = run_in(b.path(), &with_threads);
    assert!(ob.status.success(), "{}", stderr(&ob));
    let ta = fs::read(a.path().join("trajectory.csv")).unwrap();
    let tb = fs::read(b.path().join("trajectory.csv")).unwrap();
    assert_eq!(ta, tb);
    let (ma, mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(ma["seed"], 7);
    assert!(ma["error"].is_null());
}

#[test]
fn different_seeds_give_different_trajectories() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert!(
        run_in(a.path(), &["simulate", "--steps", "200", "--seed", "1"])
            .status
            .success()
    );
    assert!(
        run_in(b.path(), &["simulate", "--steps", "200", "--seed", "2"])
            .status
            .success()
    );
    assert_ne!(
        fs::read(a.path().join("trajectory.csv")).unwrap(),
        fs::read(b.path().join("trajectory.csv")).unwrap()
    );
}

#[test]
fn lockin_estimate_carries_the_bound() {
    let dir = TempDir::new().unwrap();
    let o = run_in(
        dir.path(),
        &[
            "lockin",
            "--benchmark",
            "P2",
            "--n0",
            "100,1000",
            "--reps",
            "40",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("estimate.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    for col in ["n0", "p_hat", "lo", "hi", "bound"] {
        assert!(headers.iter().any(|h| h == col), "missing {col}");
    }
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    let idx = |name: &str| headers.iter().position(|h| h == name).unwrap();
    for row in &rows {
        let hi: f64 = row[idx("hi")].parse().unwrap();
        let bound: f64 = row[idx("bound")].parse().unwrap();
        assert!(hi >= bound);
    }
    assert!(dir.path().join("bound.json").exists());
}

#[test]
fn complexity_sweep_writes_table_and_plot() {
    let dir = TempDir::new().unwrap();
    let o = run_in(
        dir.path(),
        &[
            "complexity",
            "--M",
            "100",
            "--eps",
            "0.01",
            "--gamma",
            "0.1",
            "--sweep",
            "0.55:0.99:0.01",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("argmin k"));
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["k", "n0", "N_prime0"]);
    assert_eq!(rdr.records().count(), 45);
    let svg = fs::read_to_string(dir.path().join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("width=\"800\"") && svg.contains("height=\"600\""));
    assert!(!svg.contains("http://fonts") && !svg.contains("@import"));
    let files: Vec<String> = manifest(dir.path())["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["file"].as_str().unwrap().to_string())
        .collect();
    assert!(files.contains(&"sweep.csv".to_string()));
    assert!(files.contains(&"sweep.svg".to_string()));
}

#[test]
fn overflowing_thresholds_exit_numeric_but_keep_outputs() {
    let dir = TempDir::new().unwrap();
    let o = run_in(
        dir.path(),
        &[
            "complexity",
            "--M",
            "100",
            "--eps",
            "0.01,0.001",
            "--sweep",
            "0.6:0.9:0.1",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(dir.path().join("complexity.json").exists());
    assert!(dir.path().join("sweep_M100_eps0.001.csv").exists());
    assert!(manifest(dir.path())["error"].is_string());
}

#[test]
fn unknown_flag_is_a_validation_error() {
    let o = lockin(&["simulate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let o = lockin(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("complexity"));
}

#[test]
fn config_errors_report_line_and_column() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "[run]\nseed = 3\n\n[lockin]\nreps = many\n").unwrap();
    let o = run_in(
        &dir.path().join("out"),
        &["lockin", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 5, column 8"), "{}", stderr(&o));

    fs::write(&cfg, "[run]\n  colour = red\n").unwrap();
    let o = run_in(
        &dir.path().join("out"),
        &["simulate", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2, column 3"), "{}", stderr(&o));
}

#[test]
fn config_file_and_flags_merge() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "[run]\nseed = 3\n\n[simulate]\nsteps = 50\n").unwrap();
    let out = dir.path().join("out");
    let o = run_in(
        &out,
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["seed"], 11);
    let echo = m["config"].as_str().unwrap();
    assert!(echo.contains("steps = 50"));
    assert!(echo.contains("seed = 11"));
}

#[test]
fn bounds_overflow_exits_numeric() {
    let dir = TempDir::new().unwrap();
    let o = run_in(dir.path(), &["bounds", "--benchmark", "P2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(dir.path().join("bounds.json").exists());
}

#[test]
fn bounds_on_the_contraction_benchmark_succeeds() {
    let dir = TempDir::new().unwrap();
    let o = run_in(dir.path(), &["bounds"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bounds.json")).unwrap()).unwrap();
    assert_eq!(v["benchmark"], "P1");
}

#[test]
fn json_format_replaces_csv_tables() {
    let dir = TempDir::new().unwrap();
    let o = run_in(
        dir.path(),
        &["simulate", "--steps", "50", "--format", "json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("trajectory.json").exists());
    assert!(!dir.path().join("trajectory.csv").exists());
    let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let keys: Vec<usize> = [
        "\"tool\"",
        "\"version\"",
        "\"command\"",
        "\"seed\"",
        "\"outputs\"",
    ]
    .iter()
    .map(|k| text.find(k).unwrap())
    .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]), "manifest key order");
}

#[test]
fn poisson_check_passes_on_benchmarks() {
    let dir = TempDir::new().unwrap();
    let o = run_in(
        dir.path(),
        &["poisson-check", "--benchmark", "P2", "--steps", "2000"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("decomposition.csv").exists());
}

#[test]
fn problems_list_names_every_benchmark() {
    let dir = TempDir::new().unwrap();
    let o = run_in(dir.path(), &["problems", "list"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for name in ["P1", "P2", "P3", "P4"] {
        assert!(text.contains(name), "{name} missing");
    }
    assert!(dir.path().join("problems.csv").exists());
}

#[test]
fn unknown_benchmark_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let o = run_in(dir.path(), &["simulate", "--benchmark", "P9"]);
    assert_eq!(o.status.code(), Some(1));
}
