use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# small smoke setting
p = 60
n = 300
s = 6
nsr = 0.3
reps = 6
master_seed = 3
group_targets = large:3:2, median:1:2, small:0.1:2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phase-infer"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn table1_has_the_documented_header() {
    let dir = setup();
    let out = run(&["experiment", "table1", "--config", "small.cfg", "--seed", "7", "--out", "results"], dir.path());
    assert_ok(&out);
    let csv = read(dir.path(), "results/table1.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("group,method,bias,sd,mae,n_pool"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.ends_with(",12")));
}

#[test]
fn coverage_lists_every_group() {
    let dir = setup();
    assert_ok(&run(&["experiment", "table2", "--config", "small.cfg", "--out", "r"], dir.path()));
    let csv = read(dir.path(), "r/coverage.csv");
    let groups: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next(), Some("group,coverage_pct,n_pool,alpha"));
    assert_eq!(groups, ["all", "large", "median", "small"]);
}

#[test]
fn histograms_conserve_counts() {
    let dir = setup();
    assert_ok(&run(&["experiment", "histograms", "--config", "small.cfg", "--bins", "5", "--out", "r"], dir.path()));
    let csv = read(dir.path(), "r/histograms.csv");
    assert_eq!(csv.lines().next(), Some("group,method,bin_lo,bin_hi,count"));
    let total: usize = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    // 3 groups x 2 methods x 6 reps x 2 coordinates
    assert_eq!(total, 3 * 2 * 6 * 2);
}

#[test]
fn infer_is_reproducible() {
    let dir = setup();
    for out in ["a", "b"] {
        assert_ok(&run(&["infer", "--config", "small.cfg", "--seed", "1", "--out", out], dir.path()));
    }
    let a = read(dir.path(), "a/inference.csv");
    assert_eq!(a, read(dir.path(), "b/inference.csv"));
    assert_eq!(a.lines().count(), 61);
}

#[test]
fn experiments_do_not_depend_on_thread_count() {
    let dir = setup();
    for kind in ["table1", "table2", "histograms"] {
        for threads in ["1", "8"] {
            let out = format!("t{threads}");
            assert_ok(&run(
                &["experiment", kind, "--config", "small.cfg", "--threads", threads, "--out", &out],
                dir.path(),
            ));
        }
    }
    for file in ["table1.csv", "coverage.csv", "histograms.csv"] {
        assert_eq!(read(dir.path(), &format!("t1/{file}")), read(dir.path(), &format!("t8/{file}")), "{file}");
    }
}

#[test]
fn simulate_solve_infer_pipeline() {
    let dir = setup();
    assert_ok(&run(&["simulate", "--config", "small.cfg", "--out", "sim"], dir.path()));
    let inst: serde_json::Value = serde_json::from_str(&read(dir.path(), "sim/instance.json")).unwrap();
    assert_eq!(inst["n"], 600);
    assert_eq!(inst["X"].as_array().unwrap().len(), 600 * 60);
    assert_eq!(inst["beta"].as_array().unwrap().len(), 60);

    assert_ok(&run(&["solve", "--instance", "sim/instance.json", "--format", "json", "--out", "fit"], dir.path()));
    let est: serde_json::Value = serde_json::from_str(&read(dir.path(), "fit/estimate.json")).unwrap();
    assert!(est["iterations"].as_u64().unwrap() > 0);

    assert_ok(&run(&["infer", "--instance", "sim/instance.json", "--format", "json", "--out", "inf"], dir.path()));
    let rep: serde_json::Value = serde_json::from_str(&read(dir.path(), "inf/inference.json")).unwrap();
    assert_eq!(rep["coordinates"].as_array().unwrap().len(), 60);
    assert!(rep["simultaneous_halfwidth"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.cfg"), "p = 10\nn = 20\ns = 2\nnsr = 0.3\nbogus = 1\n").unwrap();
    let out = run(&["experiment", "table1", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = run(&["experiment", "table1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = setup();
    let (n, p) = (8, 3);
    let x: Vec<f64> = (0..n * p).map(|i| (i % 5) as f64 - 2.0).collect();
    let inst = serde_json::json!({ "p": p, "n": n, "sigma": 1.0, "X": x, "y": vec![0.0; n] });
    std::fs::write(dir.path().join("zero.json"), inst.to_string()).unwrap();
    let out = run(&["infer", "--instance", "zero.json"], dir.path());
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
