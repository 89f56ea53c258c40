use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn survconf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_survconf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn synth_and_fit(dir: &Path) {
    let o = survconf(dir, &["synth", "--n", "600", "--seed", "9", "--out", "d.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = survconf(
        dir,
        &[
            "fit", "--data", "d.csv", "--true-time-col", "true_time", "--fractions", "0.6,0.15,0.15,0.1", "--out",
            "m.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_true_time_column() {
    let dir = tempfile::tempdir().unwrap();
    let o = survconf(dir.path(), &["synth", "--n", "50", "--out", "d.csv"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,x2,x3,time,event,true_time"));
    assert_eq!(lines.count(), 50);
}

#[test]
fn synth_reads_toml_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.toml"),
        "n = 20\ndim = 2\nseed = 1\n[predictor]\nkind = \"linear\"\nbeta = [1.0, -1.0]\n[censoring]\nintercept = -1.0\ncoefficients = [0.5]\n",
    )
    .unwrap();
    let o = survconf(dir.path(), &["synth", "--config", "s.toml"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("x1,x2,time,event,true_time\n"));
    assert_eq!(out.lines().count(), 21);
}

#[test]
fn band_emits_one_row_per_query() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_fit(dir.path());
    fs::write(dir.path().join("q.csv"), "x3,x1,x2\n0.1,0.2,0.3\n-1,0,1\n2,2,2\n").unwrap();
    for method in ["naive", "wcci", "tsci", "wcci_unweighted", "tsci_unweighted"] {
        let o = survconf(
            dir.path(),
            &["band", "--model", "m.json", "--alpha", "0.05", "--method", method, "--in", "q.csv", "--out", "b.csv"],
        );
        assert_eq!(code(&o), 0, "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(dir.path().join("b.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "lower,upper,truncated,alpha,method");
        assert_eq!(lines.len(), 4);
        for line in &lines[1..] {
            let f: Vec<&str> = line.split(',').collect();
            let (lo, hi): (f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
            assert!(0.0 <= lo && lo <= hi, "{line}");
            assert_eq!(f[3], "0.05");
            assert_eq!(f[4], method);
        }
    }
}

#[test]
fn band_with_missing_feature_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_fit(dir.path());
    fs::write(dir.path().join("q.csv"), "x1,x2\n0,0\n").unwrap();
    let o = survconf(dir.path(), &["band", "--model", "m.json", "--alpha", "0.1", "--in", "q.csv"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("x3"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&survconf(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&survconf(dir.path(), &["synth", "--bogus"])), 1);
    assert_eq!(code(&survconf(dir.path(), &["band", "--model", "m.json"])), 1);
    assert_eq!(code(&survconf(dir.path(), &["band", "--model", "m", "--alpha", "0.1", "--in", "q", "--method", "nope"])), 1);
    assert_eq!(code(&survconf(dir.path(), &["--help"])), 0);
}

#[test]
fn unreadable_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&survconf(dir.path(), &["report", "--in", "missing.csv"])), 2);
    assert_eq!(code(&survconf(dir.path(), &["fit", "--data", "missing.csv", "--out", "m.json"])), 2);
    fs::write(dir.path().join("bad.toml"), "replications = 0\n").unwrap();
    assert_eq!(code(&survconf(dir.path(), &["experiment", "--config", "bad.toml", "--dry-run"])), 2);
}

const SMALL_CONFIG: &str = r#"
methods = ["naive", "wcci", "tsci", "wcci_unweighted", "tsci_unweighted"]
alphas = [0.1, 0.2]
replications = 3
master_seed = 5

[data]
source = "synth"
n = 400

[fractions]
train = 0.6
cal1 = 0.15
cal2 = 0.15
test = 0.1
"#;

#[test]
fn experiment_dry_run_computes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL_CONFIG).unwrap();
    let o = survconf(dir.path(), &["experiment", "--config", "c.toml", "--dry-run", "--results", "r.csv"]);
    assert_eq!(code(&o), 0);
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn experiment_is_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL_CONFIG).unwrap();
    let run = |name: &str| {
        let o = survconf(
            dir.path(),
            &["experiment", "--config", "c.toml", "--results", name, "--summary", "s.json"],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join(name)).unwrap()
    };
    let first = run("r1.csv");
    assert_eq!(first, run("r2.csv"));

    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with(
        "method,alpha,replication,coverage_total,coverage_censored,coverage_uncensored,mean_length,sd_length,truncated_fraction\n"
    ));
    // 5 methods x 2 alphas x 3 replications
    assert_eq!(text.lines().count(), 1 + 30);

    let summary = fs::read_to_string(dir.path().join("s.json")).unwrap();
    assert!(summary.contains("\"tsci_unweighted\""));

    let o = survconf(dir.path(), &["report", "--in", "r1.csv", "r2.csv"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 1 + 10);
    assert!(table.lines().any(|l| l.starts_with("wcci_unweighted") && l.contains(" 6 ")));
}

#[test]
fn excessive_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // censoring so heavy that calibration folds rarely hold an event
    let cfg = r#"
methods = ["tsci"]
alphas = [0.1]
replications = 5

[data]
source = "synth"
n = 60

[data.censoring]
intercept = 4.0
coefficients = [1.0]

[fractions]
train = 0.6
cal1 = 0.15
cal2 = 0.15
test = 0.1
"#;
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = survconf(dir.path(), &["experiment", "--config", "c.toml"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
