use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_csgmcmc"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> String {
    ok(bin()
        .arg("run")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap())
}

#[test]
fn generate_writes_series_states_and_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(bin()
        .args(["generate", "--dataset", "bd", "--t", "300", "--seed", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap());
    let paths: Vec<&str> = stdout.lines().collect();
    assert_eq!(paths.len(), 3);
    for p in &paths {
        assert!(Path::new(p).is_file(), "{p}");
    }
    let lines = |p: &str| fs::read_to_string(p).unwrap().lines().map(String::from).collect::<Vec<_>>();
    let y = lines(paths[0]);
    let x = lines(paths[1]);
    assert_eq!((y.len(), x.len()), (300, 300));
    assert!(y.iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    // states are one-based
    assert!(x.iter().all(|s| (1..=4).contains(&s.parse::<usize>().unwrap())));
}

#[test]
fn run_writes_every_output_and_its_config_reproduces_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let stdout = run(&config("bd_csg_desk.json"), &first, &["--t", "3000", "--n-iter", "40"]);
    assert!(stdout.contains("outputs in"));
    for f in ["trace.csv", "timing.csv", "metrics.csv", "intervals.csv", "config.json", "clusters.json", "summary.json"] {
        assert!(first.join(f).is_file(), "{f} missing");
    }
    let trace = fs::read_to_string(first.join("trace.csv")).unwrap();
    // header, the initial point, then one row per iteration
    assert_eq!(trace.lines().count(), 42);
    let intervals = fs::read_to_string(first.join("intervals.csv")).unwrap();
    assert_eq!(intervals.lines().count(), 11);

    let second = dir.path().join("second");
    run(&first.join("config.json"), &second, &[]);
    assert_eq!(trace, fs::read_to_string(second.join("trace.csv")).unwrap());
}

#[test]
fn eval_trace_recomputes_the_stored_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    run(&config("bern_sg_desk.json"), &run_dir, &["--t", "3000", "--n-iter", "30"]);
    let stdout = ok(bin().arg("eval-trace").arg("--run-dir").arg(&run_dir).output().unwrap());
    assert!(stdout.trim_end().ends_with("metrics_recomputed.csv"));
    let stored = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let recomputed = fs::read_to_string(run_dir.join("metrics_recomputed.csv")).unwrap();
    assert_eq!(stored, recomputed);

    let iterations: Vec<usize> = stored
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(iterations.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(iterations.first(), Some(&0));
    assert_eq!(iterations.last(), Some(&30));
}

#[test]
fn variance_sweep_reports_both_estimators_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    ok(bin()
        .args(["variance-sweep", "--config"])
        .arg(config("id_variance.json"))
        .args(["--t", "5000", "--s", "10,20", "--l", "5", "--reps", "20", "--out"])
        .arg(&out)
        .output()
        .unwrap());
    let text = fs::read_to_string(&out).unwrap();
    let means: Vec<&str> = text.lines().filter(|l| l.contains(",mean,")).collect();
    assert_eq!(means.len(), 4);
    for est in ["uniform", "stratified"] {
        assert_eq!(means.iter().filter(|l| l.starts_with(est)).count(), 2);
    }
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"name\": 3 }").unwrap();
    let cases: Vec<Vec<std::ffi::OsString>> = vec![
        vec!["generate".into(), "--dataset".into(), "nope".into(), "--out".into(), dir.path().into()],
        vec!["run".into(), "--config".into(), dir.path().join("missing.json").into()],
        vec!["run".into(), "--config".into(), bad.into()],
        vec!["eval-trace".into(), "--run-dir".into(), dir.path().join("absent").into()],
        vec!["run".into(), "--config".into(), config("bd_sg_desk.json").into(), "--n-iter".into(), "0".into()],
    ];
    for args in cases {
        let out = bin().args(&args).output().unwrap();
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = csgmcmc::experiment::ExperimentConfig::load(&path).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 17);
}
