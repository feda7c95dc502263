use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tvmeta(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvmeta"))
        .args(args)
        .env("TVMETA_OUTPUT_DIR", dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn simulate_writes_to_the_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tvmeta(
        dir.path(),
        &["simulate", "--dgp=d2", "--n", "7", "--seed", "3"],
    ));
    let text = fs::read_to_string(dir.path().join("panel.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("traj_id,t,x_1,a,y"));
    assert_eq!(lines.count(), 7 * 5);
}

#[test]
fn fit_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let panel = d.join("train.csv");
    let p = panel.to_str().unwrap();
    ok(&tvmeta(
        d,
        &["simulate", "--dgp=d2", "--n", "300", "--out", p],
    ));
    ok(&tvmeta(
        d,
        &["fit", "--dgp=d2", "--panel", p, "--tau", "1", "--oracle"],
    ));
    let nuis = d.join("nuisances.json");
    assert!(nuis.exists());
    ok(&tvmeta(
        d,
        &[
            "train",
            "--dgp=d2",
            "--panel",
            p,
            "--nuisances",
            nuis.to_str().unwrap(),
            "--learner",
            "dr",
        ],
    ));
    let out = ok(&tvmeta(
        d,
        &[
            "evaluate",
            "--dgp=d2",
            "--model",
            d.join("model.json").to_str().unwrap(),
            "--n",
            "50",
        ],
    ));
    assert!(out.contains("learner dr tau 1"), "{out}");
    let rmse: f64 = out.split_whitespace().last().unwrap().parse().unwrap();
    assert!(rmse.is_finite() && rmse >= 0.0);
}

#[test]
fn train_fits_nuisances_when_none_are_given() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = d.join("train.csv");
    ok(&tvmeta(
        d,
        &["simulate", "--n", "200", "--out", p.to_str().unwrap()],
    ));
    let out = ok(&tvmeta(
        d,
        &[
            "train",
            "--panel",
            p.to_str().unwrap(),
            "--learner",
            "pi-ra",
            "--tau",
            "0",
            "--split=false",
        ],
    ));
    assert!(out.contains("pi-ra"), "{out}");
}

#[test]
fn run_is_byte_reproducible_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, "dgp = \"d2\"\nseeds = [0, 1]\ntaus = [0]\n").unwrap();
    let args = [
        "run",
        "--config",
        config.to_str().unwrap(),
        "--n_train=200",
        "--n_test=20",
        "--learners=dr,ra",
        "--nuisance.clip_eps=0.05",
    ];
    let table = ok(&tvmeta(dir.path(), &args));
    assert!(table.contains("ra"), "{table}");
    let first = fs::read(dir.path().join("results.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(text.starts_with("learner,tau,seed,rmse,walltime_s,clip_fraction\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
    ok(&tvmeta(dir.path(), &args));
    assert_eq!(fs::read(dir.path().join("results.csv")).unwrap(), first);
}

#[test]
fn verify_reports_and_rejects_unknown_suites() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&tvmeta(dir.path(), &["verify", "ipw-unbiased", "--fast"]));
    assert!(out.contains("ipw-unbiased PASS"), "{out}");
    let bad = tvmeta(dir.path(), &["verify", "no-such-suite"]);
    assert!(!bad.status.success());
}

#[test]
fn bad_overrides_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = tvmeta(dir.path(), &["run", "--no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
