use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splinetrial"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn splinetrial")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn simulate_csv(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let path = dir.join("trial.csv");
    let mut args = vec![
        "simulate",
        "--subjects",
        "80",
        "--seed",
        "5",
        "--out",
        path.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn unknown_cov_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_csv(dir.path(), &[]);
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--cov",
        "bogus",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_replicates_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "power",
        "--replicates",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_writes_json_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_csv(dir.path(), &[]);
    let out_dir = dir.path().join("fit");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--mean",
        "ncs:2",
        "--cov",
        "ri",
        "--covariates",
        "apoe4,age",
        "--version-effect",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // resolved config echoed for reproducibility
    assert!(stdout(&out).contains("# splinetrial fit config:"));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("fit.json")).unwrap()).unwrap();
    let names = json["coefficient_names"].as_array().unwrap();
    // intercept + 2 spline + 2 interactions + 2 covariates + 2 versions
    assert_eq!(names.len(), 9);

    let mean_curve = std::fs::read_to_string(out_dir.join("mean_curve.csv")).unwrap();
    assert!(mean_curve.starts_with("month,arm0,arm1"));
    assert!(mean_curve.lines().count() > 10);
    let con = std::fs::read_to_string(out_dir.join("contrast_curve.csv")).unwrap();
    assert!(con.starts_with("model,time,estimate"));
}

#[test]
fn contrast_at_zero_is_null() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_csv(dir.path(), &[]);
    let out = run(&[
        "contrast",
        "--data",
        data.to_str().unwrap(),
        "--mean",
        "ncs:2",
        "--cov",
        "ri",
        "--at",
        "0,54",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let row0 = text
        .lines()
        .find(|l| l.starts_with("ncs:2,0,"))
        .expect("contrast row at t=0");
    let estimate: f64 = row0.split(',').nth(2).unwrap().parse().unwrap();
    assert!(estimate.abs() <= 1e-10, "contrast at 0 was {estimate}");
}

#[test]
fn aic_table_ranks_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_csv(dir.path(), &[]);
    let out = run(&[
        "aic-table",
        "--data",
        data.to_str().unwrap(),
        "--models",
        "linear:ri,ncs:2:ri",
        "--covariates",
        "apoe4,age",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("linear:ri") && text.contains("ncs:2:ri"));
    // the best model's dAIC is zero
    let best_line = text.lines().nth(2).unwrap();
    let daic: f64 = best_line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert_eq!(daic, 0.0);
}

#[test]
fn basis_emits_grid() {
    let out = run(&[
        "basis",
        "--knots",
        "6,24,48",
        "--boundary",
        "0,60",
        "--grid",
        "0,60,6",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let header = text.lines().find(|l| l.starts_with("t,")).unwrap();
    assert_eq!(header, "t,ns1,ns2,ns3,ns4");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 12);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate_csv(dir.path(), &[]);
    let b = dir.path().join("again.csv");
    let out = run(&[
        "simulate",
        "--subjects",
        "80",
        "--seed",
        "5",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn power_writes_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("study");
    let args = [
        "power",
        "--scenario",
        "pad",
        "--arm",
        "type1",
        "--replicates",
        "2",
        "--subjects",
        "100",
        "--workers",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = out_dir.join("pad-type1-records.csv");
    let n_rows = std::fs::read_to_string(&records).unwrap().lines().count();
    assert_eq!(n_rows, 11); // header + 2 replicates x 5 models
    assert!(out_dir.join("pad-type1-summary.csv").exists());
    assert!(out_dir.join("pad-type1-summary.txt").exists());

    // identical invocation into a fresh directory gives identical records
    let out_dir2 = dir.path().join("study2");
    let mut args2: Vec<&str> = args.to_vec();
    let idx = args2.len() - 1;
    args2[idx] = out_dir2.to_str().unwrap();
    let out2 = run(&args2);
    assert!(out2.status.success());
    assert_eq!(
        std::fs::read(&records).unwrap(),
        std::fs::read(out_dir2.join("pad-type1-records.csv")).unwrap()
    );
}
