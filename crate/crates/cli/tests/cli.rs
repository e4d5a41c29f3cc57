use std::process::{Command, Output};

fn streamtest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamtest")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL_BATCH: [&str; 12] =
    ["test-uniformity", "--k", "64", "--eps", "0.5", "--n", "400000", "--mem-bits", "100", "--trials", "8", "--seed"];

#[test]
fn uniformity_csv_is_deterministic() {
    let mut args = SMALL_BATCH.to_vec();
    args.extend(["7", "--family", "paninski"]);
    let a = streamtest(&args);
    let b = streamtest(&args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("algo,k,eps,n,m,family,trials,accept_rate,accept_se,peak_bits,mean_runtime_ms,seed"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "batch");
    assert_eq!(row[5], "paninski:0.5");
    assert_eq!(row[10], "", "runtime is empty unless timing is requested");
    assert!(row[9].parse::<u64>().unwrap() <= 100);
}

#[test]
fn output_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let mut args = SMALL_BATCH.to_vec();
    args.push("3");
    let stdout = streamtest(&args).stdout;
    args.extend(["--out", path.to_str().unwrap()]);
    let out = streamtest(&args);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert_eq!(std::fs::read(&path).unwrap(), stdout);
}

#[test]
fn regime_violation_exits_2() {
    // m is above n * ceil(log2 k).
    let out = streamtest(&["test-uniformity", "--k", "64", "--eps", "0.5", "--n", "10", "--mem-bits", "1000"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ledger_breach_exits_3() {
    let out = streamtest(&[
        "test-uniformity",
        "--k",
        "1048576",
        "--eps",
        "0.5",
        "--n",
        "1048576",
        "--mem-bits",
        "40",
        "--trials",
        "2",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_calibration_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let mut args = SMALL_BATCH.to_vec();
    args.extend(["1", "--calibration", missing.to_str().unwrap()]);
    let out = streamtest(&args);
    assert_eq!(code(&out), 4);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&streamtest(&["test-uniformity", "--k", "zero"])), 1);
    assert_eq!(code(&streamtest(&["test-uniformity", "--eps", "0.5", "--mem-bits", "100"])), 1);
    assert_eq!(code(&streamtest(&["test-uniformity", "--algo", "closeness", "--k", "8"])), 1);
}

#[test]
fn config_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("spec.json");
    std::fs::write(
        &config,
        r#"{"algo":"batch","params":{"k":64,"eps":0.5,"n":400000,"m":100},"family":"uniform","trials":4,"master_seed":3}"#,
    )
    .unwrap();
    let from_config = streamtest(&["test-uniformity", "--config", config.to_str().unwrap()]);
    let mut args = SMALL_BATCH.to_vec();
    args.push("3");
    args[10] = "4";
    let from_flags = streamtest(&args);
    assert_eq!(code(&from_config), 0, "{}", String::from_utf8_lossy(&from_config.stderr));
    assert_eq!(from_config.stdout, from_flags.stdout);
}

#[test]
fn closeness_runs_with_planned_length() {
    let out = streamtest(&[
        "test-closeness",
        "--k",
        "200",
        "--eps",
        "0.5",
        "--mem-bits",
        "300",
        "--trials",
        "2",
        "--reference",
        "uniform",
        "--family",
        "uniform",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("closeness,200,0.5,"));
}

#[test]
fn sweep_reports_frontier() {
    let out = streamtest(&[
        "sweep",
        "--algo",
        "batch",
        "--k",
        "64",
        "--eps",
        "0.5",
        "--mem-bits",
        "100,200",
        "--n",
        "50000,400000",
        "--trials",
        "6",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 5);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("m=100:") && err.contains("monotone:"));
}

#[test]
fn oracle_subcommands() {
    let out = streamtest(&["oracle", "moments", "--k", "2", "--s", "1"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("k=2 s=1 mean=0.5 "));

    let out = streamtest(&["oracle", "variance-grid", "--max-k", "64"]);
    assert_eq!(code(&out), 0);

    let out =
        streamtest(&["oracle", "contraction", "--k", "6", "--k-prime", "2", "--family", "pointmass", "--exhaustive"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("probability=1 partitions=10 exhaustive=true"));
}
