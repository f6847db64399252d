use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ugsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ugsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const FAIR: &str = r#"
run_id = "fair"
belief_pairs = ["fair-fair"]
games_per_cell = 10

[[models]]
kind = "oracle"
model_id = "oracle-fair"
policy = "fair-fair"
"#;

#[test]
fn oracle_demo_runs_resumes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("demo");
    let run_s = run.to_str().unwrap();

    let out = ugsim(&["run", "--oracle-demo", "--out", run_s]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("450 transcripts"), "{}", stdout(&out));
    assert_eq!(fs::read_dir(run.join("cells")).unwrap().count(), 45);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["total_games"], 450);
    assert!(manifest["cells"].as_array().unwrap().iter().all(|c| c["status"] == "done"));

    let again = ugsim(&["run", "--oracle-demo", "--out", run_s]);
    assert_eq!(code(&again), 2, "existing run without --resume");

    let resumed = ugsim(&["run", "--oracle-demo", "--out", run_s, "--resume", "--parallelism", "2"]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    assert!(stdout(&resumed).contains("(0 games run, 45 cells resumed)"));

    let out = ugsim(&["report", run_s, "--variant", "range-fair"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let analysis = run.join("analysis");
    for f in [
        "metrics.csv",
        "deviations_pointwise-fair.csv",
        "deviations_range-fair.csv",
        "main_results.md",
        "report.md",
        "summary.json",
        "regression_P.csv",
    ] {
        assert!(analysis.join(f).exists(), "{f}");
    }
    let digest = manifest["config_digest"].as_str().unwrap();
    let report = fs::read_to_string(analysis.join("report.md")).unwrap();
    assert!(report.contains(digest));
    assert!(fs::read_to_string(analysis.join("metrics.csv")).unwrap().contains(digest));

    let out = ugsim(&[
        "regress",
        "--deviations",
        analysis.join("deviations_pointwise-fair.csv").to_str().unwrap(),
        "--dependent",
        "P",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("| *Proposer Belief* |"));
    assert!(stderr(&out).contains("Model has a single level"));
}

#[test]
fn fair_fair_table_row() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), FAIR);
    let run = tmp.path().join("out");
    let out = ugsim(&["run", "--config", &config, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = ugsim(&["analyze", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let md = fs::read_to_string(run.join("analysis/main_results.md")).unwrap();
    for reasoning in ["Vanilla", "CoT", "ToM Zero", "ToM First", "ToM Both"] {
        assert!(md.contains(&format!("| {reasoning} | 100 | 1 | 50.0, 50.0 | 0 |")), "{md}");
    }
    assert!(md.contains("up to 2 correction retries") && md.contains("0 of 50 games invalid"), "{md}");
    assert!(md.contains("Strategy menu sent every round"));
    assert!(!run.join("analysis/deviations_range-fair.csv").exists());
}

#[test]
fn analyze_is_byte_identical_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("demo");
    let run_s = run.to_str().unwrap();
    assert_eq!(code(&ugsim(&["run", "--oracle-demo", "--out", run_s])), 0);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&ugsim(&["analyze", run_s, "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&ugsim(&["analyze", run_s, "--out", b.to_str().unwrap()])), 0);
    for f in ["metrics.csv", "deviations_pointwise-fair.csv", "main_results.md", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_belief_is_config_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &FAIR.replace("fair-fair\"]", "fair-stingy\"]"));
    let out = ugsim(&["run", "--config", &config, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stingy"));
}

#[test]
fn missing_credential_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"
run_id = "remote"
[[models]]
kind = "remote"
model_id = "gpt-4o"
endpoint = "http://127.0.0.1:9/v1/chat/completions"
credential_ref = "UGSIM_CLI_TEST_NO_SUCH_TOKEN"
"#,
    );
    let out = ugsim(&["run", "--config", &config, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("UGSIM_CLI_TEST_NO_SUCH_TOKEN"));
}

#[test]
fn transport_failure_is_partial_run() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        &format!(
            r#"
run_id = "mixed"
belief_pairs = ["fair-fair"]
reasonings = ["vanilla"]
games_per_cell = 2

[[models]]
kind = "oracle"
model_id = "oracle-fair"
policy = "fair-fair"

[[models]]
kind = "remote"
model_id = "unreachable"
endpoint = "http://{addr}/v1/chat/completions"
credential_ref = "UGSIM_CLI_TEST_TOKEN"
retry = {{ max_attempts = 1, initial_delay_ms = 1 }}
"#
        ),
    );
    let run = tmp.path().join("o");
    let out = Command::new(env!("CARGO_BIN_EXE_ugsim"))
        .args(["run", "--config", &config, "--out", run.to_str().unwrap()])
        .env("UGSIM_CLI_TEST_TOKEN", "secret-value-123")
        .output()
        .unwrap();
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("1 cells done, 1 remaining"), "{}", stderr(&out));
    assert!(!stderr(&out).contains("secret-value-123"));
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"pending\"") && manifest.contains("\"done\""));
    assert!(!manifest.contains("secret-value-123"));
}

#[test]
fn analyze_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ugsim(&["analyze", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 5);

    let csv = tmp.path().join("dev.csv");
    fs::write(
        &csv,
        "model,reasoning,proposer_belief,responder_belief,P,R_A,R_R\nm,CoT,Fair,Fair,0,0,-1\nm,Vanilla,Fair,Fair,0,0,-1\n",
    )
    .unwrap();
    let out = ugsim(&["regress", "--deviations", csv.to_str().unwrap(), "--dependent", "R_R"]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("insufficient observations"));
}
