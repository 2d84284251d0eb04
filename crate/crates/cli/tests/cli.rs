use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use drawgen_cli::bench::{strip_timing, BenchReport};
use drawgen_cli::run_with;
use drawgen_core::parse;
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixture(name: &str) -> String {
    root().join("tests/fixtures").join(name).display().to_string()
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_with(std::iter::once("drawgen").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn x_of(d: &drawgen_core::Diagram, label: &str) -> f64 {
    d.vertices().find(|v| v.label == label).unwrap().geometry.as_ref().unwrap().x
}

#[test]
fn generate_with_mock_lays_out_left_to_right() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flow.drawio.xml");
    let started = Instant::now();
    let r = run(&[
        "generate",
        "--prompt",
        "Draw a flowchart with A -> B -> C.",
        "--provider",
        "mock",
        "--script",
        &fixture("flowchart.script.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(started.elapsed() < Duration::from_secs(1));
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.contains("correction_iterations: 0"));
    assert!(r.stderr.contains("elapsed:"));
    assert!(r.stderr.contains("tokens:"));
    let d = parse(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(d.vertices().count(), 3);
    assert_eq!(d.edges().count(), 2);
    assert!(x_of(&d, "A") < x_of(&d, "B") && x_of(&d, "B") < x_of(&d, "C"));
    assert!(d.integrity_check().is_empty());
}

#[test]
fn generate_vertical_orientation_stacks_layers() {
    let r = run(&[
        "generate",
        "--prompt",
        "A -> B -> C",
        "--provider",
        "mock",
        "--script",
        &fixture("flowchart.script.toml"),
        "--orientation",
        "vertical",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let d = parse(&r.stdout).unwrap();
    let y = |l: &str| d.vertices().find(|v| v.label == l).unwrap().geometry.as_ref().unwrap().y;
    assert!(y("A") < y("B") && y("B") < y("C"));
}

#[test]
fn generate_json_reports_usage() {
    let r = run(&[
        "--json",
        "generate",
        "--prompt",
        "A -> B -> C",
        "--provider",
        "mock",
        "--script",
        &fixture("flowchart.script.toml"),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["first_pass"], "clean_first_pass");
    assert_eq!(v["correction_iterations"], 0);
    assert!(v["usage"]["input_tokens"].as_u64().unwrap() > 0);
    assert!(v["usage"]["output_tokens"].as_u64().unwrap() > 0);
    assert!(parse(v["xml"].as_str().unwrap()).is_ok());
}

#[test]
fn generate_with_image_describes_first() {
    let r = run(&[
        "--json",
        "generate",
        "--prompt",
        "Replicate this sketch.",
        "--image",
        &fixture("sketch.png"),
        "--provider",
        "mock",
        "--script",
        &fixture("image.script.toml"),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert!(v["description"].as_str().unwrap().contains("A -> B"));
    let d = parse(v["xml"].as_str().unwrap()).unwrap();
    assert_eq!(d.vertices().count(), 3);
}

#[test]
fn auth_failure_exits_3() {
    let r = run(&["generate", "--prompt", "x", "--provider", "mock", "--script", &fixture("error.script.toml")]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("authentication"), "{}", r.stderr);
}

#[test]
fn unreachable_endpoint_exits_4() {
    let out = Command::new(env!("CARGO_BIN_EXE_drawgen"))
        .args([
            "generate",
            "--prompt",
            "x",
            "--provider",
            "http",
            "--endpoint",
            "http://127.0.0.1:1/v1/chat",
            "--api-key-env",
            "DRAWGEN_CLI_TEST_KEY",
        ])
        .env("DRAWGEN_CLI_TEST_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_api_key_exits_3() {
    let out = Command::new(env!("CARGO_BIN_EXE_drawgen"))
        .args([
            "generate",
            "--prompt",
            "x",
            "--provider",
            "http",
            "--endpoint",
            "http://127.0.0.1:1/v1/chat",
            "--api-key-env",
            "DRAWGEN_CLI_TEST_UNSET_KEY",
        ])
        .env_remove("DRAWGEN_CLI_TEST_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prose_only_response_exits_5() {
    let r = run(&["generate", "--prompt", "x", "--provider", "mock", "--script", &fixture("prose.script.toml")]);
    assert_eq!(r.code, 5);
    assert!(r.stderr.contains("no_xml_found"), "{}", r.stderr);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["generate", "--prompt", "x", "--provider", "mock"]).code, 2);
    assert_eq!(run(&["frobnicate"]).code, 2);
    let r = run(&[
        "generate",
        "--prompt",
        "x",
        "--provider",
        "mock",
        "--script",
        &fixture("flowchart.script.toml"),
        "--node-gap",
        "-5",
    ]);
    assert_eq!(r.code, 2);
    assert_eq!(run(&["--help"]).code, 0);
}

#[test]
fn validate_clean_file() {
    let r = run(&["validate", &fixture("diff/a.drawio.xml")]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert!(r.stdout.contains("clean_first_pass"));
}

#[test]
fn validate_corrupt_file_without_fix_is_residual() {
    let r = run(&["--json", "validate", &fixture("corrupt.drawio.xml")]);
    assert_eq!(r.code, 1);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["well_formed"], false);
}

#[test]
fn validate_fix_writes_loadable_xml() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fixed.drawio.xml");
    let r = run(&["validate", &fixture("corrupt.drawio.xml"), "--fix", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert!(r.stdout.contains("repaired_locally"));
    let fixed = std::fs::read_to_string(&out).unwrap();
    assert!(drawgen_core::check_wellformed(&fixed).is_empty());
    let original = std::fs::read_to_string(fixture("corrupt.drawio.xml")).unwrap();
    assert_eq!(
        parse(&fixed).unwrap().vertices().count(),
        drawgen_core::validator::count_vertex_tags(&original)
    );

    // Without --out the XML goes to stdout and the report to stderr.
    let r = run(&["validate", &fixture("corrupt.drawio.xml"), "--fix"]);
    assert_eq!(r.code, 0);
    assert_eq!(r.stdout, fixed);
    assert!(r.stderr.contains("(repaired)"));
}

#[test]
fn validate_missing_file_exits_2() {
    let r = run(&["validate", "/nonexistent/x.drawio.xml"]);
    assert_eq!(r.code, 2);
}

#[test]
fn diff_identical_is_empty() {
    let a = fixture("diff/a.drawio.xml");
    let r = run(&["diff", &a, &a]);
    assert_eq!(r.code, 0);
    assert_eq!(r.stdout.trim(), "no changes");
}

#[test]
fn diff_reports_added_vertex() {
    let r = run(&["diff", &fixture("diff/a.drawio.xml"), &fixture("diff/a_plus_vertex.drawio.xml")]);
    assert_eq!(r.code, 1);
    assert!(r.stdout.contains("added:"));
    assert!(r.stdout.contains("+ vertex 5 \"Cache\""));
    assert!(r.stdout.trim_end().ends_with("+1 vertex (Cache)"), "{}", r.stdout);

    let r = run(&["--json", "diff", &fixture("diff/a.drawio.xml"), &fixture("diff/a_plus_vertex.drawio.xml")]);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["diff"]["added"], serde_json::json!(["5"]));
    assert_eq!(v["empty"], false);
}

#[test]
fn diff_ignores_cell_order() {
    let r = run(&["diff", &fixture("diff/a.drawio.xml"), &fixture("diff/a_permuted.drawio.xml")]);
    assert_eq!(r.code, 0, "{}", r.stdout);
}

fn bench(tasks: &Path, script: &Path, report: &Path) -> BenchReport {
    let r = run(&[
        "bench",
        "run",
        "--tasks",
        tasks.to_str().unwrap(),
        "--provider",
        "mock",
        "--script",
        script.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("validity rate"));
    serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap()
}

#[test]
fn bundled_bench_matches_hand_computed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let report = bench(&root().join("bench/tasks"), &root().join("bench/mock/script.toml"), &dir.path().join("r.json"));
    // The infra-2 response leaves out "Cache" and its edge: 4 of 5
    // components and 3 of 4 edges. flow-2 needs one re-prompt.
    let expected_accuracy = (9.0 + 7.0 / 9.0) / 10.0;
    assert!((report.aggregate.mean_accuracy - expected_accuracy).abs() < 1e-9);
    assert!((report.aggregate.validity_rate - 0.9).abs() < 1e-9);
    assert!((report.aggregate.final_validity_rate - 1.0).abs() < 1e-9);
    assert_eq!(report.tasks.len(), 10);
    let infra2 = report.tasks.iter().find(|t| t.id == "infra-2").unwrap();
    assert!((infra2.semantic_accuracy - 7.0 / 9.0).abs() < 1e-9);
    assert_eq!(infra2.missing_components, vec!["Cache".to_string()]);
    let flow2 = report.tasks.iter().find(|t| t.id == "flow-2").unwrap();
    assert_eq!(flow2.correction_iterations, 1);
    assert!(!flow2.structurally_valid && flow2.final_valid);

    let per_category = |c: &str| report.tasks.iter().filter(|t| serde_json::to_value(t.category).unwrap() == c).count();
    assert_eq!(per_category("infrastructure"), 4);
    assert_eq!(per_category("flowchart"), 3);
    assert_eq!(per_category("org_chart"), 2);
    assert_eq!(per_category("wireframe"), 1);
}

#[test]
fn perfect_responses_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let report = bench(
        &root().join("bench/tasks"),
        &root().join("tests/fixtures/perfect/script.toml"),
        &dir.path().join("r.json"),
    );
    assert_eq!(report.aggregate.mean_accuracy, 1.0);
    assert_eq!(report.aggregate.validity_rate, 1.0);
    assert!(report.tasks.iter().all(|t| t.missing_components.is_empty() && t.missing_edges.is_empty()));
}

#[test]
fn bench_report_matches_golden_and_is_reproducible() {
    let golden: Value =
        serde_json::from_str(&std::fs::read_to_string(root().join("tests/golden/bench_report.json")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for i in 0..2 {
        let report = bench(
            &root().join("bench/tasks"),
            &root().join("bench/mock/script.toml"),
            &dir.path().join(format!("r{i}.json")),
        );
        assert!(report.timing_comparable);
        assert_eq!(strip_timing(&report), golden, "run {i}");
    }
}
