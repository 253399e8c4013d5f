use std::io::{BufRead, BufReader};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contrast-forge"));
    cmd.env("RUST_LOG", "warn").env_remove("CONTRAST_FORGE_SCORER_URL");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn negate_recombines_modifiers() {
    let out = run(&["negate", "--prompt", "white canvas shoes, red jacket"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!(v["text"].as_str().unwrap().contains("red canvas shoes"), "{v}");
    assert!(!v["static_phrases"].as_array().unwrap().is_empty());
}

#[test]
fn prompts_gen_and_sample() {
    let out = run(&["prompts", "gen", "--n", "5", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let texts: std::collections::HashSet<&str> =
        v.as_array().unwrap().iter().map(|r| r["text"].as_str().unwrap()).collect();
    assert_eq!(texts.len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let out = run(&["prompts", "gen", "--n", "40", "--seed", "2", "--out", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&["prompts", "sample", "--corpus", corpus.to_str().unwrap(), "--k", "7", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out).as_array().unwrap().len(), 7);
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--scenes", "100", "--tol", "1e-3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    assert_eq!(v["passed"], true);
    assert_eq!(v["scenes"], 100);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["negate", "--prompt", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--scenes", "many"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let out = run(&["render", "--ply", "/nonexistent/cloud.ply"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["generate", "--prompt", "a man", "--set", "lr_color=-1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["conformance", "--url", "http://127.0.0.1:9", "--timeout", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["passed"], false);
}

#[test]
fn generate_then_render_then_score() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = dir.path().join("desk.toml");
    std::fs::write(&config, "init_splats = 150\nresolution = 24\n").unwrap();
    let out = run(&[
        "generate",
        "--prompt",
        "a tall man, wearing a blue shirt, gray trousers, brown boots, and a watch on the left wrist",
        "--config",
        config.to_str().unwrap(),
        "--iterations",
        "12",
        "--set",
        "batch_size=2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["iterations"], 12);
    assert_eq!(v["initial_splats"], 150);
    let report: Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["batch_size"], 2);

    let frames = dir.path().join("frames");
    let out = run(&[
        "render",
        "--ply",
        out_dir.join("cloud.ply").to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
        "--resolution",
        "20",
        "--views",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["images"].as_array().unwrap().len(), 4);

    let png = frames.join("turntable_000.png");
    let out = run(&["score", "--image", png.to_str().unwrap(), "--text", "a red jacket"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = json(&out)["scores"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 3);
    let total: f64 = rows.iter().map(|r| r["weight"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn dry_run_echoes_full_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "generate",
        "--prompt",
        "a woman wearing a red dress",
        "--full-scale",
        "--dry-run",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["initial_splats"], 100_000);
    let ticks: Vec<u64> = v["events"].as_array().unwrap().iter().map(|e| e["iteration"].as_u64().unwrap()).collect();
    let expected: Vec<u64> = (300..=2100).step_by(300).chain((2400..=3300).step_by(300)).collect();
    assert_eq!(ticks, expected);
}

#[test]
fn mock_serve_conforms_and_scores_remotely() {
    let mut child = bin()
        .args(["mock-serve", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = serde_json::from_str::<Value>(&line).unwrap()["url"].as_str().unwrap().to_string();

    let out = run(&["conformance", "--url", &url]);
    let conformance = json(&out);

    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("probe.png");
    contrast_forge::conformance::probe_image(16, 12).write_png(&png).unwrap();
    let scored = bin()
        .env("CONTRAST_FORGE_SCORER_URL", &url)
        .args(["score", "--image", png.to_str().unwrap(), "--text", "a blue hat", "--model", "mock:brightness"])
        .output()
        .unwrap();
    let local = run(&["score", "--image", png.to_str().unwrap(), "--text", "a blue hat", "--model", "mock:brightness"]);
    child.kill().unwrap();
    child.wait().unwrap();

    assert_eq!(out.status.code(), Some(0), "{conformance}");
    assert_eq!(conformance["passed"], true);
    assert_eq!(scored.status.code(), Some(0));
    let remote = json(&scored);
    assert_eq!(remote["endpoint"], url.as_str());
    assert_eq!(remote["scores"][0]["score"], json(&local)["scores"][0]["score"]);
}

#[test]
fn body_export_writes_template() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("body.json");
    let obj = dir.path().join("body.obj");
    let out = run(&["body-export", "--out", path.to_str().unwrap(), "--obj", obj.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let template = contrast_forge::body_model::BodyTemplate::load(&path).unwrap();
    template.validate().unwrap();
    assert_eq!(json(&out)["vertices"], template.vertex_count());
    let text = std::fs::read_to_string(obj).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), template.vertex_count());
}
