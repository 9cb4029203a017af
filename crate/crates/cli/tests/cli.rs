use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use parrot_core::gateway::mock::{MockReply, MockRule, MockScript};
use parrot_core::nft::Checkpoint;
use parrot_core::rationale::*;

const BIN: &str = env!("CARGO_BIN_EXE_parrot");

fn parrot(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("NO_COLOR", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct MockProc(Child);

impl Drop for MockProc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn mock_serve(dir: &Path, script: &MockScript) -> (MockProc, String) {
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::to_string(script).unwrap()).unwrap();
    let mut child = Command::new(BIN)
        .args(["mock-serve", "--script", s(&path), "--log", "warn"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    (MockProc(child), v["base_url"].as_str().unwrap().to_string())
}

fn write_config(dir: &Path, base_url: &str, extra: &str) -> PathBuf {
    let path = dir.join("parrot.toml");
    let mut text = String::new();
    for name in ["teacher", "judge", "generator"] {
        text.push_str(&format!(
            "[endpoint.{name}]\nbase_url = \"{base_url}\"\nmodel = \"{name}\"\nmax_retries = 0\n\n"
        ));
    }
    text.push_str(extra);
    std::fs::write(&path, text).unwrap();
    path
}

fn pairwise_text() -> String {
    emit_pairwise(&PairwiseRationale {
        understanding: "A single requested change.".into(),
        judgements: Aspect::ALL.map(|aspect| AspectJudgement {
            aspect,
            justification: "The candidates differ here.".into(),
            score_a: Score::numeric(3.5).unwrap(),
            score_b: Score::numeric(2.5).unwrap(),
            winner: Winner::A,
        }),
        summary: "One candidate is better.".into(),
    })
}

fn pointwise_text(score: f64) -> String {
    emit_pointwise(&PointwiseAssessment {
        understanding: "One image.".into(),
        per_aspect: Aspect::ALL.map(|aspect| AspectAssessment {
            aspect,
            score: if aspect == Aspect::TextRendering {
                Score::NotApplicable
            } else {
                Score::numeric(score).unwrap()
            },
            justification: "Matches the comment.".into(),
        }),
        summary: "Fine.".into(),
        refinement: None,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Fate {
    Agree,
    Disagree,
    Tie,
    Malformed,
}

/// 40 agree, 5 disagree, 3 answer Tie, 2 are malformed.
fn fifty_pairs() -> (String, MockScript) {
    let mut lines = String::new();
    let mut rules = Vec::new();
    for i in 0..50 {
        let fate = match i {
            7 | 31 => Fate::Malformed,
            10 | 20 | 30 => Fate::Tie,
            _ if i >= 45 => Fate::Disagree,
            _ => Fate::Agree,
        };
        let label = if i % 2 == 0 { "A" } else { "B" };
        let instruction = format!("Apply edit number {i:02}.");
        let source = if i % 4 == 0 { "" } else { r#","source":"data:image/png;base64,AAAA""# };
        lines.push_str(&format!(
            r#"{{"id":"p{i:02}","instruction":"{instruction}"{source},"image_a":"data:image/png;base64,AAAB","image_b":"data:image/png;base64,AAAC","label":"{label}"}}"#
        ));
        lines.push('\n');
        let phase1 = if fate == Fate::Malformed { "no".to_string() } else { pairwise_text() };
        rules.push(MockRule::text(&["Hint: human preference is:", &instruction], phase1));
        let other = if label == "A" { "B" } else { "A" };
        let answer = match fate {
            Fate::Agree => format!("{label} is preferred"),
            Fate::Disagree => format!("{other} is preferred"),
            Fate::Tie | Fate::Malformed => "Tie".into(),
        };
        rules.push(MockRule::text(&["which image is preferred overall", &instruction], answer));
    }
    rules.push(MockRule::text(&["as \"Edited Image A\""], pointwise_text(3.5)));
    rules.push(MockRule::text(&["as \"Edited Image B\""], pointwise_text(2.5)));
    (lines, MockScript::strict(rules))
}

#[test]
fn elbo_check_prints_residuals() {
    let o = parrot(&["elbo-check", "--models", "200", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["models"], 200);
    assert!(v["max_bound_violation"].as_f64().unwrap() <= 1e-9);
    assert!(v["max_tightness_residual"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(
        &input,
        r#"{"id":"x","instruction":"i","image_a":"a.png","image_b":"b.png","label":"A"}"#,
    )
    .unwrap();
    let out = dir.path().join("out.jsonl");
    let o = parrot(&["rationalize", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("endpoint.teacher"), "{}", stderr(&o));
    assert!(!out.exists());

    assert_eq!(code(&parrot(&["no-such-command"])), 1);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[gcr]\nthreshold = 9.0\n").unwrap();
    let o = parrot(&["--config", s(&cfg), "elbo-check"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gcr.threshold"));
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&parrot(&["score", "--input", s(&missing), "--out", s(&out)])), 1);
}

#[test]
fn chained_mock_pipeline_produces_expected_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (inputs, script) = fifty_pairs();
    let input = d.join("pairs.jsonl");
    std::fs::write(&input, inputs).unwrap();

    // Dry runs plan without a server to talk to.
    let cfg = write_config(d, "http://127.0.0.1:9/v1", "");
    let rat = d.join("rationalized.jsonl");
    let o = parrot(&["--config", s(&cfg), "--dry-run", "rationalize", "--input", s(&input), "--out", s(&rat)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((plan["calls"].as_u64(), plan["skipped"].as_u64()), (Some(50), Some(0)));
    assert!(!rat.exists());

    let (_server, url) = mock_serve(d, &script);
    let cfg = write_config(d, &url, "[pipeline]\nsamples_per_pair = 1\n");
    let c = s(&cfg);
    let filtered = d.join("filtered.jsonl");
    let stats = d.join("stats.json");
    let proj = d.join("projections.jsonl");
    let sft = d.join("sft");
    let steps: [Vec<&str>; 4] = [
        vec!["rationalize", "--input", s(&input), "--out", s(&rat)],
        vec!["filter", "--input", s(&rat), "--out", s(&filtered), "--stats-out", s(&stats)],
        vec!["project", "--input", s(&filtered), "--out", s(&proj)],
        vec!["emit-sft", "--samples", s(&filtered), "--projections", s(&proj), "--out-dir", s(&sft)],
    ];
    for step in &steps {
        let mut args = vec!["--config", c, "--log", "warn"];
        args.extend(step);
        let o = parrot(&args);
        assert_eq!(code(&o), 0, "{step:?}: {}", stderr(&o));
    }

    let st: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(st["generated"], 50);
    assert_eq!(st["passed"], 40);
    assert_eq!(st["failed"], 8);
    assert_eq!(st["malformed"], 2);
    assert_eq!(st["retention"].as_f64(), Some(0.8));
    let lines = |p: PathBuf| std::fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(lines(sft.join("pairwise.jsonl")), 40);
    assert_eq!(lines(sft.join("pointwise.jsonl")), 80);
    assert_eq!(lines(sft.join("failures.jsonl")), 10);
    assert_eq!(lines(proj.clone()), 80);

    let o = parrot(&["--config", c, "--dry-run", "project", "--input", s(&filtered), "--out", s(&d.join("x"))]);
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["calls"], 80);
    assert!(!d.join("x").exists());
}

#[test]
fn gcr_writes_trace_and_final_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let script = MockScript::lenient(vec![]).with_default(MockReply::Text(pointwise_text(3.5)));
    let (_server, url) = mock_serve(d, &script);
    let cfg = write_config(d, &url, "");
    let trace = d.join("trace.jsonl");
    let o = parrot(&[
        "--config", s(&cfg), "--seed", "3", "gcr", "--request", "A red bicycle by a lake.", "--trace-out", s(&trace),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&trace).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["decision"]["action"], "accept");
    let img = PathBuf::from(lines[1]["final_image"].as_str().unwrap());
    assert_eq!(img, d.join("trace.final.png"));
    assert!(!std::fs::read(img).unwrap().is_empty());

    let o = parrot(&["--config", s(&cfg), "--dry-run", "gcr", "--request", "x", "--trace-out", s(&d.join("t2"))]);
    assert_eq!(code(&o), 0);
    assert!(!d.join("t2").exists());
}

#[test]
fn nft_train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("nft.toml");
    std::fs::write(&cfg, "[nft]\nhidden = 8\npretrain_steps = 20\npretrain_batch = 16\ngroup_size = 4\n").unwrap();
    let (metrics, ck) = (d.join("metrics.jsonl"), d.join("policy.ckpt"));
    let args = [
        "--config", s(&cfg), "--seed", "5", "nft-train", "--iterations", "6", "--metrics-out", s(&metrics),
        "--checkpoint-out", s(&ck),
    ];
    let o = parrot(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(first.lines().count(), 6);
    for l in first.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["iter", "mean_reward", "reward_std", "loss"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
    let policy = Checkpoint::decode(&std::fs::read(&ck).unwrap()).unwrap();
    assert_eq!(policy.layout.hidden, 8);

    assert_eq!(code(&parrot(&args)), 0);
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), first);

    std::fs::write(&ck, b"PNFT garbage").unwrap();
    let o = parrot(&[
        "--config", s(&cfg), "nft-train", "--init-checkpoint", s(&ck), "--metrics-out", s(&metrics),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn score_and_bench_pairwise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("scores.jsonl");
    let mut text = String::new();
    for (p, img, tf) in [("p1", "a", 2.0), ("p1", "b", 3.0), ("p2", "a", 4.0), ("p2", "b", 3.5)] {
        text.push_str(&format!(
            r#"{{"prompt_id":"{p}","image":"{img}","scores":{{"tf":{tf},"if":"N/A","pq":{tf},"tr":"N/A"}}}}"#
        ));
        text.push('\n');
    }
    std::fs::write(&input, text).unwrap();
    let (out, groups, selected) = (d.join("scored.jsonl"), d.join("groups.jsonl"), d.join("selected.txt"));
    let o = parrot(&[
        "score", "--input", s(&input), "--out", s(&out), "--groups-out", s(&groups), "--selected-out", s(&selected),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs: Vec<serde_json::Value> =
        std::fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs[0]["r_raw"].as_f64(), Some(2.0));
    assert_eq!(recs[0]["r_norm"].as_f64(), Some(0.0));
    assert_eq!(recs[1]["r_norm"].as_f64(), Some(1.0));
    assert_eq!(std::fs::read_to_string(&selected).unwrap(), "p1\n");
    assert_eq!(std::fs::read_to_string(&groups).unwrap().lines().count(), 2);

    let gold = d.join("gold.jsonl");
    let verdicts = d.join("verdicts.jsonl");
    std::fs::write(&gold, "{\"id\":\"1\",\"label\":\"A\"}\n{\"id\":\"2\",\"label\":\"B\"}\n{\"id\":\"3\",\"label\":\"A\"}\n{\"id\":\"4\",\"label\":\"B\"}\n").unwrap();
    std::fs::write(
        &verdicts,
        "{\"id\":\"1\",\"verdict\":\"A\"}\n{\"id\":\"2\",\"answer\":\"B is preferred\"}\n{\"id\":\"3\",\"verdict\":\"Tie\"}\n{\"id\":\"4\",\"answer\":\"hmm\"}\n",
    )
    .unwrap();
    let o = parrot(&["bench-pairwise", "--gold", s(&gold), "--verdicts", s(&verdicts)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["accuracy"].as_f64(), Some(0.5));

    std::fs::write(&verdicts, "{\"id\":\"1\",\"verdict\":\"A\"}\n").unwrap();
    assert_eq!(code(&parrot(&["bench-pairwise", "--gold", s(&gold), "--verdicts", s(&verdicts)])), 1);
}
