use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn focusrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focusrl"))
        .args(args)
        .env_remove("FOCUSRL_PROVIDER_URL")
        .env_remove("FOCUSRL_PROVIDER_KEY")
        .env_remove("FOCUSRL_PROVIDER_MODEL")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const GROUP: &str = r#"{"id":"q1","question":"What is the total?","ground_truth":"42","answer_type":"numeric","responses":["<think><focus><ocr>Total: 42</ocr></focus></think><answer>42</answer>","<think>roughly thirty</think><answer>30</answer>"]}"#;

#[test]
fn score_writes_header_breakdowns_and_advantages() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("r.jsonl"), dir.path().join("s.jsonl"));
    std::fs::write(&input, format!("{GROUP}\n")).unwrap();
    let o = focusrl(&["score", "-i", p(&input), "-o", p(&output)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = lines(&output);
    assert_eq!(out[0]["schema"], "focusrl.score");
    assert_eq!(out[0]["version"], 1);
    assert_eq!(out[0]["reward"]["alpha"], 2.0);
    let rec = &out[1];
    assert_eq!(rec["advantages"], serde_json::json!([1.0, -1.0]));
    assert!((rec["scores"][0]["total"].as_f64().unwrap() - 1.2).abs() < 1e-12);
    assert!((rec["scores"][1]["total"].as_f64().unwrap() - 0.1667).abs() < 1e-12);
    assert_eq!(rec["question"], "What is the total?");
    assert!(stdout(&o).contains("focus_cot 1, plain_cot 1"));
}

#[test]
fn score_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.jsonl");
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    let o = focusrl(&["score", "-i", p(&empty), "-o", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no records"));

    let mixed = dir.path().join("mixed.jsonl");
    std::fs::write(
        &mixed,
        format!("{GROUP}\n{}\n", r#"{"id":"q2","ground_truth":"x","answer_type":"fuzzy","responses":["a"]}"#),
    )
    .unwrap();
    let o = focusrl(&["score", "-i", p(&mixed), "-o", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("fuzzy"));
    assert_eq!(lines(&out).len(), 2);

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{not json\n").unwrap();
    assert_eq!(code(&focusrl(&["score", "-i", p(&broken), "-o", p(&out)])), 2);

    let missing = dir.path().join("nope.jsonl");
    assert_eq!(code(&focusrl(&["score", "-i", p(&missing), "-o", p(&out)])), 3);
    assert_eq!(code(&focusrl(&["score", "-i", p(&mixed), "-o", p(&out), "--alpha", "-1"])), 5);
    assert_eq!(code(&focusrl(&["score", "--nonsense"])), 5);
}

#[test]
fn score_is_the_same_for_any_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("r.jsonl");
    let many: Vec<String> = (0..50).map(|i| GROUP.replace("\"q1\"", &format!("\"q{i}\""))).collect();
    std::fs::write(&input, many.join("\n")).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    assert_eq!(code(&focusrl(&["score", "-i", p(&input), "-o", p(&a), "--jobs", "1"])), 0);
    assert_eq!(code(&focusrl(&["score", "-i", p(&input), "-o", p(&b), "--jobs", "4"])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gradcheck_passes_and_catches_a_sign_flip() {
    let o = focusrl(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.contains(": PASS")).count(), 3, "{out}");

    let o = focusrl(&["gradcheck", "--inject-sign-flip", "--seeds", "1"]);
    assert_eq!(code(&o), 6);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn simulate_is_reproducible_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["simulate", "-o", p(out), "--iterations", "25", "--seed", "4", "--window", "5"];
        args.extend_from_slice(extra);
        focusrl(&args)
    };
    assert_eq!(code(&run(&a, &["--jobs", "1"])), 0);
    assert_eq!(code(&run(&b, &["--jobs", "3"])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let o = run(&c, &["--no-efficiency", "--fixed-kl"]);
    assert_eq!(code(&o), 0);
    let header = &lines(&c)[0];
    assert_eq!(header["schema"], "focusrl.metrics");
    assert_eq!(header["efficiency_reward"], false);
    assert_eq!(header["adaptive_kl"], false);
    assert_eq!(lines(&c).len(), 26);

    let o = focusrl(&["report", p(&a), p(&c), "--window", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("efficiency reward off") && out.contains("KL fixed"), "{out}");
    assert_eq!(code(&focusrl(&["report", p(&dir.path().join("missing.jsonl"))])), 3);
}

#[test]
fn simulate_divergence_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    let o = focusrl(&["simulate", "-o", p(&out), "--iterations", "5", "--lr", "1e308", "--cold-start-steps", "0"]);
    assert_eq!(code(&o), 7, "{}", stderr(&o));
    assert!(stderr(&o).contains("last finite"));
    assert_eq!(code(&focusrl(&["simulate", "-o", p(&out), "--max-len", "200"])), 5);
}

#[test]
fn chart_id_scores_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("c.jsonl");
    std::fs::write(
        &input,
        [
            r#"{"id":"max","s_rich":5,"s_eff":5,"s_clar":5,"s_inter":5,"src":"a"}"#,
            r#"{"id":"edge","s_rich":4,"s_eff":3,"s_clar":4,"s_inter":3}"#,
            r#"{"id":"low","s_rich":2,"s_eff":3,"s_clar":4,"s_inter":3}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    let o = focusrl(&["chart-id", "-i", p(&input)]);
    assert_eq!(code(&o), 0);
    let kept: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(kept.len(), 2);
    assert_eq!(kept[0]["chart_id"], 5.0);
    assert_eq!(kept[0]["src"], "a");
    assert_eq!(kept[1]["chart_id"], 3.7);

    let out = dir.path().join("kept.jsonl");
    let o = focusrl(&["chart-id", "-i", p(&input), "-o", p(&out), "--threshold", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(lines(&out).len(), 3);

    std::fs::write(&input, r#"{"id":"bad","s_rich":6,"s_eff":3,"s_clar":4,"s_inter":3}"#).unwrap();
    assert_eq!(code(&focusrl(&["chart-id", "-i", p(&input)])), 2);
}

#[test]
fn pipeline_stub_run_resume_and_faults() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let recs: Vec<String> = (0..20)
        .map(|i| format!(r#"{{"id":"r{i}","question":"Peak?","ground_truth":"1","note":{i}}}"#))
        .collect();
    std::fs::write(&input, recs.join("\n")).unwrap();
    let out = dir.path().join("gen.jsonl");
    let gen = |extra: &[&str]| {
        let mut args = vec!["pipeline", "generate", "-i", p(&input), "-o", p(&out), "--n-paths", "3"];
        args.extend_from_slice(extra);
        focusrl(&args)
    };
    let o = gen(&["--fail-ids", "r2,r9"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stdout(&o).contains("18 processed"));
    assert_eq!(code(&gen(&[])), 5, "existing output without --resume");
    let o = gen(&["--resume"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("2 processed, 18 already done"));
    assert_eq!(code(&gen(&["--resume"])), 0);

    let written = lines(&out);
    let ids: HashSet<&str> = written.iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!((written.len(), ids.len()), (20, 20));
    assert!(written.iter().all(|r| r["paths"].as_array().unwrap().len() == 3));
    assert_eq!(written[0]["note"], 0);
    let calls = lines(&dir.path().join("gen.jsonl.calls.jsonl"));
    assert_eq!(calls.len(), 18 * 3 + 2 + 2 * 3);
    assert_eq!(lines(&dir.path().join("gen.jsonl.errors.jsonl")).len(), 2);

    let http_out = dir.path().join("http.jsonl");
    let o = focusrl(&["pipeline", "generate", "-i", p(&input), "-o", p(&http_out), "--provider", "http"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("FOCUSRL_PROVIDER_URL"));
}

#[test]
fn stub_pipeline_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let recs: Vec<String> = (0..12)
        .map(|i| format!(r#"{{"id":"r{i}","question":"Q{i}?","ground_truth":"{}"}}"#, i % 3))
        .collect();
    std::fs::write(&input, recs.join("\n")).unwrap();
    let run = |tag: &str| {
        let out = dir.path().join(format!("{tag}.jsonl"));
        assert_eq!(code(&focusrl(&["pipeline", "generate", "-i", p(&input), "-o", p(&out), "--jobs", "3"])), 0);
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
