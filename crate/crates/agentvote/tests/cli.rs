use std::process::Command;

fn agentvote(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_agentvote")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn gen_corpus_then_filter() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    agentvote(&["gen-corpus", "--n", "50", "--mix", "0.5,0.4,0.1", "--seed", "3", "--out-dir", d]);
    let corpus = dir.path().join("corpus.csv");
    assert_eq!(std::fs::read_to_string(&corpus).unwrap().lines().count(), 51);
    assert_eq!(std::fs::read_to_string(dir.path().join("truth.csv")).unwrap().lines().count(), 51);

    let part = dir.path().join("partition.csv");
    let audit = dir.path().join("audit.jsonl");
    let out = agentvote(&[
        "filter",
        "--input",
        corpus.to_str().unwrap(),
        "--output",
        part.to_str().unwrap(),
        "--audit",
        audit.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("relevant"));
    assert_eq!(std::fs::read_to_string(&part).unwrap().lines().count(), 51);
    assert!(audit.exists());
}

#[test]
fn run_eval_sweep_on_a_simulated_config() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/prompts/ecg_af.yaml");
    let cfg = dir.path().join("c.yaml");
    std::fs::write(
        &cfg,
        format!(
            "task: {{builtin: ecg_af}}\nprompt: {prompt}\nsynthetic_corpus: {{n: 80, mix: [0.8, 0.1, 0.1], seed: 2}}\nrun_dir: run\nvoting: {{min_votes: 2}}\nagents:\n{}",
            (0..3)
                .map(|i| format!("  - {{agent_id: s{i}, backend: simulated, simulation: {{seed: {i}, accuracy: 0.9}}}}\n"))
                .collect::<String>()
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = agentvote(&["run", "--config", c]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("Labels\tNumbers\tPercentage\n"), "{text}");
    assert!(text.contains("Total number of cases\t80\t100.00%"), "{text}");

    let eval: serde_json::Value = serde_json::from_slice(&agentvote(&["eval", "--config", c]).stdout).unwrap();
    assert!(eval["accuracy"].as_f64().is_some());
    let curve = String::from_utf8(agentvote(&["sweep", "--config", c]).stdout).unwrap();
    assert_eq!(curve.lines().count(), 4, "{curve}");
    let audit: serde_json::Value =
        serde_json::from_slice(&agentvote(&["audit", "--config", c, "--hallucinations"]).stdout).unwrap();
    assert_eq!(audit["total"]["injected"], 0);
    agentvote(&["vote", "--config", c, "--k", "3"]);
}
