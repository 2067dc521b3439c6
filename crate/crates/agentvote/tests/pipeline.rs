mod common;

use std::path::Path;

use agentvote::config::{load_config, load_config_with, EnsembleConfig, Overrides};
use agentvote::pipeline::{
    self, aggregate_agent_tables, agent_csv, render_summary, replay, run_pipeline, RunOptions, SummaryCounts,
};
use agentvote::review::ReviewStore;
use agentvote::tables::{read_agent_table, read_final_table, write_agent_table, Source};
use agentvote_core::vote::{sweep, Denominator};
use agentvote_core::ParseStatus;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(dir: &Path, n: usize, k: u32) -> (EnsembleConfig, pipeline::PipelineOutput) {
    let cfg = load_config(&common::sim_config(dir, n, 7, k, 11)).unwrap();
    let out = run_pipeline(&cfg, &RunOptions { transcripts: true }).unwrap();
    (cfg, out)
}

#[test]
fn counts_are_conserved() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = run(dir.path(), 300, 5);
    let rows = read_final_table(&cfg.run_dir.join(pipeline::FINAL_FILE)).unwrap();
    assert_eq!(rows.len(), 300);
    assert_eq!(out.vote.final_rows, rows);
    let s = &out.vote.summary;
    assert_eq!(s.total(), 300);
    assert_eq!(s.irrelevant as usize, out.partition.n_irrelevant());
    assert_eq!(s.by_label.iter().map(|(_, n)| n).sum::<u64>() + s.review, s.relevant);
    assert_eq!(rows.iter().filter(|r| r.source == Source::DefaultFilter).count() as u64, s.irrelevant);
    assert!(rows.iter().filter(|r| r.source == Source::DefaultFilter).all(|r| r.final_label == "Non-AF"));
    assert_eq!(std::fs::read_to_string(cfg.run_dir.join(pipeline::SUMMARY_FILE)).unwrap(), render_summary(s));
    assert_eq!(SummaryCounts::from_rows(&cfg.schema, &rows), *s);

    // every Review or Uncertain outcome is queued
    let flagged = out
        .vote
        .primary_table()
        .decisions
        .iter()
        .filter(|d| cfg.schema.needs_review(d.outcome))
        .count();
    assert_eq!(out.vote.review_enqueued, flagged);
    let store = ReviewStore::open(&cfg.review_store, cfg.schema.clone()).unwrap();
    assert_eq!(store.stats().total, flagged);

    // one decision file per threshold, artifacts present
    for k in &cfg.thresholds {
        assert!(cfg.run_dir.join("decisions").join(format!("k{k}.csv")).exists());
    }
    for f in [pipeline::METRICS_FILE, pipeline::CURVE_FILE, pipeline::AUDIT_FILE, pipeline::MANIFEST_FILE] {
        assert!(cfg.run_dir.join(f).exists(), "{f}");
    }
    for a in &cfg.agents {
        assert!(cfg.run_dir.join("transcripts").join(format!("{}.jsonl", a.agent_id)).exists());
    }
    assert_eq!(out.manifest.n_cases, 300);
    assert!(out.manifest.warnings.is_empty(), "{:?}", out.manifest.warnings);
}

#[test]
fn concurrency_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = run(dir.path(), 200, 4);
    let text = std::fs::read_to_string(dir.path().join("config.yaml")).unwrap();
    let serial = text.replace("concurrency: {agents: 3, requests_per_agent: 2}", "concurrency: {agents: 1, requests_per_agent: 1}");
    assert_ne!(serial, text);
    let other = dir.path().join("serial");
    std::fs::create_dir(&other).unwrap();
    std::fs::write(other.join("config.yaml"), serial).unwrap();
    let b = load_config(&other.join("config.yaml")).unwrap();
    run_pipeline(&b, &RunOptions::default()).unwrap();
    for name in [pipeline::FINAL_FILE, pipeline::METRICS_FILE, pipeline::CURVE_FILE] {
        assert_eq!(
            std::fs::read(a.run_dir.join(name)).unwrap(),
            std::fs::read(b.run_dir.join(name)).unwrap(),
            "{name}"
        );
    }
    for agent in &a.agents {
        assert_eq!(
            std::fs::read(agent_csv(&a, &agent.agent_id)).unwrap(),
            std::fs::read(agent_csv(&b, &agent.agent_id)).unwrap()
        );
    }
}

#[test]
fn seed_override_changes_votes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = run(dir.path(), 200, 4);
    let b = load_config_with(
        &dir.path().join("config.yaml"),
        &Overrides { seed: Some(99), run_dir: Some(dir.path().join("reseeded")), ..Default::default() },
    )
    .unwrap();
    run_pipeline(&b, &RunOptions::default()).unwrap();
    assert_ne!(
        std::fs::read(agent_csv(&a, &a.agents[0].agent_id)).unwrap(),
        std::fs::read(agent_csv(&b, &b.agents[0].agent_id)).unwrap()
    );
}

#[test]
fn replay_matches_and_threshold_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = run(dir.path(), 200, 4);
    let before = std::fs::read(cfg.run_dir.join(pipeline::FINAL_FILE)).unwrap();
    let again = replay(&cfg).unwrap();
    assert_eq!(std::fs::read(cfg.run_dir.join(pipeline::FINAL_FILE)).unwrap(), before);
    assert_eq!(again.summary, out.vote.summary);
    assert_eq!(again.review_enqueued, 0);

    let k7 = load_config_with(&dir.path().join("config.yaml"), &Overrides { min_votes: Some(7), ..Default::default() }).unwrap();
    let strict = replay(&k7).unwrap();
    assert!(strict.summary.review >= out.vote.summary.review);
    assert_eq!(strict.summary.relevant, out.vote.summary.relevant);
}

#[test]
fn aggregation_fills_gaps_and_ignores_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = run(dir.path(), 120, 4);
    let ids = &out.partition.relevant_ids;
    let baseline = aggregate_agent_tables(&cfg, ids).unwrap();

    let path = agent_csv(&cfg, &cfg.agents[2].agent_id);
    let mut rows = read_agent_table(&path).unwrap();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    write_agent_table(&path, &rows).unwrap();
    assert_eq!(aggregate_agent_tables(&cfg, ids).unwrap(), baseline);

    let dropped = rows.remove(0).case_id;
    write_agent_table(&path, &rows).unwrap();
    let cases = aggregate_agent_tables(&cfg, ids).unwrap();
    let (_, votes) = cases.iter().find(|(id, _)| *id == dropped).unwrap();
    assert_eq!(votes[2].reason.as_deref(), Some("missing row"));
    assert_eq!(votes.len(), 7);
    let replayed = replay(&cfg).unwrap();
    assert_eq!(replayed.warnings.len(), 1, "{:?}", replayed.warnings);
    assert!(replayed.warnings[0].contains(&cfg.agents[2].agent_id));
    // the other agents' invalid votes, plus the gap
    let (_, before) = baseline.iter().find(|(id, _)| *id == dropped).unwrap();
    let others_invalid = (0..7).filter(|&i| i != 2 && before[i].parse_status() == ParseStatus::Invalid).count() as u32;
    let d = replayed.primary_table().decisions.iter().find(|d| d.case_id == dropped).unwrap();
    assert_eq!(d.tally.invalid_count(), others_invalid + 1);

    rows[0].agent_id = "intruder".into();
    write_agent_table(&path, &rows).unwrap();
    let e = aggregate_agent_tables(&cfg, ids).unwrap_err();
    assert!(e.to_string().contains("intruder"), "{e}");
}

#[test]
fn valid_votes_denominator_never_reviews_more() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = run(dir.path(), 200, 5);
    let cases = aggregate_agent_tables(&cfg, &out.partition.relevant_ids).unwrap();
    let committee = sweep(&cases, &[5], &cfg.schema, Denominator::Committee).unwrap().remove(0);
    let valid = sweep(&cases, &[5], &cfg.schema, Denominator::ValidVotes).unwrap().remove(0);
    for (c, v) in committee.decisions.iter().zip(&valid.decisions) {
        if !c.is_review() {
            assert_eq!(c.outcome, v.outcome);
        }
    }
    assert!(valid.n_review() <= committee.n_review());
}
