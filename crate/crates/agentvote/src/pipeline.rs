//! End-to-end run: prefilter, agents, vote, evaluation, review queue.
//!
//! Everything after the agent stage is a pure function of the agent tables,
//! so [`replay`] reproduces the final table without calling any backend.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use agentvote_core::metrics::{build_confusion, metrics, threshold_curve, CurveRow};
use agentvote_core::sim::{generate_corpus, hallucination_audit, HallucinationAudit};
use agentvote_core::vote::{sweep, DecisionTable, EnsembleDecision};
use agentvote_core::{AgentVote, FinalLabel, LabelId, MetricsReport, TaskSchema};
use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use log::{info, warn};
use serde::Serialize;

use crate::backend;
use crate::config::{BackendKind, EnsembleConfig, InputSource};
use crate::corpus::{read_corpus, read_truth, synthetic_records, write_corpus_csv, write_truth_csv, CorpusRecord, TruthTable};
use crate::prefilter::{partition_corpus, CorpusPartition, FilterError};
use crate::review::{ReviewItem, ReviewReason, ReviewStatus, ReviewStore, ReviewVote};
use crate::runtime::{run_agent, AgentJob, AgentProgress};
use crate::tables::{read_agent_table, write_decisions, write_final_table, AgentRow, FinalRow, Source};

pub const CORPUS_FILE: &str = "corpus.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const PARTITION_FILE: &str = "partition.csv";
pub const FINAL_FILE: &str = "final_labels.csv";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "threshold_curve.csv";
pub const AUDIT_FILE: &str = "hallucination_audit.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub struct Inputs {
    pub corpus: Vec<CorpusRecord>,
    pub truth: Option<TruthTable>,
}

fn create_run_dir(cfg: &EnsembleConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.run_dir).with_context(|| format!("creating {}", cfg.run_dir.display()))
}

fn load_truth(cfg: &EnsembleConfig) -> Result<Option<TruthTable>> {
    if let Some(p) = &cfg.truth {
        return read_truth(p, &cfg.schema).map(Some);
    }
    let generated = cfg.run_dir.join(TRUTH_FILE);
    if matches!(cfg.input, InputSource::Synthetic(_)) && generated.exists() {
        return read_truth(&generated, &cfg.schema).map(Some);
    }
    Ok(None)
}

/// Reads or generates the corpus. A synthetic corpus and its truth are
/// written into the run directory.
pub fn prepare_inputs(cfg: &EnsembleConfig) -> Result<Inputs> {
    create_run_dir(cfg)?;
    match &cfg.input {
        InputSource::File(p) => Ok(Inputs {
            corpus: read_corpus(p)?,
            truth: load_truth(cfg)?,
        }),
        InputSource::Synthetic(spec) => {
            let cases = generate_corpus(spec.n, &spec.mix, spec.seed, &cfg.schema)?;
            let corpus = synthetic_records(&cases);
            write_corpus_csv(&cfg.run_dir.join(CORPUS_FILE), &corpus)?;
            write_truth_csv(&cfg.run_dir.join(TRUTH_FILE), &cases, &cfg.schema)?;
            let truth = match &cfg.truth {
                Some(p) => read_truth(p, &cfg.schema)?,
                None => TruthTable::from_synthetic(&cases),
            };
            Ok(Inputs {
                corpus,
                truth: Some(truth),
            })
        }
    }
}

/// The corpus of an earlier run, without regenerating anything.
pub fn load_inputs(cfg: &EnsembleConfig) -> Result<Inputs> {
    let corpus = match &cfg.input {
        InputSource::File(p) => read_corpus(p)?,
        InputSource::Synthetic(_) => read_corpus(&cfg.run_dir.join(CORPUS_FILE))
            .context("no synthetic corpus in the run directory; run the pipeline first")?,
    };
    Ok(Inputs {
        corpus,
        truth: load_truth(cfg)?,
    })
}

/// Applies the configured prefilter; without one every case is relevant.
pub fn partition(cfg: &EnsembleConfig, corpus: &[CorpusRecord]) -> Result<CorpusPartition, FilterError> {
    match &cfg.filter {
        Some(f) => partition_corpus(corpus, f),
        None => {
            let mut seen = HashSet::new();
            for r in corpus {
                if !seen.insert(r.case_id.as_str()) {
                    return Err(FilterError::DuplicateCaseId(r.case_id.clone()));
                }
            }
            Ok(CorpusPartition {
                relevant_ids: corpus.iter().map(|r| r.case_id.clone()).collect(),
                irrelevant_ids: Vec::new(),
            })
        }
    }
}

pub fn agent_csv(cfg: &EnsembleConfig, agent_id: &str) -> PathBuf {
    cfg.agents_dir().join(format!("{agent_id}.csv"))
}

pub fn transcript_path(cfg: &EnsembleConfig, agent_id: &str) -> PathBuf {
    cfg.run_dir.join("transcripts").join(format!("{agent_id}.jsonl"))
}

/// Runs every agent over `relevant`, at most `concurrency.agents` at once.
pub fn run_agents(
    cfg: &EnsembleConfig,
    relevant: &[CorpusRecord],
    truth: Arc<TruthTable>,
    transcripts: bool,
) -> Result<Vec<AgentProgress>> {
    let backends = cfg
        .agents
        .iter()
        .map(|a| backend::from_spec(a, cfg.sim_profile(a), &cfg.schema, truth.clone()))
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.agents.len();
    let workers = match cfg.file.concurrency.agents {
        0 => n,
        k => k.min(n),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AgentProgress>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let agent = &cfg.agents[i];
                let job = AgentJob {
                    agent_id: &agent.agent_id,
                    backend: &backends[i],
                    schema: &cfg.schema,
                    template: &cfg.template,
                    out_csv: agent_csv(cfg, &agent.agent_id),
                    transcripts: transcripts.then(|| transcript_path(cfg, &agent.agent_id)),
                    concurrency: cfg.file.concurrency.requests_per_agent,
                };
                let r = run_agent(&job, relevant);
                if let Ok(p) = &r {
                    info!(
                        "{}: {} cases ({} resumed, {} invalid, {} repaired) in {} ms",
                        p.agent_id, p.total, p.resumed, p.invalid, p.repaired, p.elapsed_ms
                    );
                }
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every agent ran"))
        .collect()
}

/// Votes per relevant case, agents in committee order. A case missing from an
/// agent's table counts as an invalid vote.
pub fn aggregate_agent_tables(
    cfg: &EnsembleConfig,
    relevant_ids: &[String],
) -> Result<Vec<(String, Vec<AgentVote>)>> {
    let wanted: HashSet<&str> = relevant_ids.iter().map(String::as_str).collect();
    let mut per_agent: Vec<HashMap<String, AgentVote>> = Vec::with_capacity(cfg.agents.len());
    for agent in &cfg.agents {
        let path = agent_csv(cfg, &agent.agent_id);
        let rows: Vec<AgentRow> = if path.exists() {
            read_agent_table(&path)?
        } else {
            warn!("{}: no annotation table; all votes invalid", agent.agent_id);
            Vec::new()
        };
        let mut votes = HashMap::with_capacity(rows.len());
        for row in rows {
            if row.agent_id != agent.agent_id {
                bail!(
                    "{}: row for case {} names unknown agent {:?}",
                    path.display(),
                    row.case_id,
                    row.agent_id
                );
            }
            if !wanted.contains(row.case_id.as_str()) {
                continue;
            }
            let vote = row.to_vote(&cfg.schema)?;
            votes.insert(row.case_id, vote);
        }
        per_agent.push(votes);
    }
    Ok(relevant_ids
        .iter()
        .map(|id| {
            let votes = cfg
                .agents
                .iter()
                .zip(per_agent.iter_mut())
                .map(|(a, m)| m.remove(id).unwrap_or_else(|| AgentVote::invalid(id, &a.agent_id, "missing row")))
                .collect();
            (id.clone(), votes)
        })
        .collect())
}

/// Counts behind the run summary table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SummaryCounts {
    pub positive_class: String,
    pub default_label: Option<String>,
    pub irrelevant: u64,
    pub relevant: u64,
    /// Ensemble outcomes per label in schema order.
    pub by_label: Vec<(String, u64)>,
    pub review: u64,
}

impl SummaryCounts {
    pub fn total(&self) -> u64 {
        self.irrelevant + self.relevant
    }

    pub fn from_rows(schema: &TaskSchema, rows: &[FinalRow]) -> Self {
        let mut by_label: Vec<(String, u64)> = schema.valid_set().iter().map(|l| (l.clone(), 0)).collect();
        let (mut irrelevant, mut relevant, mut review) = (0, 0, 0);
        for r in rows {
            if r.source == Source::DefaultFilter {
                irrelevant += 1;
                continue;
            }
            relevant += 1;
            match by_label.iter_mut().find(|(l, _)| *l == r.final_label) {
                Some((_, c)) => *c += 1,
                None => review += 1,
            }
        }
        SummaryCounts {
            positive_class: schema.label_name(schema.positive_class()).to_string(),
            default_label: schema.default_label().map(|l| schema.label_name(l).to_string()),
            irrelevant,
            relevant,
            by_label,
            review,
        }
    }
}

fn percent(x: u64, total: u64) -> String {
    if total == 0 {
        return "0.00%".into();
    }
    format!("{:.2}%", 100.0 * x as f64 / total as f64)
}

/// The run summary as a tab-separated table.
pub fn render_summary(s: &SummaryCounts) -> String {
    let total = s.total();
    let mut out = String::from("Labels\tNumbers\tPercentage\n");
    let mut line = |name: &str, n: u64| {
        out.push_str(&format!("{name}\t{n}\t{}\n", percent(n, total)));
    };
    let pos = &s.positive_class;
    line(&format!("{pos}-irrelevant cases"), s.irrelevant);
    if let Some(d) = &s.default_label {
        line(&format!("{d} (by default)"), s.irrelevant);
    }
    line(&format!("{pos}-relevant cases (labeled by LLM agents)"), s.relevant);
    if let Some(d) = &s.default_label {
        let n = s.by_label.iter().find(|(l, _)| l == d).map_or(0, |(_, c)| *c);
        line(&format!("{d} (by LLMs)"), n);
    }
    for (label, n) in &s.by_label {
        if Some(label) != s.default_label.as_ref() {
            line(label, *n);
        }
    }
    line("Need Review", s.review);
    line("Total number of cases", total);
    out
}

#[derive(Clone, Debug)]
pub struct VoteOutput {
    pub tables: Vec<DecisionTable>,
    /// Index of the primary threshold in `tables`.
    pub primary: usize,
    pub final_rows: Vec<FinalRow>,
    pub summary: SummaryCounts,
    pub metrics: Option<MetricsReport>,
    pub curve: Option<Vec<CurveRow>>,
    pub audit: Option<HallucinationAudit>,
    pub review_enqueued: usize,
    /// Coverage gaps; the affected votes count as invalid.
    pub warnings: Vec<String>,
}

impl VoteOutput {
    pub fn primary_table(&self) -> &DecisionTable {
        &self.tables[self.primary]
    }
}

fn review_item(
    schema: &TaskSchema,
    d: &EnsembleDecision,
    votes: &[AgentVote],
    report_text: &str,
) -> ReviewItem {
    let reason = match d.outcome {
        FinalLabel::Review if d.winner_set_size > 1 => ReviewReason::Tie,
        FinalLabel::Review => ReviewReason::BelowThreshold,
        FinalLabel::Valid(_) => ReviewReason::FlagLabel,
    };
    ReviewItem {
        case_id: d.case_id.clone(),
        report_text: report_text.to_string(),
        machine_outcome: schema.final_name(d.outcome).to_string(),
        reason,
        min_votes: d.min_votes,
        winning_votes: d.winning_votes,
        tally: schema
            .labels()
            .map(|l| (schema.label_name(l).to_string(), d.tally.count(l)))
            .collect(),
        invalid_votes: d.tally.invalid_count(),
        votes: votes
            .iter()
            .map(|v| {
                let row = AgentRow::from_vote(v, schema);
                ReviewVote {
                    agent_id: row.agent_id,
                    raw_category: row.raw_category,
                    final_label: row.final_label,
                    af_pr: v.af_pr(),
                    parse_status: row.parse_status,
                    explanation: row.explanation,
                }
            })
            .collect(),
        status: ReviewStatus::Pending,
        human_label: None,
        reviewer: None,
        note: None,
        adjudicated_at: None,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn write_curve(path: &Path, curve: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "min_votes",
        "accuracy",
        "f1_weighted",
        "recall_positive",
        "specificity_positive",
        "n_auto",
        "n_review",
        "review_rate",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in curve {
        w.write_record([
            r.min_votes.to_string(),
            opt(r.accuracy),
            opt(r.f1_weighted),
            opt(r.recall_positive),
            opt(r.specificity_positive),
            r.n_auto.to_string(),
            r.n_review.to_string(),
            format!("{:.6}", r.review_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Final rows in corpus order: screened-out cases get the default label,
/// relevant cases the ensemble outcome at the primary threshold.
pub fn final_rows(
    schema: &TaskSchema,
    corpus: &[CorpusRecord],
    partition: &CorpusPartition,
    primary: &DecisionTable,
) -> Result<Vec<FinalRow>> {
    let decided: HashMap<&str, &EnsembleDecision> =
        primary.decisions.iter().map(|d| (d.case_id.as_str(), d)).collect();
    let irrelevant: HashSet<&str> = partition.irrelevant_ids.iter().map(String::as_str).collect();
    corpus
        .iter()
        .map(|r| {
            if irrelevant.contains(r.case_id.as_str()) {
                let Some(default) = schema.default_label() else {
                    bail!("case {} was screened out but the task has no default label", r.case_id);
                };
                return Ok(FinalRow {
                    case_id: r.case_id.clone(),
                    final_label: schema.label_name(default).to_string(),
                    source: Source::DefaultFilter,
                    min_votes: None,
                    winning_votes: None,
                });
            }
            let Some(d) = decided.get(r.case_id.as_str()) else {
                bail!("no ensemble decision for relevant case {}", r.case_id);
            };
            Ok(FinalRow {
                case_id: r.case_id.clone(),
                final_label: schema.final_name(d.outcome).to_string(),
                source: Source::Ensemble,
                min_votes: Some(d.min_votes),
                winning_votes: Some(d.winning_votes),
            })
        })
        .collect()
}

/// Metrics over the decided cases that have a truth label.
pub fn evaluate(
    schema: &TaskSchema,
    decisions: &[EnsembleDecision],
    truth: &BTreeMap<String, LabelId>,
) -> Result<MetricsReport> {
    let known: Vec<EnsembleDecision> = decisions.iter().filter(|d| truth.contains_key(&d.case_id)).cloned().collect();
    let cm = build_confusion(schema, truth, &known)?;
    let mut report = metrics(&cm, schema.positive_class());
    let skipped = decisions.len() - known.len();
    if skipped > 0 {
        report.warnings.push(format!("{skipped} decided case(s) have no truth label and were not scored"));
    }
    Ok(report)
}

/// Everything after the agents: decisions at each threshold, the final
/// table, summary, metrics and the review queue.
pub fn vote_stage(
    cfg: &EnsembleConfig,
    corpus: &[CorpusRecord],
    partition: &CorpusPartition,
    truth: Option<&TruthTable>,
) -> Result<VoteOutput> {
    create_run_dir(cfg)?;
    let cases = aggregate_agent_tables(cfg, &partition.relevant_ids)?;
    let tables = sweep(&cases, &cfg.thresholds, &cfg.schema, cfg.denominator)?;
    let primary = cfg
        .thresholds
        .iter()
        .position(|&k| k == cfg.min_votes)
        .expect("thresholds include min_votes");

    let dec_dir = cfg.run_dir.join("decisions");
    std::fs::create_dir_all(&dec_dir)?;
    for t in &tables {
        let f = BufWriter::new(File::create(dec_dir.join(format!("k{}.csv", t.min_votes)))?);
        write_decisions(f, &t.decisions, &cfg.schema)?;
    }

    let rows = final_rows(&cfg.schema, corpus, partition, &tables[primary])?;
    write_final_table(BufWriter::new(File::create(cfg.run_dir.join(FINAL_FILE))?), &rows)?;
    let summary = SummaryCounts::from_rows(&cfg.schema, &rows);
    std::fs::write(cfg.run_dir.join(SUMMARY_FILE), render_summary(&summary))?;

    let (mut report, mut curve, mut audit) = (None, None, None);
    if let Some(truth) = truth {
        let m = evaluate(&cfg.schema, &tables[primary].decisions, &truth.labels)?;
        write_json(&cfg.run_dir.join(METRICS_FILE), &m)?;
        report = Some(m);

        let known: Vec<DecisionTable> = tables
            .iter()
            .map(|t| DecisionTable {
                min_votes: t.min_votes,
                decisions: t.decisions.iter().filter(|d| truth.labels.contains_key(&d.case_id)).cloned().collect(),
            })
            .collect();
        let c = threshold_curve(&cfg.schema, &known, &truth.labels)?;
        write_curve(&cfg.run_dir.join(CURVE_FILE), &c)?;
        curve = Some(c);

        if cfg.agents.iter().any(|a| a.backend == BackendKind::Simulated) {
            let outcomes: BTreeMap<String, FinalLabel> =
                tables[primary].decisions.iter().map(|d| (d.case_id.clone(), d.outcome)).collect();
            let votes: Vec<AgentVote> = cases.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
            let a = hallucination_audit(&votes, &outcomes, &truth.labels, &cfg.schema);
            write_json(&cfg.run_dir.join(AUDIT_FILE), &a)?;
            audit = Some(a);
        }
    }

    let mut store = ReviewStore::open(&cfg.review_store, cfg.schema.clone())?;
    let review_enqueued = enqueue_flagged(&mut store, &cfg.schema, &tables[primary], &cases, corpus)?;
    let warnings = coverage_warnings(cfg, &cases);
    for w in &warnings {
        warn!("{w}");
    }

    Ok(VoteOutput {
        tables,
        primary,
        final_rows: rows,
        summary,
        metrics: report,
        curve,
        audit,
        review_enqueued,
        warnings,
    })
}

/// Queues every Review or flagged outcome with its vote provenance. Cases
/// already in the store are left alone, so re-running is a no-op.
pub fn enqueue_flagged(
    store: &mut ReviewStore,
    schema: &TaskSchema,
    primary: &DecisionTable,
    cases: &[(String, Vec<AgentVote>)],
    corpus: &[CorpusRecord],
) -> Result<usize> {
    let texts: HashMap<&str, &str> = corpus.iter().map(|r| (r.case_id.as_str(), r.report_text.as_str())).collect();
    let votes: HashMap<&str, &[AgentVote]> = cases.iter().map(|(id, v)| (id.as_str(), v.as_slice())).collect();
    let mut added = 0;
    for d in &primary.decisions {
        if !schema.needs_review(d.outcome) {
            continue;
        }
        let text = texts.get(d.case_id.as_str()).copied().unwrap_or_default();
        let v = votes.get(d.case_id.as_str()).copied().unwrap_or_default();
        if store.enqueue(review_item(schema, d, v, text))? {
            added += 1;
        }
    }
    Ok(added)
}

/// One line per agent that lacks a row for some relevant case.
fn coverage_warnings(cfg: &EnsembleConfig, cases: &[(String, Vec<AgentVote>)]) -> Vec<String> {
    cfg.agents
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let missing = cases
                .iter()
                .filter(|(_, v)| v[i].reason.as_deref() == Some("missing row"))
                .count();
            (missing > 0).then(|| format!("agent {}: no row for {missing} of {} cases", a.agent_id, cases.len()))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_hash: String,
    pub task_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub n_cases: usize,
    pub n_relevant: usize,
    pub n_irrelevant: usize,
    pub min_votes: u32,
    pub thresholds: Vec<u32>,
    pub agents: Vec<AgentProgress>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub transcripts: bool,
}

pub struct PipelineOutput {
    pub manifest: RunManifest,
    pub partition: CorpusPartition,
    pub vote: VoteOutput,
}

pub fn run_pipeline(cfg: &EnsembleConfig, opts: &RunOptions) -> Result<PipelineOutput> {
    let started_at = Utc::now();
    let inputs = prepare_inputs(cfg)?;
    let part = partition(cfg, &inputs.corpus)?;
    let f = BufWriter::new(File::create(cfg.run_dir.join(PARTITION_FILE))?);
    let order: Vec<String> = inputs.corpus.iter().map(|r| r.case_id.clone()).collect();
    part.write_csv(&order, f)?;
    info!("{} relevant, {} screened out", part.n_relevant(), part.n_irrelevant());

    let relevant_set: HashSet<&str> = part.relevant_ids.iter().map(String::as_str).collect();
    let relevant: Vec<CorpusRecord> = inputs
        .corpus
        .iter()
        .filter(|r| relevant_set.contains(r.case_id.as_str()))
        .cloned()
        .collect();
    let truth = Arc::new(inputs.truth.clone().unwrap_or_default());
    let progress = run_agents(cfg, &relevant, truth, opts.transcripts)?;

    let vote = vote_stage(cfg, &inputs.corpus, &part, inputs.truth.as_ref())?;
    let finished_at = Utc::now();
    let manifest = RunManifest {
        run_id: format!("{}-{}", &cfg.config_hash[..12], started_at.format("%Y%m%dT%H%M%SZ")),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.config_hash.clone(),
        task_id: cfg.schema.task_id().to_string(),
        started_at,
        finished_at,
        n_cases: inputs.corpus.len(),
        n_relevant: part.n_relevant(),
        n_irrelevant: part.n_irrelevant(),
        min_votes: cfg.min_votes,
        thresholds: cfg.thresholds.clone(),
        agents: progress,
        warnings: vote.warnings.clone(),
    };
    write_json(&cfg.run_dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&cfg.run_dir.join("config.json"), &cfg.file)?;
    Ok(PipelineOutput {
        manifest,
        partition: part,
        vote,
    })
}

/// Recomputes the vote stage from the agent tables already on disk.
pub fn replay(cfg: &EnsembleConfig) -> Result<VoteOutput> {
    let inputs = load_inputs(cfg)?;
    let part = partition(cfg, &inputs.corpus)?;
    vote_stage(cfg, &inputs.corpus, &part, inputs.truth.as_ref())
}
