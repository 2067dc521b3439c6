//! Running one agent over a corpus with checkpointing.
//!
//! Requests run on a small worker pool; a single writer appends each result
//! to the agent's CSV and flushes, so an interrupted run loses at most the
//! in-flight cases. A restart skips every case already in the file and the
//! table is rewritten in corpus order once all cases are done.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use agentvote_core::prompt::PromptError;
use agentvote_core::{repair_and_extract, AgentVote, PromptTemplate, TaskSchema};
use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::backend::Backend;
use crate::corpus::{append_jsonl, CorpusRecord};
use crate::tables::{read_agent_table, write_agent_table, AgentRow, AGENT_HEADER};

pub struct AgentJob<'a> {
    pub agent_id: &'a str,
    pub backend: &'a Backend,
    pub schema: &'a TaskSchema,
    pub template: &'a PromptTemplate,
    pub out_csv: PathBuf,
    pub transcripts: Option<PathBuf>,
    /// Requests in flight at once.
    pub concurrency: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AgentProgress {
    pub agent_id: String,
    pub total: usize,
    /// Cases found already annotated on start.
    pub resumed: usize,
    pub completed: usize,
    pub invalid: usize,
    pub repaired: usize,
    pub attempts: u64,
    pub elapsed_ms: u64,
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    case_id: &'a str,
    agent_id: &'a str,
    request: &'a serde_json::Value,
    raw_response: Option<&'a str>,
    latency_ms: u64,
    attempts: u32,
}

struct Done {
    row: AgentRow,
    transcript: Option<String>,
    attempts: u32,
    vote: AgentVote,
}

fn annotate(job: &AgentJob<'_>, record: &CorpusRecord) -> Result<Done> {
    let chat = match job.template.render(&record.report_text) {
        Ok(c) => c,
        Err(PromptError::EmptyInput) => {
            let vote = AgentVote::invalid(&record.case_id, job.agent_id, "empty input");
            return Ok(Done {
                row: AgentRow::from_vote(&vote, job.schema),
                transcript: None,
                attempts: 0,
                vote,
            });
        }
    };
    let ex = job.backend.invoke(&record.case_id, &record.report_text, &chat);
    let vote = match &ex.outcome {
        Ok(text) => repair_and_extract(text, &record.case_id, job.agent_id, job.schema).annotation,
        Err(reason) => AgentVote::invalid(&record.case_id, job.agent_id, reason.as_str()),
    };
    let transcript = match &job.transcripts {
        Some(_) => Some(serde_json::to_string(&TranscriptLine {
            case_id: &record.case_id,
            agent_id: job.agent_id,
            request: &ex.request,
            raw_response: ex.raw_response.as_deref(),
            latency_ms: ex.latency_ms,
            attempts: ex.attempts,
        })?),
        None => None,
    };
    Ok(Done {
        row: AgentRow::from_vote(&vote, job.schema),
        transcript,
        attempts: ex.attempts,
        vote,
    })
}

fn open_append(path: &PathBuf) -> Result<(BufWriter<File>, bool)> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok((BufWriter::new(f), fresh))
}

/// Annotates every case of `corpus` not already in `job.out_csv`.
pub fn run_agent(job: &AgentJob<'_>, corpus: &[CorpusRecord]) -> Result<AgentProgress> {
    let start = Instant::now();
    if let Some(dir) = job.out_csv.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let order: HashMap<&str, usize> = corpus.iter().enumerate().map(|(i, r)| (r.case_id.as_str(), i)).collect();
    if order.len() != corpus.len() {
        bail!("duplicate case ids in corpus");
    }

    let existing = if job.out_csv.exists() {
        read_agent_table(&job.out_csv).with_context(|| format!("resuming from {}", job.out_csv.display()))?
    } else {
        Vec::new()
    };
    let mut done_ids = HashSet::new();
    for row in &existing {
        if row.agent_id != job.agent_id {
            bail!(
                "{}: row for case {} belongs to agent {:?}",
                job.out_csv.display(),
                row.case_id,
                row.agent_id
            );
        }
        done_ids.insert(row.case_id.clone());
    }
    let pending: Vec<&CorpusRecord> = corpus.iter().filter(|r| !done_ids.contains(&r.case_id)).collect();

    let mut progress = AgentProgress {
        agent_id: job.agent_id.to_string(),
        total: corpus.len(),
        resumed: corpus.len() - pending.len(),
        ..Default::default()
    };

    let (mut csv_out, fresh) = open_append(&job.out_csv)?;
    if fresh {
        let mut w = csv::Writer::from_writer(&mut csv_out);
        w.write_record(AGENT_HEADER)?;
        w.flush()?;
        drop(w);
        csv_out.flush()?;
    }
    let mut transcript_out = match &job.transcripts {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(open_append(p)?.0)
        }
        None => None,
    };

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = job.concurrency.max(1).min(pending.len().max(1));
    let (tx, rx) = mpsc::channel::<Result<Done>>();

    let write_result: Result<()> = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort, pending) = (&next, &abort, &pending);
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(record) = pending.get(i) else { break };
                if tx.send(annotate(job, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(&mut csv_out);
        for done in rx {
            let step = (|| -> Result<()> {
                let done = done?;
                writer.serialize(&done.row)?;
                writer.flush()?;
                if let (Some(out), Some(line)) = (transcript_out.as_mut(), done.transcript.as_deref()) {
                    out.write_all(line.as_bytes())?;
                    out.write_all(b"\n")?;
                    out.flush()?;
                }
                progress.completed += 1;
                progress.attempts += u64::from(done.attempts);
                match done.vote.parse_status() {
                    agentvote_core::ParseStatus::Invalid => progress.invalid += 1,
                    agentvote_core::ParseStatus::Repaired => progress.repaired += 1,
                    agentvote_core::ParseStatus::Ok => {}
                }
                Ok(())
            })();
            if let Err(e) = step {
                abort.store(true, Ordering::Relaxed);
                return Err(e);
            }
        }
        Ok(())
    });
    write_result.with_context(|| format!("agent {}: checkpoint write failed", job.agent_id))?;
    drop(csv_out);
    drop(transcript_out);

    // Final pass: corpus order, one row per case. Rows for cases outside
    // this corpus are kept at the end.
    let mut rows = read_agent_table(&job.out_csv)?;
    rows.sort_by_key(|r| order.get(r.case_id.as_str()).copied().unwrap_or(usize::MAX));
    rows.dedup_by(|a, b| a.case_id == b.case_id);
    write_agent_table(&job.out_csv, &rows)?;

    progress.elapsed_ms = start.elapsed().as_millis() as u64;
    Ok(progress)
}

/// Writes one JSON value per line to a fresh file.
pub fn write_jsonl<T: Serialize>(path: &std::path::Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        append_jsonl(&mut out, item)?;
    }
    out.flush()?;
    Ok(())
}
