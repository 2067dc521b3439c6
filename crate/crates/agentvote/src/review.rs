//! Human review queue.
//!
//! State lives in an append-only JSON-lines event log: an `enqueue` line per
//! case, then `adjudicate` and `reopen` lines. Opening the store replays the
//! log, so a crash never leaves a half-written state behind.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use agentvote_core::TaskSchema;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::append_jsonl;
use crate::tables::{FinalRow, Source};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("case {0:?} is not in the review queue")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{path}:{line}: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewReason {
    /// Two or more labels share the top count.
    Tie,
    /// A unique winner that did not reach the threshold.
    BelowThreshold,
    /// The ensemble settled on a label the task routes to review.
    FlagLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Adjudicated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewVote {
    pub agent_id: String,
    pub raw_category: String,
    pub final_label: String,
    pub af_pr: Option<f64>,
    pub parse_status: String,
    pub explanation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub case_id: String,
    pub report_text: String,
    /// The machine outcome, e.g. `Review` or a flagged label.
    pub machine_outcome: String,
    pub reason: ReviewReason,
    pub min_votes: u32,
    pub winning_votes: u32,
    /// Valid votes per label, plus the invalid count.
    pub tally: BTreeMap<String, u32>,
    pub invalid_votes: u32,
    pub votes: Vec<ReviewVote>,
    pub status: ReviewStatus,
    #[serde(default)]
    pub human_label: Option<String>,
    #[serde(default)]
    pub reviewer: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub adjudicated_at: Option<DateTime<Utc>>,
}

/// Log entries. Each transition records the state it replaced.
#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Enqueue {
        item: ReviewItem,
    },
    Adjudicate {
        case_id: String,
        label: String,
        reviewer: String,
        #[serde(default)]
        note: String,
        at: DateTime<Utc>,
        prior_status: ReviewStatus,
    },
    Reopen {
        case_id: String,
        reviewer: String,
        at: DateTime<Utc>,
        prior_label: Option<String>,
        prior_reviewer: Option<String>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total: usize,
    pub pending: usize,
    pub adjudicated: usize,
    pub by_reason: BTreeMap<String, usize>,
    pub adjudicated_by_label: BTreeMap<String, usize>,
    /// Adjudications matching the agents' most common valid label, when that
    /// label is unique.
    pub agree_with_plurality: usize,
}

/// One row of the merged export: the machine table with adjudications
/// applied. `pending` marks cases still awaiting a reviewer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRow {
    pub case_id: String,
    pub final_label: String,
    pub source: Source,
    pub min_votes: Option<u32>,
    pub winning_votes: Option<u32>,
    pub pending: bool,
}

pub struct ReviewStore {
    path: PathBuf,
    schema: TaskSchema,
    order: Vec<String>,
    items: BTreeMap<String, ReviewItem>,
}

impl ReviewStore {
    pub fn open(path: impl Into<PathBuf>, schema: TaskSchema) -> Result<Self, ReviewError> {
        let path = path.into();
        let mut store = ReviewStore {
            path,
            schema,
            order: Vec::new(),
            items: BTreeMap::new(),
        };
        if store.path.exists() {
            let reader = BufReader::new(File::open(&store.path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let path = store.path.clone();
                let corrupt = |detail: String| ReviewError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    detail,
                };
                let event: Event = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                store.apply(event).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn apply(&mut self, event: Event) -> Result<(), ReviewError> {
        match event {
            Event::Enqueue { item } => {
                if !self.items.contains_key(&item.case_id) {
                    self.order.push(item.case_id.clone());
                    self.items.insert(item.case_id.clone(), item);
                }
            }
            Event::Adjudicate {
                case_id,
                label,
                reviewer,
                note,
                at,
                ..
            } => {
                let item = self.items.get_mut(&case_id).ok_or(ReviewError::NotFound(case_id))?;
                item.status = ReviewStatus::Adjudicated;
                item.human_label = Some(label);
                item.reviewer = Some(reviewer);
                item.note = (!note.is_empty()).then_some(note);
                item.adjudicated_at = Some(at);
            }
            Event::Reopen { case_id, .. } => {
                let item = self.items.get_mut(&case_id).ok_or(ReviewError::NotFound(case_id))?;
                item.status = ReviewStatus::Pending;
                item.human_label = None;
                item.reviewer = None;
                item.note = None;
                item.adjudicated_at = None;
            }
        }
        Ok(())
    }

    fn append(&self, event: &Event) -> Result<(), ReviewError> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        // One write per line keeps each event whole.
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    /// Adds a case unless it is already queued. Returns whether it was new.
    pub fn enqueue(&mut self, item: ReviewItem) -> Result<bool, ReviewError> {
        if self.items.contains_key(&item.case_id) {
            return Ok(false);
        }
        let event = Event::Enqueue { item };
        self.append(&event)?;
        self.apply(event)?;
        Ok(true)
    }

    pub fn get(&self, case_id: &str) -> Option<&ReviewItem> {
        self.items.get(case_id)
    }

    /// Items in enqueue order, optionally filtered by status.
    pub fn queue(&self, status: Option<ReviewStatus>) -> Vec<&ReviewItem> {
        self.order
            .iter()
            .map(|id| &self.items[id])
            .filter(|it| status.is_none_or(|s| it.status == s))
            .collect()
    }

    pub fn submit_adjudication(
        &mut self,
        case_id: &str,
        label: &str,
        reviewer: &str,
        note: &str,
    ) -> Result<ReviewItem, ReviewError> {
        let item = self
            .items
            .get(case_id)
            .ok_or_else(|| ReviewError::NotFound(case_id.to_string()))?;
        if reviewer.trim().is_empty() {
            return Err(ReviewError::Validation("reviewer must not be empty".into()));
        }
        if self.schema.label_id(label).is_none() {
            return Err(ReviewError::Validation(format!(
                "label {label:?} is not one of {:?}",
                self.schema.valid_set()
            )));
        }
        if item.status == ReviewStatus::Adjudicated {
            return Err(ReviewError::Conflict(format!(
                "case {case_id:?} is already adjudicated; reopen it first"
            )));
        }
        let event = Event::Adjudicate {
            case_id: case_id.to_string(),
            label: label.to_string(),
            reviewer: reviewer.to_string(),
            note: note.to_string(),
            at: Utc::now(),
            prior_status: item.status,
        };
        self.append(&event)?;
        self.apply(event)?;
        Ok(self.items[case_id].clone())
    }

    pub fn reopen(&mut self, case_id: &str, reviewer: &str) -> Result<ReviewItem, ReviewError> {
        let item = self
            .items
            .get(case_id)
            .ok_or_else(|| ReviewError::NotFound(case_id.to_string()))?;
        if item.status == ReviewStatus::Pending {
            return Err(ReviewError::Conflict(format!("case {case_id:?} is not adjudicated")));
        }
        let event = Event::Reopen {
            case_id: case_id.to_string(),
            reviewer: reviewer.to_string(),
            at: Utc::now(),
            prior_label: item.human_label.clone(),
            prior_reviewer: item.reviewer.clone(),
        };
        self.append(&event)?;
        self.apply(event)?;
        Ok(self.items[case_id].clone())
    }

    pub fn stats(&self) -> ReviewStats {
        let mut s = ReviewStats {
            total: self.items.len(),
            ..Default::default()
        };
        for item in self.items.values() {
            let reason = serde_json::to_value(item.reason).expect("enum serializes");
            *s.by_reason.entry(reason.as_str().unwrap_or_default().to_string()).or_default() += 1;
            match &item.human_label {
                None => s.pending += 1,
                Some(label) => {
                    s.adjudicated += 1;
                    *s.adjudicated_by_label.entry(label.clone()).or_default() += 1;
                    if plurality(&item.votes).as_deref() == Some(label.as_str()) {
                        s.agree_with_plurality += 1;
                    }
                }
            }
        }
        s
    }

    /// Applies adjudications to the machine table. Rows are not reordered.
    pub fn export_final(&self, machine: &[FinalRow]) -> Vec<ExportRow> {
        machine
            .iter()
            .map(|row| {
                let item = self.items.get(&row.case_id);
                match item.and_then(|it| it.human_label.as_ref()) {
                    Some(label) => ExportRow {
                        case_id: row.case_id.clone(),
                        final_label: label.clone(),
                        source: Source::HumanReview,
                        min_votes: row.min_votes,
                        winning_votes: row.winning_votes,
                        pending: false,
                    },
                    None => ExportRow {
                        case_id: row.case_id.clone(),
                        final_label: row.final_label.clone(),
                        source: row.source,
                        min_votes: row.min_votes,
                        winning_votes: row.winning_votes,
                        pending: item.is_some(),
                    },
                }
            })
            .collect()
    }
}

fn plurality(votes: &[ReviewVote]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in votes.iter().filter(|v| !v.final_label.is_empty()) {
        *counts.entry(v.final_label.as_str()).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let mut winners = counts.iter().filter(|(_, &c)| c == top);
    let first = winners.next()?;
    winners.next().is_none().then(|| first.0.to_string())
}

pub const EXPORT_HEADER: [&str; 6] = ["case_id", "final_label", "source", "min_votes", "winning_votes", "pending"];

pub fn write_export_csv<W: Write>(out: W, rows: &[ExportRow]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(EXPORT_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the merged export to `path` atomically.
pub fn write_export_file(path: &Path, rows: &[ExportRow]) -> anyhow::Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        write_export_csv(&mut f, rows)?;
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Writes a snapshot of every item as JSON lines.
pub fn write_snapshot(store: &ReviewStore, path: &Path) -> anyhow::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for item in store.queue(None) {
        append_jsonl(&mut f, item)?;
    }
    f.flush()?;
    Ok(())
}
