//! CSV tables written by agent runs, the vote stage and exports.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use agentvote_core::vote::{AgentVote, EnsembleDecision, ParseStatus};
use agentvote_core::TaskSchema;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const AGENT_HEADER: [&str; 7] = [
    "case_id",
    "agent_id",
    "raw_category",
    "final_label",
    "af_pr",
    "parse_status",
    "explanation",
];

pub const FINAL_HEADER: [&str; 5] = ["case_id", "final_label", "source", "min_votes", "winning_votes"];

/// One row of a per-agent annotation table. For invalid votes the
/// explanation column carries the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub case_id: String,
    pub agent_id: String,
    pub raw_category: String,
    pub final_label: String,
    pub af_pr: String,
    pub parse_status: String,
    pub explanation: String,
}

fn format_score(p: f64) -> String {
    let s = format!("{p:.4}");
    let s = s.trim_end_matches('0');
    let s = s.strip_suffix('.').map_or(s.to_string(), |t| format!("{t}.0"));
    s
}

impl AgentRow {
    pub fn from_vote(vote: &AgentVote, schema: &TaskSchema) -> Self {
        let status = vote.parse_status();
        AgentRow {
            case_id: vote.case_id.clone(),
            agent_id: vote.agent_id.clone(),
            raw_category: vote.raw().map(|r| schema.raw_name(r).to_string()).unwrap_or_default(),
            final_label: vote
                .final_label(schema)
                .map(|l| schema.label_name(l).to_string())
                .unwrap_or_default(),
            af_pr: vote.af_pr().map(format_score).unwrap_or_default(),
            parse_status: status.as_str().to_string(),
            explanation: if status == ParseStatus::Invalid {
                vote.reason.clone().unwrap_or_default()
            } else {
                vote.explanation.clone()
            },
        }
    }

    pub fn to_vote(&self, schema: &TaskSchema) -> Result<AgentVote> {
        let status = ParseStatus::parse(&self.parse_status)
            .with_context(|| format!("case {}: unknown parse_status {:?}", self.case_id, self.parse_status))?;
        if status == ParseStatus::Invalid {
            return Ok(AgentVote::invalid(&self.case_id, &self.agent_id, &self.explanation));
        }
        let Some(raw) = schema.parse_raw_category(&self.raw_category) else {
            bail!(
                "case {} agent {}: raw category {:?} is not in the schema",
                self.case_id,
                self.agent_id,
                self.raw_category
            );
        };
        let af_pr = if self.af_pr.is_empty() {
            None
        } else {
            Some(
                self.af_pr
                    .parse::<f64>()
                    .with_context(|| format!("case {}: bad af_pr {:?}", self.case_id, self.af_pr))?,
            )
        };
        Ok(AgentVote::valid(
            &self.case_id,
            &self.agent_id,
            raw,
            af_pr,
            &self.explanation,
            status == ParseStatus::Repaired,
        )?)
    }
}

pub fn read_agent_table(path: &Path) -> Result<Vec<AgentRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers != AGENT_HEADER {
        bail!("{}: unexpected header {}", path.display(), headers.join(","));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{}: record {}", path.display(), i + 1)))
        .collect()
}

/// Writes a complete agent table, replacing any existing file atomically.
pub fn write_agent_table(path: &Path, rows: &[AgentRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(File::create(&tmp)?));
        w.write_record(AGENT_HEADER)?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn decision_header(schema: &TaskSchema) -> Vec<String> {
    let mut h: Vec<String> = ["case_id", "outcome", "min_votes", "winning_votes", "n_valid", "invalid_count"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(schema.valid_set().iter().cloned());
    h
}

pub fn write_decisions<W: Write>(out: W, decisions: &[EnsembleDecision], schema: &TaskSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(decision_header(schema))?;
    for d in decisions {
        let mut rec = vec![
            d.case_id.clone(),
            schema.final_name(d.outcome).to_string(),
            d.min_votes.to_string(),
            d.winning_votes.to_string(),
            d.tally.n_valid().to_string(),
            d.tally.invalid_count().to_string(),
        ];
        rec.extend(d.tally.counts().iter().map(|c| c.to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    DefaultFilter,
    Ensemble,
    HumanReview,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::DefaultFilter => "default_filter",
            Source::Ensemble => "ensemble",
            Source::HumanReview => "human_review",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default_filter" => Ok(Source::DefaultFilter),
            "ensemble" => Ok(Source::Ensemble),
            "human_review" => Ok(Source::HumanReview),
            _ => Err(format!("unknown source {s:?}")),
        }
    }
}

/// One row of the final labeled dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalRow {
    pub case_id: String,
    pub final_label: String,
    pub source: Source,
    pub min_votes: Option<u32>,
    pub winning_votes: Option<u32>,
}

pub fn write_final_table<W: Write>(out: W, rows: &[FinalRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(FINAL_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_final_table(path: &Path) -> Result<Vec<FinalRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{}: record {}", path.display(), i + 1)))
        .collect()
}
