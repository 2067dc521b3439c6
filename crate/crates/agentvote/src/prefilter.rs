//! Word-boundary regex screening of reports before they reach the agents.

use std::collections::HashSet;
use std::io::Write;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusRecord;

/// Fibrillation and its spelling variants, abbreviations and typos.
pub const FIBRILLATION_PATTERN: &str = r"\b(([fF][ia]br[ia]l{1,2}a[tcs]i[oó]n)|([fF]ibri\.*)|(A[fF]ib)|(AF))\b";
pub const FLUTTER_PATTERN: &str = r"\b([fF]lutter|AFL)\b";
/// Verification filter with plain spellings only.
pub const ALT_FILTER_PLAIN: &str = r"\b(fibrillation|flutter|AFib|AFL|AF)\b";
/// Verification filter combining variants and flutter in one expression.
pub const ALT_FILTER_COMBINED: &str = r"\b([fF][ia]br[ia]lla[tcs]ion|[fF]ibri\.*|[fF]lutter|A[fF]ib|AFL|AF)\b";

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("filter {id}: {source}")]
    Compile {
        id: String,
        #[source]
        source: regex::Error,
    },
    #[error("duplicate case_id {0:?} in corpus")]
    DuplicateCaseId(String),
    #[error("filter audit needs at least two filters, got {0}")]
    TooFewFilters(usize),
}

/// A relevance filter: a report is relevant when any pattern matches.
#[derive(Clone, Debug)]
pub struct CompiledFilter {
    pub filter_id: String,
    patterns: Vec<Regex>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    Irrelevant,
}

impl Relevance {
    pub fn as_str(self) -> &'static str {
        match self {
            Relevance::Relevant => "relevant",
            Relevance::Irrelevant => "irrelevant",
        }
    }
}

impl CompiledFilter {
    pub fn new<S: AsRef<str>>(filter_id: impl Into<String>, patterns: &[S]) -> Result<Self, FilterError> {
        let filter_id = filter_id.into();
        let patterns = patterns
            .iter()
            .map(|p| {
                Regex::new(p.as_ref()).map_err(|source| FilterError::Compile {
                    id: filter_id.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CompiledFilter { filter_id, patterns })
    }

    pub fn patterns(&self) -> impl Iterator<Item = &str> {
        self.patterns.iter().map(|r| r.as_str())
    }

    pub fn classify(&self, report_text: &str) -> Relevance {
        if self.patterns.iter().any(|p| p.is_match(report_text)) {
            Relevance::Relevant
        } else {
            Relevance::Irrelevant
        }
    }

    /// Every matched token, pattern by pattern, in text order.
    pub fn matched_tokens(&self, report_text: &str) -> Vec<String> {
        self.patterns
            .iter()
            .flat_map(|p| p.find_iter(report_text).map(|m| m.as_str().to_string()))
            .collect()
    }
}

/// The production filter: fibrillation variants OR flutter.
pub fn compile_af_filter() -> Result<CompiledFilter, FilterError> {
    CompiledFilter::new("af_main", &[FIBRILLATION_PATTERN, FLUTTER_PATTERN])
}

pub fn compile_alt_filters() -> Result<[CompiledFilter; 2], FilterError> {
    Ok([
        CompiledFilter::new("af_alt_plain", &[ALT_FILTER_PLAIN])?,
        CompiledFilter::new("af_alt_combined", &[ALT_FILTER_COMBINED])?,
    ])
}

pub fn classify_relevance(report_text: &str, filter: &CompiledFilter) -> Relevance {
    filter.classify(report_text)
}

/// Relevant and irrelevant case ids, each in corpus order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPartition {
    pub relevant_ids: Vec<String>,
    pub irrelevant_ids: Vec<String>,
}

impl CorpusPartition {
    pub fn n_relevant(&self) -> usize {
        self.relevant_ids.len()
    }

    pub fn n_irrelevant(&self) -> usize {
        self.irrelevant_ids.len()
    }

    pub fn total(&self) -> usize {
        self.n_relevant() + self.n_irrelevant()
    }

    /// Every case in corpus order with its side of the partition.
    pub fn write_csv<W: Write>(&self, order: &[String], out: W) -> csv::Result<()> {
        let relevant: HashSet<&str> = self.relevant_ids.iter().map(String::as_str).collect();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["case_id", "relevance"])?;
        for id in order {
            let side = if relevant.contains(id.as_str()) {
                Relevance::Relevant
            } else {
                Relevance::Irrelevant
            };
            w.write_record([id.as_str(), side.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Splits the corpus in one pass.
pub fn partition_corpus<'a, I>(corpus: I, filter: &CompiledFilter) -> Result<CorpusPartition, FilterError>
where
    I: IntoIterator<Item = &'a CorpusRecord>,
{
    let mut seen = HashSet::new();
    let mut partition = CorpusPartition::default();
    for record in corpus {
        if !seen.insert(record.case_id.as_str()) {
            return Err(FilterError::DuplicateCaseId(record.case_id.clone()));
        }
        match filter.classify(&record.report_text) {
            Relevance::Relevant => partition.relevant_ids.push(record.case_id.clone()),
            Relevance::Irrelevant => partition.irrelevant_ids.push(record.case_id.clone()),
        }
    }
    Ok(partition)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub case_id: String,
    pub filter_id_a: String,
    pub filter_id_b: String,
    pub verdict_a: Relevance,
    pub verdict_b: Relevance,
    pub tokens_a: Vec<String>,
    pub tokens_b: Vec<String>,
}

/// Every (case, filter pair) on which two filters disagree about relevance.
pub fn filter_audit<'a, I>(corpus: I, filters: &[CompiledFilter]) -> Result<Vec<Disagreement>, FilterError>
where
    I: IntoIterator<Item = &'a CorpusRecord>,
{
    if filters.len() < 2 {
        return Err(FilterError::TooFewFilters(filters.len()));
    }
    let mut out = Vec::new();
    for record in corpus {
        let verdicts: Vec<Relevance> = filters.iter().map(|f| f.classify(&record.report_text)).collect();
        for a in 0..filters.len() {
            for b in a + 1..filters.len() {
                if verdicts[a] != verdicts[b] {
                    out.push(Disagreement {
                        case_id: record.case_id.clone(),
                        filter_id_a: filters[a].filter_id.clone(),
                        filter_id_b: filters[b].filter_id.clone(),
                        verdict_a: verdicts[a],
                        verdict_b: verdicts[b],
                        tokens_a: filters[a].matched_tokens(&record.report_text),
                        tokens_b: filters[b].matched_tokens(&record.report_text),
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn write_audit_jsonl<W: Write>(report: &[Disagreement], mut out: W) -> std::io::Result<()> {
    for d in report {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
