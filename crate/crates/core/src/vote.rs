//! Vote tallying and the highest-vote-with-winning-threshold rule.
//!
//! Each agent casts one vote per case. Votes outside `V` (unparseable output,
//! transport failures, missing rows) count toward nothing but
//! `invalid_count`. The winner set is the argmax of the per-label counts; a
//! case is auto-labeled only when that set is a singleton whose count reaches
//! the integer threshold `min_votes` ("k of n"). Everything else is Review.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::{FinalLabel, LabelId, RawCategory, TaskSchema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Repaired,
    Invalid,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Ok => "ok",
            ParseStatus::Repaired => "repaired",
            ParseStatus::Invalid => "invalid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(ParseStatus::Ok),
            "repaired" => Some(ParseStatus::Repaired),
            "invalid" => Some(ParseStatus::Invalid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VoteError {
    #[error("agent {agent_id:?} voted twice on case {case_id:?}")]
    DoubleVote { case_id: String, agent_id: String },
    #[error("vote list mixes case {expected:?} with case {found:?}")]
    MixedCases { expected: String, found: String },
    #[error("a tally needs at least one agent")]
    NoAgents,
    #[error("threshold {k} exceeds committee size {n}")]
    ThresholdExceedsCommittee { k: u32, n: u32 },
    #[error("threshold list must be sorted ascending, got {0:?}")]
    UnsortedThresholds(Vec<u32>),
    #[error("winning ratio {0} is outside [0, 1]")]
    RatioOutOfRange(f64),
    #[error("af_pr {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("tally has {found} label counts but the schema declares {expected}")]
    LabelCountMismatch { expected: usize, found: usize },
}

/// One agent's parsed verdict on one case.
///
/// The raw category is present exactly when the parse status is not
/// [`ParseStatus::Invalid`]; the constructors enforce this.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentVote {
    pub case_id: String,
    pub agent_id: String,
    raw: Option<RawCategory>,
    af_pr: Option<f64>,
    pub explanation: String,
    status: ParseStatus,
    /// Why a vote is invalid (transport failure, unknown category, ...).
    pub reason: Option<String>,
}

impl AgentVote {
    pub fn valid(
        case_id: impl Into<String>,
        agent_id: impl Into<String>,
        raw: RawCategory,
        af_pr: Option<f64>,
        explanation: impl Into<String>,
        repaired: bool,
    ) -> Result<Self, VoteError> {
        if let Some(p) = af_pr {
            if !(0.0..=1.0).contains(&p) {
                return Err(VoteError::ScoreOutOfRange(p));
            }
        }
        Ok(AgentVote {
            case_id: case_id.into(),
            agent_id: agent_id.into(),
            raw: Some(raw),
            af_pr,
            explanation: explanation.into(),
            status: if repaired {
                ParseStatus::Repaired
            } else {
                ParseStatus::Ok
            },
            reason: None,
        })
    }

    pub fn invalid(
        case_id: impl Into<String>,
        agent_id: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        AgentVote {
            case_id: case_id.into(),
            agent_id: agent_id.into(),
            raw: None,
            af_pr: None,
            explanation: String::new(),
            status: ParseStatus::Invalid,
            reason: Some(reason.into()),
        }
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>) -> Self {
        self.explanation = explanation.into();
        self
    }

    pub fn raw(&self) -> Option<RawCategory> {
        self.raw
    }

    pub fn af_pr(&self) -> Option<f64> {
        self.af_pr
    }

    pub fn parse_status(&self) -> ParseStatus {
        self.status
    }

    /// The postprocessed label, or `None` for invalid votes and raw
    /// categories foreign to `schema`.
    pub fn final_label(&self, schema: &TaskSchema) -> Option<LabelId> {
        self.raw.and_then(|r| schema.postprocess(r).ok())
    }
}

/// Per-case vote counts over `V`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    counts: Vec<u32>,
    invalid_count: u32,
    n_agents: u32,
}

impl VoteTally {
    /// Tallies already-postprocessed votes; `None` entries are invalid.
    pub fn from_labels<I>(n_labels: usize, votes: I) -> Self
    where
        I: IntoIterator<Item = Option<LabelId>>,
    {
        let mut counts = alloc::vec![0u32; n_labels];
        let mut invalid_count = 0;
        let mut n_agents = 0;
        for v in votes {
            n_agents += 1;
            match v {
                Some(id) if id.index() < n_labels => counts[id.index()] += 1,
                _ => invalid_count += 1,
            }
        }
        VoteTally {
            counts,
            invalid_count,
            n_agents,
        }
    }

    /// Rebuilds a tally from persisted counts. The committee size is the sum.
    pub fn from_counts(counts: Vec<u32>, invalid_count: u32) -> Self {
        let n_agents = counts.iter().sum::<u32>() + invalid_count;
        VoteTally {
            counts,
            invalid_count,
            n_agents,
        }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, label: LabelId) -> u32 {
        self.counts.get(label.index()).copied().unwrap_or(0)
    }

    pub fn invalid_count(&self) -> u32 {
        self.invalid_count
    }

    pub fn n_agents(&self) -> u32 {
        self.n_agents
    }

    /// Number of votes that landed in `V`.
    pub fn n_valid(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// The labels tied at the maximum count. Empty when no valid vote exists.
    pub fn winners(&self) -> Vec<LabelId> {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return Vec::new();
        }
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == max)
            .map(|(i, _)| LabelId::from_index(i))
            .collect()
    }
}

/// Counts votes for one case. Invalid votes and raw categories foreign to
/// the schema only increment `invalid_count`.
pub fn tally(votes: &[AgentVote], schema: &TaskSchema) -> Result<VoteTally, VoteError> {
    let mut seen = BTreeSet::new();
    if let Some(first) = votes.first() {
        for v in votes {
            if v.case_id != first.case_id {
                return Err(VoteError::MixedCases {
                    expected: first.case_id.clone(),
                    found: v.case_id.clone(),
                });
            }
            if !seen.insert(v.agent_id.as_str()) {
                return Err(VoteError::DoubleVote {
                    case_id: v.case_id.clone(),
                    agent_id: v.agent_id.clone(),
                });
            }
        }
    }
    Ok(VoteTally::from_labels(
        schema.n_labels(),
        votes.iter().map(|v| v.final_label(schema)),
    ))
}

/// What the winning count is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `votes(y) >= k`, with `k` out of the configured committee size.
    #[default]
    Committee,
    /// `votes(y) / n_valid >= k / n`: the threshold scales down when some
    /// agents produced no valid vote.
    ValidVotes,
}

/// The outcome of the ensemble rule for one case at one threshold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub case_id: String,
    pub outcome: FinalLabel,
    pub tally: VoteTally,
    pub winner_set_size: usize,
    pub winning_votes: u32,
    pub min_votes: u32,
}

impl EnsembleDecision {
    pub fn is_review(&self) -> bool {
        self.outcome.is_review()
    }
}

/// Converts a ratio threshold into the equivalent integer one: the smallest
/// count strictly above `theta * n`, or unanimity for `theta = 1`.
pub fn min_votes_for_ratio(theta: f64, n_agents: u32) -> Result<u32, VoteError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(VoteError::RatioOutOfRange(theta));
    }
    if theta == 1.0 {
        return Ok(n_agents);
    }
    // theta * n is non-negative, so truncation is floor.
    Ok(((theta * n_agents as f64) as u32 + 1).min(n_agents))
}

/// Applies the threshold rule to one tally.
pub fn decide(
    case_id: &str,
    tally: &VoteTally,
    min_votes: u32,
    denominator: Denominator,
) -> Result<EnsembleDecision, VoteError> {
    let n = tally.n_agents();
    if n == 0 {
        return Err(VoteError::NoAgents);
    }
    if min_votes > n {
        return Err(VoteError::ThresholdExceedsCommittee { k: min_votes, n });
    }
    let winners = tally.winners();
    let winning_votes = winners.first().map(|&w| tally.count(w)).unwrap_or(0);
    let meets = match denominator {
        Denominator::Committee => winning_votes >= min_votes,
        Denominator::ValidVotes => {
            u64::from(winning_votes) * u64::from(n) >= u64::from(min_votes) * u64::from(tally.n_valid())
        }
    };
    let outcome = match winners.as_slice() {
        [only] if meets => FinalLabel::Valid(*only),
        _ => FinalLabel::Review,
    };
    Ok(EnsembleDecision {
        case_id: case_id.into(),
        outcome,
        tally: tally.clone(),
        winner_set_size: winners.len(),
        winning_votes,
        min_votes,
    })
}

/// Decisions for every case at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTable {
    pub min_votes: u32,
    pub decisions: Vec<EnsembleDecision>,
}

impl DecisionTable {
    pub fn n_review(&self) -> usize {
        self.decisions.iter().filter(|d| d.is_review()).count()
    }
}

/// Tallies each case once and decides it at every threshold in `ks`.
pub fn sweep(
    cases: &[(String, Vec<AgentVote>)],
    ks: &[u32],
    schema: &TaskSchema,
    denominator: Denominator,
) -> Result<Vec<DecisionTable>, VoteError> {
    if ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(VoteError::UnsortedThresholds(ks.to_vec()));
    }
    let tallies = cases
        .iter()
        .map(|(id, votes)| tally(votes, schema).map(|t| (id.as_str(), t)))
        .collect::<Result<Vec<_>, _>>()?;
    ks.iter()
        .map(|&k| {
            let decisions = tallies
                .iter()
                .map(|(id, t)| decide(id, t, k, denominator))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DecisionTable {
                min_votes: k,
                decisions,
            })
        })
        .collect()
}
