//! Deterministic simulated agents and synthetic ECG corpora.
//!
//! A simulated agent draws a raw verdict from a per-truth-class emission row,
//! may inject one of four hallucination kinds, and may corrupt its JSON with
//! one of the fault shapes the repair pipeline knows. All randomness is keyed
//! by `(seed, case_id)`, so responses do not depend on scheduling.
//!
//! Injected hallucinations carry a tag at the start of the explanation
//! (`[[sim:<kind>]]`). Voting never reads explanations; the tag exists so
//! [`hallucination_audit`] has ground truth.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::label::{FinalLabel, LabelId, RawCategory, TaskSchema};
use crate::rng;
use crate::vote::AgentVote;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("profile {agent}: {detail}")]
    InvalidProfile { agent: String, detail: String },
    #[error("class mix: {0}")]
    InvalidMix(String),
    #[error("schema {0:?} lacks the raw categories the ECG template bank needs")]
    UnsupportedSchema(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationKind {
    FabricatedFact,
    UncertaintyConfusion,
    Misunderstanding,
    SelfContradiction,
}

impl HallucinationKind {
    pub const ALL: [HallucinationKind; 4] = [
        HallucinationKind::FabricatedFact,
        HallucinationKind::UncertaintyConfusion,
        HallucinationKind::Misunderstanding,
        HallucinationKind::SelfContradiction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HallucinationKind::FabricatedFact => "fabricated_fact",
            HallucinationKind::UncertaintyConfusion => "uncertainty_confusion",
            HallucinationKind::Misunderstanding => "misunderstanding",
            HallucinationKind::SelfContradiction => "self_contradiction",
        }
    }

    pub fn tag(self) -> String {
        format!("[[sim:{}]]", self.name())
    }

    /// Reads the side-channel tag off an explanation.
    pub fn detect(explanation: &str) -> Option<Self> {
        let rest = explanation.trim_start().strip_prefix("[[sim:")?;
        let name = &rest[..rest.find("]]")?];
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// JSON corruptions applied by simulated agents. Every shape is one the
/// repair pipeline recovers from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultShape {
    ProseWrap,
    CodeFence,
    SingleQuotes,
    TrailingComma,
    SmartQuotes,
    InteriorQuotes,
}

impl FaultShape {
    pub const ALL: [FaultShape; 6] = [
        FaultShape::ProseWrap,
        FaultShape::CodeFence,
        FaultShape::SingleQuotes,
        FaultShape::TrailingComma,
        FaultShape::SmartQuotes,
        FaultShape::InteriorQuotes,
    ];
}

/// Per-kind injection probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HallucinationRates {
    #[serde(default)]
    pub fabricated_fact: f64,
    #[serde(default)]
    pub uncertainty_confusion: f64,
    #[serde(default)]
    pub misunderstanding: f64,
    #[serde(default)]
    pub self_contradiction: f64,
}

impl HallucinationRates {
    pub fn get(&self, kind: HallucinationKind) -> f64 {
        match kind {
            HallucinationKind::FabricatedFact => self.fabricated_fact,
            HallucinationKind::UncertaintyConfusion => self.uncertainty_confusion,
            HallucinationKind::Misunderstanding => self.misunderstanding,
            HallucinationKind::SelfContradiction => self.self_contradiction,
        }
    }

    pub fn total(&self) -> f64 {
        HallucinationKind::ALL.iter().map(|&k| self.get(k)).sum()
    }

    /// Rates from per-kind event counts over `cases` annotated cases.
    pub fn from_counts(counts: [u32; 4], cases: u32) -> Self {
        let r = |c: u32| f64::from(c) / f64::from(cases);
        HallucinationRates {
            fabricated_fact: r(counts[0]),
            uncertainty_confusion: r(counts[1]),
            misunderstanding: r(counts[2]),
            self_contradiction: r(counts[3]),
        }
    }
}

/// Named committee member with a target accuracy and hallucination profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentPreset {
    pub agent_id: &'static str,
    pub accuracy: f64,
    /// Events per kind observed over 200 development cases.
    pub hallucination_events: [u32; 4],
}

/// Accuracy on the 600-case test set and hallucination counts on the
/// 200-case development set for the seven-model committee.
pub const REFERENCE_COMMITTEE: [AgentPreset; 7] = [
    AgentPreset { agent_id: "beluga70b", accuracy: 0.973, hallucination_events: [5, 1, 0, 0] },
    AgentPreset { agent_id: "gemma7b", accuracy: 0.925, hallucination_events: [7, 6, 0, 0] },
    AgentPreset { agent_id: "llama3-70b-inst", accuracy: 0.968, hallucination_events: [0, 1, 1, 1] },
    AgentPreset { agent_id: "mistral-openorca", accuracy: 0.957, hallucination_events: [1, 4, 4, 0] },
    AgentPreset { agent_id: "openhermes", accuracy: 0.933, hallucination_events: [2, 2, 2, 2] },
    AgentPreset { agent_id: "qwen72b", accuracy: 0.938, hallucination_events: [0, 2, 2, 1] },
    AgentPreset { agent_id: "qwen2-72b", accuracy: 0.978, hallucination_events: [1, 1, 1, 0] },
];

/// Size of the development set the hallucination counts come from.
pub const HALLUCINATION_REFERENCE_CASES: u32 = 200;

impl AgentPreset {
    pub fn hallucination_rates(&self) -> HallucinationRates {
        HallucinationRates::from_counts(self.hallucination_events, HALLUCINATION_REFERENCE_CASES)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAgentProfile {
    pub agent_id: String,
    /// `emission[truth][raw]`: row-stochastic over the schema's raw set.
    pub emission: Vec<Vec<f64>>,
    pub hallucination: HallucinationRates,
    pub malformed_json_rate: f64,
    pub seed: u64,
}

const ROW_TOLERANCE: f64 = 1e-9;

fn is_probability(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl SimAgentProfile {
    /// Emission rows with `accuracy` mass on the correct final label, spread
    /// evenly over its raw categories; the remainder is split evenly across
    /// the other labels and then their raw categories.
    pub fn with_accuracy(
        agent_id: impl Into<String>,
        schema: &TaskSchema,
        accuracy: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        let agent_id = agent_id.into();
        if !is_probability(accuracy) {
            return Err(SimError::InvalidProfile {
                agent: agent_id,
                detail: format!("accuracy {accuracy} outside [0, 1]"),
            });
        }
        let n_labels = schema.n_labels();
        let raws_of: Vec<Vec<RawCategory>> = schema
            .labels()
            .map(|l| {
                schema
                    .raw_categories()
                    .filter(|&r| schema.postprocess(r) == Ok(l))
                    .collect()
            })
            .collect();
        let mut emission = Vec::with_capacity(n_labels);
        for truth in schema.labels() {
            let mut row = alloc::vec![0.0; schema.raw_set().len()];
            let others = raws_of
                .iter()
                .enumerate()
                .filter(|(l, raws)| *l != truth.index() && !raws.is_empty())
                .count();
            for (l, raws) in raws_of.iter().enumerate() {
                if raws.is_empty() {
                    continue;
                }
                let label_mass = if l == truth.index() {
                    accuracy
                } else {
                    (1.0 - accuracy) / others as f64
                };
                for r in raws {
                    row[r.index()] = label_mass / raws.len() as f64;
                }
            }
            // A label no raw category maps to cannot be emitted: give it all
            // to the wrong labels, or to the correct one when it is alone.
            if raws_of[truth.index()].is_empty() || others == 0 {
                let mass: f64 = row.iter().sum();
                if mass > 0.0 {
                    row.iter_mut().for_each(|p| *p /= mass);
                }
            }
            emission.push(row);
        }
        let profile = SimAgentProfile {
            agent_id,
            emission,
            hallucination: HallucinationRates::default(),
            malformed_json_rate: 0.0,
            seed,
        };
        profile.validate(schema)?;
        Ok(profile)
    }

    /// Like [`Self::with_accuracy`] but with hallucinations on top. The base
    /// emission accuracy is raised so the overall accuracy stays near
    /// `accuracy`, treating every hallucination as an error; it is capped at 1.
    pub fn calibrated(
        agent_id: impl Into<String>,
        schema: &TaskSchema,
        accuracy: f64,
        hallucination: HallucinationRates,
        seed: u64,
    ) -> Result<Self, SimError> {
        let h = hallucination.total();
        let base = if h < 1.0 { (accuracy / (1.0 - h)).min(1.0) } else { 1.0 };
        let mut profile = Self::with_accuracy(agent_id, schema, base, seed)?;
        profile.hallucination = hallucination;
        profile.validate(schema)?;
        Ok(profile)
    }

    pub fn from_preset(preset: &AgentPreset, schema: &TaskSchema, seed: u64) -> Result<Self, SimError> {
        Self::calibrated(preset.agent_id, schema, preset.accuracy, preset.hallucination_rates(), seed)
    }

    pub fn validate(&self, schema: &TaskSchema) -> Result<(), SimError> {
        let bad = |detail: String| SimError::InvalidProfile {
            agent: self.agent_id.clone(),
            detail,
        };
        if self.emission.len() != schema.n_labels() {
            return Err(bad(format!(
                "{} emission rows for {} labels",
                self.emission.len(),
                schema.n_labels()
            )));
        }
        for (t, row) in self.emission.iter().enumerate() {
            if row.len() != schema.raw_set().len() {
                return Err(bad(format!("emission row {t} has {} entries", row.len())));
            }
            if let Some(p) = row.iter().find(|p| !is_probability(**p)) {
                return Err(bad(format!("emission row {t} has probability {p}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(bad(format!("emission row {t} sums to {sum}")));
            }
        }
        for kind in HallucinationKind::ALL {
            let p = self.hallucination.get(kind);
            if !is_probability(p) {
                return Err(bad(format!("{} rate {p}", kind.name())));
            }
        }
        if self.hallucination.total() > 1.0 + ROW_TOLERANCE {
            return Err(bad("hallucination rates sum above 1".into()));
        }
        if !is_probability(self.malformed_json_rate) {
            return Err(bad(format!("malformed_json_rate {}", self.malformed_json_rate)));
        }
        Ok(())
    }
}

/// One generated report with its ground truth. `wording` is the raw category
/// the report text was written to express.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub case_id: String,
    pub report_text: String,
    pub truth: LabelId,
    pub wording: RawCategory,
}

/// Raw categories of the ECG task that the template bank and the
/// hallucination transforms refer to.
#[derive(Clone, Copy, Debug)]
struct EcgRaws {
    af: RawCategory,
    probable: RawCategory,
    possible: RawCategory,
    not_af: RawCategory,
    not_specified: RawCategory,
}

impl EcgRaws {
    fn of(schema: &TaskSchema) -> Option<Self> {
        Some(EcgRaws {
            af: schema.parse_raw_category("AF")?,
            probable: schema.parse_raw_category("Probable AF")?,
            possible: schema.parse_raw_category("Possible AF")?,
            not_af: schema.parse_raw_category("Not AF")?,
            not_specified: schema.parse_raw_category("Not Specified")?,
        })
    }
}

const AF_REPORTS: &[&str] = &[
    "Atrial fibrillation with rapid ventricular response. Nonspecific ST-T wave changes.",
    "Atrial flutter with variable AV block.",
    "Atrial fibrillation with controlled ventricular response. Left axis deviation.",
    "Ventricular paced rhythm. Underlying atrial fibrillation/flutter. Compared to the previous tracing there is no change.",
    "AFib with premature ventricular contractions. Low QRS voltages in precordial leads.",
    "Atrial fibrillation/flutter. Incomplete right bundle-branch block.",
];

const PROBABLE_REPORTS: &[&str] = &[
    "Probable atrial fibrillation. Nonspecific T wave abnormality.",
    "Rhythm is most likely atrial flutter with 2:1 conduction.",
    "Irregular rhythm consistent with atrial fibrillation.",
];

const POSSIBLE_REPORTS: &[&str] = &[
    "Possible atrial fibrillation. Borderline ECG.",
    "Irregular supraventricular rhythm, may be atrial flutter.",
    "Sinus rhythm with frequent PACs versus atrial fibrillation; cannot exclude AF.",
];

const NOT_AF_MENTIONS: &[&str] = &[
    "Sinus rhythm. Atrial fibrillation is no longer present compared to the previous tracing.",
    "Ectopic atrial rhythm has replaced atrial flutter. Prolonged QT interval.",
    "Normal sinus rhythm. History of AFib noted, not present on this tracing.",
];

const NOT_AF_PLAIN: &[&str] = &[
    "Sinus bradycardia. Otherwise normal ECG.",
    "Normal sinus rhythm. Normal ECG.",
    "Sinus tachycardia. Left ventricular hypertrophy with repolarization abnormality.",
    "Atrial tachycardia. Nonspecific ST depression.",
    "Ventricular tachycardia. Consider acute ischemia.",
];

const NOT_SPECIFIED_REPORTS: &[&str] = &[
    "Clinical indication: I48.91 unspecified atrial fibrillation. Please see final interpretation under scanned ECG.",
    "Compared to the previous tracing of atrial fibrillation, see prior report for rhythm interpretation.",
    "Rhythm strip for AF follow-up; no interpretation provided for the current tracing.",
];

const TRAILERS: &[&str] = &[
    "",
    " Compared to the previous tracing the rate is increased.",
    " Findings are otherwise similar.",
    " Diffuse nonspecific ST-T wave changes.",
];

/// Per-class counts for `n` cases by largest-remainder rounding.
///
/// Proportions within 1% of summing to one are renormalized, since published
/// percentages are themselves rounded; anything further off is rejected.
pub fn class_counts(n: usize, mix: &[f64]) -> Result<Vec<usize>, SimError> {
    if mix.is_empty() {
        return Err(SimError::InvalidMix("empty mix".into()));
    }
    if let Some(p) = mix.iter().find(|p| !is_probability(**p)) {
        return Err(SimError::InvalidMix(format!("proportion {p} outside [0, 1]")));
    }
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 0.01 {
        return Err(SimError::InvalidMix(format!("proportions sum to {sum}")));
    }
    let quotas: Vec<f64> = mix.iter().map(|p| p / sum * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| *q as usize).collect();
    let mut remaining = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..mix.len()).collect();
    // Largest fractional part first; ties go to the earlier class.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    Ok(counts)
}

fn pick<'a, R: Rng>(rng: &mut R, bank: &[&'a str]) -> &'a str {
    bank[rng.random_range(0..bank.len())]
}

/// Generates `n` ECG-style reports with class proportions `mix` (aligned with
/// the schema's valid set). Deterministic in `seed`.
pub fn generate_corpus(
    n: usize,
    mix: &[f64],
    seed: u64,
    schema: &TaskSchema,
) -> Result<Vec<SyntheticCase>, SimError> {
    let raws = EcgRaws::of(schema).ok_or_else(|| SimError::UnsupportedSchema(schema.task_id().into()))?;
    if mix.len() != schema.n_labels() {
        return Err(SimError::InvalidMix(format!(
            "{} proportions for {} labels",
            mix.len(),
            schema.n_labels()
        )));
    }
    let counts = class_counts(n, mix)?;
    let mut truths: Vec<LabelId> = counts
        .iter()
        .enumerate()
        .flat_map(|(l, &c)| core::iter::repeat_n(LabelId::from_index(l), c))
        .collect();
    let mut rng = rng::seeded(seed);
    for i in (1..truths.len()).rev() {
        let j = rng.random_range(0..=i);
        truths.swap(i, j);
    }

    let label_of = |r: RawCategory| schema.postprocess(r).expect("ECG raws are in the schema");
    let mut cases = Vec::with_capacity(n);
    for (i, truth) in truths.into_iter().enumerate() {
        let candidates: Vec<RawCategory> = [raws.af, raws.probable, raws.possible, raws.not_af, raws.not_specified]
            .into_iter()
            .filter(|&r| label_of(r) == truth)
            .collect();
        let wording = if candidates.contains(&raws.af) && candidates.contains(&raws.probable) {
            if rng.random::<f64>() < 0.8 { raws.af } else { raws.probable }
        } else if candidates.contains(&raws.possible) && candidates.contains(&raws.not_specified) {
            if rng.random::<f64>() < 0.6 { raws.possible } else { raws.not_specified }
        } else {
            candidates[rng.random_range(0..candidates.len())]
        };
        let body = if wording == raws.af {
            pick(&mut rng, AF_REPORTS)
        } else if wording == raws.probable {
            pick(&mut rng, PROBABLE_REPORTS)
        } else if wording == raws.possible {
            pick(&mut rng, POSSIBLE_REPORTS)
        } else if wording == raws.not_af {
            if rng.random::<bool>() {
                pick(&mut rng, NOT_AF_MENTIONS)
            } else {
                pick(&mut rng, NOT_AF_PLAIN)
            }
        } else {
            pick(&mut rng, NOT_SPECIFIED_REPORTS)
        };
        let trailer = pick(&mut rng, TRAILERS);
        cases.push(SyntheticCase {
            case_id: format!("case-{:06}", i + 1),
            report_text: format!("{body}{trailer}"),
            truth,
            wording,
        });
    }
    Ok(cases)
}

/// A simulated completion plus its hidden provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SimResponse {
    pub text: String,
    pub vote: RawCategory,
    pub hallucination: Option<HallucinationKind>,
    pub fault: Option<FaultShape>,
}

fn score_for(schema: &TaskSchema, raw: RawCategory) -> f64 {
    match crate::label::canonicalize(schema.raw_name(raw)).as_str() {
        "af" => 1.0,
        "probable af" => 0.9,
        "possible af" => 0.5,
        "not af" => 0.0,
        "not specified" => 0.5,
        _ => {
            if schema.postprocess(raw) == Ok(schema.positive_class()) {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn wrong_raws(schema: &TaskSchema, truth: LabelId) -> Vec<RawCategory> {
    schema
        .raw_categories()
        .filter(|&r| schema.postprocess(r) != Ok(truth))
        .collect()
}

fn first_raw_of(schema: &TaskSchema, label: LabelId) -> Option<RawCategory> {
    schema.raw_categories().find(|&r| schema.postprocess(r) == Ok(label))
}

/// The raw categories a hallucination of `kind` may turn `drawn` into; one
/// is chosen uniformly.
fn hallucination_candidates(
    kind: HallucinationKind,
    drawn: RawCategory,
    truth: LabelId,
    schema: &TaskSchema,
) -> Vec<RawCategory> {
    let ecg = EcgRaws::of(schema);
    let wrong = wrong_raws(schema, truth);
    let positive = schema.positive_class();
    let fallback = |wrong: Vec<RawCategory>| if wrong.is_empty() { alloc::vec![drawn] } else { wrong };
    match kind {
        HallucinationKind::FabricatedFact => {
            // Quotes an uncertain statement that is not in the report; for
            // truly uncertain cases, a certain one.
            if let Some(e) = ecg {
                if schema.postprocess(e.possible) != Ok(truth) {
                    return alloc::vec![e.possible];
                }
            }
            match first_raw_of(schema, positive) {
                Some(r) if truth != positive => alloc::vec![r],
                _ => fallback(wrong).into_iter().take(1).collect(),
            }
        }
        HallucinationKind::UncertaintyConfusion => match ecg {
            Some(e) if drawn == e.probable => alloc::vec![e.possible],
            Some(e) if drawn == e.possible => alloc::vec![e.probable],
            Some(e) => alloc::vec![e.possible],
            None => fallback(wrong),
        },
        HallucinationKind::Misunderstanding => {
            let target = if truth == positive {
                schema.default_label().filter(|&l| l != positive).or_else(|| {
                    schema.labels().find(|&l| l != positive && !schema.flag_labels().contains(&l))
                })
            } else {
                Some(positive)
            };
            match target.and_then(|l| first_raw_of(schema, l)) {
                Some(r) if schema.postprocess(r) != Ok(truth) => alloc::vec![r],
                _ => fallback(wrong),
            }
        }
        HallucinationKind::SelfContradiction => fallback(wrong),
    }
}

fn explanation_for(kind: Option<HallucinationKind>, vote: &str) -> String {
    match kind {
        None => format!("The diagnostic statement for the current tracing supports '{vote}'."),
        Some(HallucinationKind::FabricatedFact) => format!(
            "{} The report mentions 'possible atrial flutter' for the current tracing, so the class is '{vote}'.",
            HallucinationKind::FabricatedFact.tag()
        ),
        Some(HallucinationKind::UncertaintyConfusion) => format!(
            "{} The certainty modifier in the report is read as '{vote}'.",
            HallucinationKind::UncertaintyConfusion.tag()
        ),
        Some(HallucinationKind::Misunderstanding) => format!(
            "{} The primary rhythm is taken to rule the underlying rhythm in or out, giving '{vote}'.",
            HallucinationKind::Misunderstanding.tag()
        ),
        Some(HallucinationKind::SelfContradiction) => format!(
            "{} The rhythm is confirmed and the rhythm is not confirmed, giving '{vote}'.",
            HallucinationKind::SelfContradiction.tag()
        ),
    }
}

fn sample_row<R: Rng>(rng: &mut R, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// The raw verdict a profile emits for `case` before any corruption, along
/// with the hallucination that produced it, if any.
fn simulated_vote<R: Rng>(
    rng: &mut R,
    profile: &SimAgentProfile,
    case: &SyntheticCase,
    schema: &TaskSchema,
) -> (RawCategory, Option<HallucinationKind>) {
    let row = &profile.emission[case.truth.index()];
    let mut drawn = schema
        .raw_categories()
        .nth(sample_row(rng, row))
        .expect("row length matches raw set");
    let correct = schema.postprocess(drawn) == Ok(case.truth);
    if correct && schema.postprocess(case.wording) == Ok(case.truth) {
        drawn = case.wording;
    }

    let u: f64 = rng.random();
    let mut acc = 0.0;
    for kind in HallucinationKind::ALL {
        acc += profile.hallucination.get(kind);
        if u < acc {
            let candidates = hallucination_candidates(kind, drawn, case.truth, schema);
            let vote = candidates[rng.random_range(0..candidates.len())];
            return (vote, Some(kind));
        }
    }
    (drawn, None)
}

/// Deterministic in `(profile.seed, case.case_id)`.
pub fn simulate_response(profile: &SimAgentProfile, case: &SyntheticCase, schema: &TaskSchema) -> SimResponse {
    let mut rng = rng::keyed(profile.seed, &case.case_id);
    let (vote, hallucination) = simulated_vote(&mut rng, profile, case, schema);
    let fields = schema.output_fields();
    let explanation = explanation_for(hallucination, schema.raw_name(vote));
    let quote = |s: &str| serde_json::to_string(s).expect("strings serialize");
    let mut text = format!(
        "{{{}: {}, {}: {:.2}, {}: {}}}",
        quote(&fields.label),
        quote(schema.raw_name(vote)),
        quote(&fields.score),
        score_for(schema, vote),
        quote(&fields.explanation),
        quote(&explanation),
    );

    let mut fault = None;
    if rng.random::<f64>() < profile.malformed_json_rate {
        let shape = FaultShape::ALL[rng.random_range(0..FaultShape::ALL.len())];
        text = corrupt(&text, shape, schema.raw_name(vote));
        fault = Some(shape);
    }
    SimResponse {
        text,
        vote,
        hallucination,
        fault,
    }
}

/// Applies a fault shape to well-formed simulator JSON.
pub fn corrupt(json: &str, shape: FaultShape, vote_name: &str) -> String {
    match shape {
        FaultShape::ProseWrap => format!("Sure! Here is my assessment of the report:\n{json}\nLet me know if anything else is needed."),
        FaultShape::CodeFence => format!("```json\n{json}\n```"),
        FaultShape::SingleQuotes => json.replace('"', "'"),
        FaultShape::TrailingComma => match json.rfind('}') {
            Some(end) => format!("{},\n}}", &json[..end]),
            None => json.to_string(),
        },
        FaultShape::SmartQuotes => {
            let mut open = true;
            json.chars()
                .map(|c| {
                    if c == '"' {
                        let q = if open { '\u{201C}' } else { '\u{201D}' };
                        open = !open;
                        q
                    } else {
                        c
                    }
                })
                .collect()
        }
        FaultShape::InteriorQuotes => match json.rfind("\"}") {
            Some(end) => format!("{} The statement reads \"{vote_name}\" in the report.{}", &json[..end], &json[end..]),
            None => json.to_string(),
        },
    }
}

/// Exact distribution of a profile's final-label vote for a case of class
/// `truth` worded as `wording`, marginalizing hallucinations.
pub fn vote_distribution(
    profile: &SimAgentProfile,
    truth: LabelId,
    wording: RawCategory,
    schema: &TaskSchema,
) -> Vec<f64> {
    let mut dist = alloc::vec![0.0; schema.n_labels()];
    let h_total = profile.hallucination.total();
    for (i, &p) in profile.emission[truth.index()].iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut drawn = schema.raw_categories().nth(i).expect("row length matches raw set");
        if schema.postprocess(drawn) == Ok(truth) && schema.postprocess(wording) == Ok(truth) {
            drawn = wording;
        }
        let label = schema.postprocess(drawn).expect("schema raw");
        dist[label.index()] += p * (1.0 - h_total);
        for kind in HallucinationKind::ALL {
            let h = profile.hallucination.get(kind);
            if h == 0.0 {
                continue;
            }
            let candidates = hallucination_candidates(kind, drawn, truth, schema);
            let share = p * h / candidates.len() as f64;
            for c in candidates {
                dist[schema.postprocess(c).expect("schema raw").index()] += share;
            }
        }
    }
    dist
}

/// The final label a fabricated-fact hallucination produces on a case of
/// class `truth`.
pub fn fabricated_label(truth: LabelId, schema: &TaskSchema) -> Option<LabelId> {
    let any = schema.raw_categories().next()?;
    let c = hallucination_candidates(HallucinationKind::FabricatedFact, any, truth, schema);
    c.first().and_then(|&r| schema.postprocess(r).ok())
}

/// Probability that a case is auto-labeled `truth` at `min_votes` (committee
/// denominator) when one agent voted `wrong` and the others vote
/// independently with the given distributions over `V`. Exhaustive over all
/// vote combinations of the other agents.
pub fn exact_outvote_probability(others: &[Vec<f64>], truth: LabelId, wrong: LabelId, min_votes: u32) -> f64 {
    let n_labels = others.first().map_or(0, |d| d.len()).max(truth.index() + 1).max(wrong.index() + 1);
    let mut counts = alloc::vec![0u32; n_labels];
    counts[wrong.index()] += 1;
    fn walk(others: &[Vec<f64>], counts: &mut Vec<u32>, prob: f64, truth: usize, k: u32) -> f64 {
        match others.split_first() {
            None => {
                let max = *counts.iter().max().unwrap_or(&0);
                let unique = counts.iter().filter(|&&c| c == max).count() == 1;
                if unique && counts[truth] == max && max >= k {
                    prob
                } else {
                    0.0
                }
            }
            Some((dist, rest)) => {
                let mut total = 0.0;
                for (l, &p) in dist.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    counts[l] += 1;
                    total += walk(rest, counts, prob * p, truth, k);
                    counts[l] -= 1;
                }
                total
            }
        }
    }
    walk(others, &mut counts, 1.0, truth.index(), min_votes)
}

pub fn binomial_pmf(n: u32, k: u32, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut coeff = 1.0;
    for i in 0..k {
        coeff = coeff * f64::from(n - i) / f64::from(i + 1);
    }
    let mut prob = coeff;
    for _ in 0..k {
        prob *= p;
    }
    for _ in 0..(n - k) {
        prob *= 1.0 - p;
    }
    prob
}

/// Accuracy of a strict-majority vote among `n` independent binary voters
/// that are each correct with probability `p`.
pub fn majority_accuracy_binary(n: u32, p: f64) -> f64 {
    (n / 2 + 1..=n).map(|k| binomial_pmf(n, k, p)).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindAudit {
    /// Events carrying this kind's tag.
    pub injected: u64,
    /// Events whose vote disagreed with the truth.
    pub wrong_vote: u64,
    /// Wrong-vote events whose case the ensemble still labeled correctly.
    pub outvoted: u64,
}

impl KindAudit {
    pub fn outvoted_fraction(&self) -> Option<f64> {
        (self.wrong_vote > 0).then(|| self.outvoted as f64 / self.wrong_vote as f64)
    }

    fn add(&mut self, other: &KindAudit) {
        self.injected += other.injected;
        self.wrong_vote += other.wrong_vote;
        self.outvoted += other.outvoted;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HallucinationAudit {
    pub per_kind: BTreeMap<String, KindAudit>,
    pub total: KindAudit,
}

/// Counts tagged hallucination events across all agents' votes, how many
/// produced wrong individual votes, and how many of those the ensemble
/// outvoted.
pub fn hallucination_audit(
    votes: &[AgentVote],
    outcomes: &BTreeMap<String, FinalLabel>,
    truth: &BTreeMap<String, LabelId>,
    schema: &TaskSchema,
) -> HallucinationAudit {
    let mut per_kind: BTreeMap<String, KindAudit> = HallucinationKind::ALL
        .iter()
        .map(|k| (k.name().to_string(), KindAudit::default()))
        .collect();
    for vote in votes {
        let Some(kind) = HallucinationKind::detect(&vote.explanation) else {
            continue;
        };
        let entry = per_kind.get_mut(kind.name()).expect("all kinds present");
        entry.injected += 1;
        let Some(&t) = truth.get(&vote.case_id) else {
            continue;
        };
        if vote.final_label(schema) != Some(t) {
            entry.wrong_vote += 1;
            if outcomes.get(&vote.case_id) == Some(&FinalLabel::Valid(t)) {
                entry.outvoted += 1;
            }
        }
    }
    let mut total = KindAudit::default();
    for a in per_kind.values() {
        total.add(a);
    }
    HallucinationAudit { per_kind, total }
}
