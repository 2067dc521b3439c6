//! Label vocabulary and task schemas.
//!
//! A [`TaskSchema`] is data: the raw verdict strings an agent may emit, the
//! valid vote set `V`, the total map from raw verdicts into `V`, and the
//! distinguished review label that only the ensemble rule can produce. The
//! same machinery serves the ECG atrial-fibrillation task (see
//! [`TaskSchema::ecg_af`]) and any other categorical labeling task loaded
//! from configuration.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Index of a raw verdict within [`TaskSchema::raw_set`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawCategory(u16);

impl RawCategory {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Index of a valid vote label within [`TaskSchema::valid_set`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(u16);

impl LabelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Builds an id from a position in `V`. Callers index into a schema's
    /// valid set; no bounds check happens here.
    pub fn from_index(index: usize) -> Self {
        LabelId(index as u16)
    }
}

/// Pipeline-level label: a member of `V`, or the review outcome that lies
/// outside `V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FinalLabel {
    Valid(LabelId),
    Review,
}

impl FinalLabel {
    pub fn label(self) -> Option<LabelId> {
        match self {
            FinalLabel::Valid(id) => Some(id),
            FinalLabel::Review => None,
        }
    }

    pub fn is_review(self) -> bool {
        matches!(self, FinalLabel::Review)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("raw_set must not be empty")]
    EmptyRawSet,
    #[error("valid_set must not be empty")]
    EmptyValidSet,
    #[error("duplicate raw category {0:?} (after canonicalization)")]
    DuplicateRaw(String),
    #[error("duplicate valid label {0:?}")]
    DuplicateLabel(String),
    #[error("raw category {0:?} has no entry in raw_to_final")]
    UnmappedRaw(String),
    #[error("raw_to_final key {0:?} is not a declared raw category")]
    UnknownRawKey(String),
    #[error("raw_to_final maps {raw:?} to {label:?}, which is not in valid_set")]
    MapOutsideValidSet { raw: String, label: String },
    #[error("review_label {0:?} must not be a member of valid_set")]
    ReviewInValidSet(String),
    #[error("{field} {label:?} is not a member of valid_set")]
    NotInValidSet { field: &'static str, label: String },
    #[error("too many categories ({0}); at most 65535 are supported")]
    TooLarge(usize),
    #[error("raw category index {0} is outside this schema")]
    ForeignRaw(usize),
}

/// JSON keys of the agent output object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputFields {
    #[serde(default = "OutputFields::default_label")]
    pub label: String,
    #[serde(default = "OutputFields::default_score")]
    pub score: String,
    #[serde(default = "OutputFields::default_explanation")]
    pub explanation: String,
}

impl OutputFields {
    fn default_label() -> String {
        "Diagnosis".into()
    }
    fn default_score() -> String {
        "AF_pr".into()
    }
    fn default_explanation() -> String {
        "Explanation".into()
    }
}

impl Default for OutputFields {
    fn default() -> Self {
        OutputFields {
            label: Self::default_label(),
            score: Self::default_score(),
            explanation: Self::default_explanation(),
        }
    }
}

/// Serialized form of a task schema, as written in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub raw_set: Vec<String>,
    pub valid_set: Vec<String>,
    pub raw_to_final: BTreeMap<String, String>,
    pub review_label: String,
    pub positive_class: String,
    /// Label assigned to cases the prefilter screens out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_label: Option<String>,
    /// Members of `V` that are auto-labeled but still routed to human review.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flag_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_asset: Option<String>,
    #[serde(default)]
    pub output_fields: OutputFields,
}

/// A validated labeling task. Immutable after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskSpec", into = "TaskSpec")]
pub struct TaskSchema {
    spec: TaskSpec,
    canonical_raw: Vec<String>,
    raw_to_final: Vec<LabelId>,
    positive: LabelId,
    default_label: Option<LabelId>,
    flag_labels: Vec<LabelId>,
}

impl TryFrom<TaskSpec> for TaskSchema {
    type Error = SchemaError;

    fn try_from(spec: TaskSpec) -> Result<Self, Self::Error> {
        TaskSchema::new(spec)
    }
}

impl From<TaskSchema> for TaskSpec {
    fn from(schema: TaskSchema) -> Self {
        schema.spec
    }
}

impl TaskSchema {
    pub fn new(spec: TaskSpec) -> Result<Self, SchemaError> {
        if spec.raw_set.is_empty() {
            return Err(SchemaError::EmptyRawSet);
        }
        if spec.valid_set.is_empty() {
            return Err(SchemaError::EmptyValidSet);
        }
        for len in [spec.raw_set.len(), spec.valid_set.len()] {
            if len > u16::MAX as usize {
                return Err(SchemaError::TooLarge(len));
            }
        }

        let mut canonical_raw: Vec<String> = Vec::with_capacity(spec.raw_set.len());
        for raw in &spec.raw_set {
            let c = canonicalize(raw);
            if canonical_raw.contains(&c) {
                return Err(SchemaError::DuplicateRaw(raw.clone()));
            }
            canonical_raw.push(c);
        }
        for (i, label) in spec.valid_set.iter().enumerate() {
            if spec.valid_set[..i].contains(label) {
                return Err(SchemaError::DuplicateLabel(label.clone()));
            }
        }
        let find_label = |field: &'static str, label: &str| {
            spec.valid_set
                .iter()
                .position(|v| v == label)
                .map(LabelId::from_index)
                .ok_or_else(|| SchemaError::NotInValidSet {
                    field,
                    label: label.to_string(),
                })
        };

        for key in spec.raw_to_final.keys() {
            if !spec.raw_set.contains(key) {
                return Err(SchemaError::UnknownRawKey(key.clone()));
            }
        }
        let mut raw_to_final = Vec::with_capacity(spec.raw_set.len());
        for raw in &spec.raw_set {
            let target = spec
                .raw_to_final
                .get(raw)
                .ok_or_else(|| SchemaError::UnmappedRaw(raw.clone()))?;
            let id = find_label("raw_to_final", target).map_err(|_| {
                SchemaError::MapOutsideValidSet {
                    raw: raw.clone(),
                    label: target.clone(),
                }
            })?;
            raw_to_final.push(id);
        }

        if spec.valid_set.contains(&spec.review_label) {
            return Err(SchemaError::ReviewInValidSet(spec.review_label.clone()));
        }
        let positive = find_label("positive_class", &spec.positive_class)?;
        let default_label = spec
            .default_label
            .as_deref()
            .map(|l| find_label("default_label", l))
            .transpose()?;
        let flag_labels = spec
            .flag_labels
            .iter()
            .map(|l| find_label("flag_labels", l))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(TaskSchema {
            spec,
            canonical_raw,
            raw_to_final,
            positive,
            default_label,
            flag_labels,
        })
    }

    /// The shipped atrial fibrillation / flutter task for ECG reports.
    pub fn ecg_af() -> Self {
        let raw = ["AF", "Probable AF", "Possible AF", "Not AF", "Not Specified"];
        let finals = ["AF", "AF", "Uncertain", "Non-AF", "Uncertain"];
        let spec = TaskSpec {
            task_id: "ecg_af".into(),
            raw_set: raw.iter().map(|s| s.to_string()).collect(),
            valid_set: ["AF", "Non-AF", "Uncertain"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            raw_to_final: raw
                .iter()
                .zip(finals.iter())
                .map(|(r, f)| (r.to_string(), f.to_string()))
                .collect(),
            review_label: "Review".into(),
            positive_class: "AF".into(),
            default_label: Some("Non-AF".into()),
            flag_labels: alloc::vec!["Uncertain".into()],
            prompt_asset: Some("prompts/ecg_af.yaml".into()),
            output_fields: OutputFields::default(),
        };
        TaskSchema::new(spec).expect("built-in ECG schema is valid")
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn task_id(&self) -> &str {
        &self.spec.task_id
    }

    pub fn raw_set(&self) -> &[String] {
        &self.spec.raw_set
    }

    pub fn valid_set(&self) -> &[String] {
        &self.spec.valid_set
    }

    pub fn n_labels(&self) -> usize {
        self.spec.valid_set.len()
    }

    pub fn review_label(&self) -> &str {
        &self.spec.review_label
    }

    pub fn output_fields(&self) -> &OutputFields {
        &self.spec.output_fields
    }

    pub fn positive_class(&self) -> LabelId {
        self.positive
    }

    pub fn default_label(&self) -> Option<LabelId> {
        self.default_label
    }

    pub fn flag_labels(&self) -> &[LabelId] {
        &self.flag_labels
    }

    /// Whether an outcome goes to the human review queue.
    pub fn needs_review(&self, outcome: FinalLabel) -> bool {
        match outcome {
            FinalLabel::Review => true,
            FinalLabel::Valid(id) => self.flag_labels.contains(&id),
        }
    }

    pub fn raw_categories(&self) -> impl Iterator<Item = RawCategory> + '_ {
        (0..self.spec.raw_set.len()).map(|i| RawCategory(i as u16))
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.spec.valid_set.len()).map(LabelId::from_index)
    }

    /// Canonical rendering of a raw category, as declared in the schema.
    pub fn raw_name(&self, raw: RawCategory) -> &str {
        &self.spec.raw_set[raw.index()]
    }

    pub fn label_name(&self, label: LabelId) -> &str {
        &self.spec.valid_set[label.index()]
    }

    pub fn final_name(&self, outcome: FinalLabel) -> &str {
        match outcome {
            FinalLabel::Valid(id) => self.label_name(id),
            FinalLabel::Review => &self.spec.review_label,
        }
    }

    /// Exact lookup of a member of `V` by name.
    pub fn label_id(&self, name: &str) -> Option<LabelId> {
        self.spec
            .valid_set
            .iter()
            .position(|v| v == name)
            .map(LabelId::from_index)
    }

    /// Exact lookup of a final label, including the review label.
    pub fn final_label(&self, name: &str) -> Option<FinalLabel> {
        if name == self.spec.review_label {
            Some(FinalLabel::Review)
        } else {
            self.label_id(name).map(FinalLabel::Valid)
        }
    }

    /// Exact lookup of a raw category by its declared name.
    pub fn raw_id(&self, name: &str) -> Option<RawCategory> {
        self.spec
            .raw_set
            .iter()
            .position(|v| v == name)
            .map(|i| RawCategory(i as u16))
    }

    /// Parses agent text into a raw category. Matching is on the trimmed,
    /// case-folded input with internal whitespace collapsed; anything else is
    /// `None` (an invalid vote).
    pub fn parse_raw_category(&self, text: &str) -> Option<RawCategory> {
        let c = canonicalize(text);
        self.canonical_raw
            .iter()
            .position(|r| *r == c)
            .map(|i| RawCategory(i as u16))
    }

    /// Applies the raw-to-final map.
    pub fn postprocess(&self, raw: RawCategory) -> Result<LabelId, SchemaError> {
        self.raw_to_final
            .get(raw.index())
            .copied()
            .ok_or(SchemaError::ForeignRaw(raw.index()))
    }
}

/// Trim, lowercase and collapse runs of whitespace into one space.
pub fn canonicalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}

impl fmt::Display for FinalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinalLabel::Valid(id) => write!(f, "label#{}", id.index()),
            FinalLabel::Review => f.write_str("review"),
        }
    }
}
