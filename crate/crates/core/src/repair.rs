//! Recovery of a structured verdict from raw model output.
//!
//! Models are asked for a single JSON object but frequently wrap it in prose
//! or code fences, use typographic or single quotes, leave trailing commas,
//! or embed unescaped double quotes in the explanation. [`repair_and_extract`]
//! tries a strict parse first and then applies [`PIPELINE`] in order,
//! re-parsing after every step that changed the text and stopping at the
//! first success. Each step is cumulative and recorded by name.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::label::{RawCategory, TaskSchema};
use crate::vote::AgentVote;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStep {
    ExtractObject,
    NormalizeSmartQuotes,
    SingleToDoubleQuotes,
    StripTrailingCommas,
    EscapeInteriorQuotes,
}

impl RepairStep {
    pub fn name(self) -> &'static str {
        match self {
            RepairStep::ExtractObject => "extract_object",
            RepairStep::NormalizeSmartQuotes => "normalize_smart_quotes",
            RepairStep::SingleToDoubleQuotes => "single_to_double_quotes",
            RepairStep::StripTrailingCommas => "strip_trailing_commas",
            RepairStep::EscapeInteriorQuotes => "escape_interior_quotes",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        PIPELINE.iter().copied().find(|s| s.name() == name)
    }

    fn apply(self, text: &str, schema: &TaskSchema) -> Option<String> {
        let out = match self {
            RepairStep::ExtractObject => extract_object(text)?,
            RepairStep::NormalizeSmartQuotes => normalize_smart_quotes(text),
            RepairStep::SingleToDoubleQuotes => single_to_double_quotes(text),
            RepairStep::StripTrailingCommas => strip_trailing_commas(text),
            RepairStep::EscapeInteriorQuotes => {
                escape_interior_quotes(text, &schema.output_fields().explanation)?
            }
        };
        (out != text).then_some(out)
    }
}

/// Repair steps after the strict parse, in application order.
pub const PIPELINE: [RepairStep; 5] = [
    RepairStep::ExtractObject,
    RepairStep::NormalizeSmartQuotes,
    RepairStep::SingleToDoubleQuotes,
    RepairStep::StripTrailingCommas,
    RepairStep::EscapeInteriorQuotes,
];

#[derive(Clone, Debug, PartialEq)]
pub struct RepairOutcome {
    pub annotation: AgentVote,
    pub repairs_applied: Vec<RepairStep>,
    pub raw_text: String,
    /// The text that finally parsed; `None` when nothing parsed.
    pub repaired_text: Option<String>,
    pub warnings: Vec<String>,
}

impl RepairOutcome {
    pub fn repairs_label(&self) -> String {
        self.repairs_applied
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

fn parse_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    }
}

/// Strict parse, then the repair pipeline; the first parse that yields a JSON
/// object wins. Never fails: unusable output becomes an invalid vote.
pub fn repair_and_extract(
    raw_text: &str,
    case_id: &str,
    agent_id: &str,
    schema: &TaskSchema,
) -> RepairOutcome {
    let mut repairs = Vec::new();
    let mut current = raw_text.to_string();
    let mut parsed = parse_object(&current);
    if parsed.is_none() {
        for step in PIPELINE {
            if let Some(next) = step.apply(&current, schema) {
                current = next;
                repairs.push(step);
                parsed = parse_object(&current);
                if parsed.is_some() {
                    break;
                }
            }
        }
    }

    let Some(object) = parsed else {
        return RepairOutcome {
            annotation: AgentVote::invalid(case_id, agent_id, "unparseable output"),
            repairs_applied: repairs,
            raw_text: raw_text.to_string(),
            repaired_text: None,
            warnings: Vec::new(),
        };
    };

    let mut warnings = Vec::new();
    let annotation = extract_vote(&object, case_id, agent_id, !repairs.is_empty(), schema, &mut warnings);
    RepairOutcome {
        annotation,
        repairs_applied: repairs,
        raw_text: raw_text.to_string(),
        repaired_text: Some(current),
        warnings,
    }
}

fn field<'a>(object: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    object.get(key).or_else(|| {
        object
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    })
}

fn extract_vote(
    object: &Map<String, Value>,
    case_id: &str,
    agent_id: &str,
    repaired: bool,
    schema: &TaskSchema,
    warnings: &mut Vec<String>,
) -> AgentVote {
    let keys = schema.output_fields();
    let explanation = match field(object, &keys.explanation) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    };
    let raw = match field(object, &keys.label) {
        Some(Value::String(s)) => match schema.parse_raw_category(s) {
            Some(raw) => raw,
            None => {
                return AgentVote::invalid(case_id, agent_id, format!("unrecognized category {s:?}"))
                    .with_explanation(explanation)
            }
        },
        Some(_) => {
            return AgentVote::invalid(case_id, agent_id, format!("{} is not a string", keys.label))
                .with_explanation(explanation)
        }
        None => {
            return AgentVote::invalid(case_id, agent_id, format!("missing {}", keys.label))
                .with_explanation(explanation)
        }
    };
    let score = read_score(field(object, &keys.score), &keys.score, warnings);
    AgentVote::valid(case_id, agent_id, raw, score, explanation, repaired)
        .expect("score is clamped into [0, 1]")
}

fn read_score(value: Option<&Value>, key: &str, warnings: &mut Vec<String>) -> Option<f64> {
    let x = match value? {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => match s.trim().parse::<f64>() {
            Ok(x) => x,
            Err(_) => {
                warnings.push(format!("{key} {s:?} is not a number; dropped"));
                return None;
            }
        },
        Value::Null => return None,
        other => {
            warnings.push(format!("{key} {other} is not a number; dropped"));
            return None;
        }
    };
    if x.is_nan() {
        warnings.push(format!("{key} is NaN; dropped"));
        return None;
    }
    if !(0.0..=1.0).contains(&x) {
        let clamped = x.clamp(0.0, 1.0);
        warnings.push(format!("{key} {x} outside [0, 1]; clamped to {clamped}"));
        return Some(clamped);
    }
    Some(x)
}

/// Renders a well-formed annotation in the requested output shape.
pub fn render_annotation(
    schema: &TaskSchema,
    raw: RawCategory,
    af_pr: Option<f64>,
    explanation: &str,
) -> String {
    let keys = schema.output_fields();
    let quote = |s: &str| serde_json::to_string(s).expect("strings always serialize");
    let score = match af_pr {
        Some(p) => serde_json::to_string(&p).unwrap_or_else(|_| "null".into()),
        None => "null".into(),
    };
    format!(
        "{{{}: {}, {}: {}, {}: {}}}",
        quote(&keys.label),
        quote(schema.raw_name(raw)),
        quote(&keys.score),
        score,
        quote(&keys.explanation),
        quote(explanation)
    )
}

/// The first balanced `{...}` block, scanning double-quoted strings
/// correctly. An unterminated block runs to the last `}` (or the end).
fn extract_object(text: &str) -> Option<String> {
    let start = text.find('{')?;
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..=i].to_string());
                }
            }
            _ => {}
        }
    }
    match text.rfind('}') {
        Some(end) if end > start => Some(text[start..=end].to_string()),
        _ => Some(text[start..].to_string()),
    }
}

fn normalize_smart_quotes(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' | '\u{FF02}' => '"',
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' => '\'',
            other => other,
        })
        .collect()
}

fn next_significant(chars: &[char], from: usize) -> Option<char> {
    chars[from..].iter().copied().find(|c| !c.is_whitespace())
}

/// Converts single-quoted keys and values to double-quoted ones outside
/// double-quoted strings. A `'` only closes a value when the next
/// significant character is structural, so apostrophes survive.
fn single_to_double_quotes(text: &str) -> String {
    #[derive(PartialEq)]
    enum State {
        Outside,
        Double,
        Single,
    }
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 8);
    let mut state = State::Outside;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match state {
            State::Outside => {
                match c {
                    '"' => state = State::Double,
                    '\'' => {
                        out.push('"');
                        state = State::Single;
                        i += 1;
                        continue;
                    }
                    _ => {}
                }
                out.push(c);
            }
            State::Double => {
                out.push(c);
                if c == '\\' {
                    if let Some(&n) = chars.get(i + 1) {
                        out.push(n);
                        i += 1;
                    }
                } else if c == '"' {
                    state = State::Outside;
                }
            }
            State::Single => match c {
                '\\' if chars.get(i + 1) == Some(&'\'') => {
                    out.push('\'');
                    i += 1;
                }
                '\\' => {
                    out.push('\\');
                    if let Some(&n) = chars.get(i + 1) {
                        out.push(n);
                        i += 1;
                    }
                }
                '"' => out.push_str("\\\""),
                '\'' => {
                    let closes = matches!(next_significant(&chars, i + 1), None | Some(',' | ':' | '}' | ']'));
                    if closes {
                        out.push('"');
                        state = State::Outside;
                    } else {
                        out.push('\'');
                    }
                }
                _ => out.push(c),
            },
        }
        i += 1;
    }
    out
}

fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        match c {
            '"' => in_string = true,
            ',' if matches!(next_significant(&chars, i + 1), Some('}' | ']')) => continue,
            _ => {}
        }
        out.push(c);
    }
    out
}

/// True when the quote at `chars[i]` plausibly ends a string value: it is
/// followed by the end of the enclosing container, or by a comma and the
/// next `"key":`.
fn closes_value(chars: &[char], i: usize) -> bool {
    let mut j = i + 1;
    while j < chars.len() && chars[j].is_whitespace() {
        j += 1;
    }
    match chars.get(j) {
        None | Some('}') | Some(']') => true,
        Some(',') => {
            j += 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            match chars.get(j) {
                None | Some('}') | Some(']') => true,
                Some('"') => {
                    let mut k = j + 1;
                    while k < chars.len() && chars[k] != '"' {
                        if chars[k] == '\\' {
                            k += 1;
                        }
                        k += 1;
                    }
                    k += 1;
                    while k < chars.len() && chars[k].is_whitespace() {
                        k += 1;
                    }
                    chars.get(k) == Some(&':')
                }
                _ => false,
            }
        }
        _ => false,
    }
}

/// Escapes unescaped double quotes inside the value of `key`.
fn escape_interior_quotes(text: &str, key: &str) -> Option<String> {
    let chars: Vec<char> = text.chars().collect();
    let needle: Vec<char> = format!("\"{key}\"").chars().collect();
    let key_at = (0..chars.len().saturating_sub(needle.len() - 1))
        .find(|&i| chars[i..].starts_with(&needle))?;
    let mut i = key_at + needle.len();
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    if chars.get(i) != Some(&':') {
        return None;
    }
    i += 1;
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    if chars.get(i) != Some(&'"') {
        return None;
    }
    let value_start = i + 1;

    let mut out: String = chars[..value_start].iter().collect();
    let mut j = value_start;
    while j < chars.len() {
        let c = chars[j];
        if c == '\\' {
            out.push(c);
            if let Some(&n) = chars.get(j + 1) {
                out.push(n);
            }
            j += 2;
            continue;
        }
        if c == '"' {
            if closes_value(&chars, j) {
                out.extend(chars[j..].iter());
                return Some(out);
            }
            out.push_str("\\\"");
        } else {
            out.push(c);
        }
        j += 1;
    }
    Some(out)
}
