//! Prompt templates.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::TaskSchema;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("empty input")]
    EmptyInput,
}

/// A shared prompt: the system message, the instruction block, and the
/// literal marker after which the report text is appended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub system_message: String,
    pub instruction: String,
    pub report_marker: String,
}

/// A rendered two-message chat request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    /// User message = instruction + marker + report. Nothing else in the
    /// template is touched.
    pub fn render(&self, report_text: &str) -> Result<ChatRequest, PromptError> {
        if report_text.trim().is_empty() {
            return Err(PromptError::EmptyInput);
        }
        let mut user =
            String::with_capacity(self.instruction.len() + self.report_marker.len() + report_text.len());
        user.push_str(&self.instruction);
        user.push_str(&self.report_marker);
        user.push_str(report_text);
        Ok(ChatRequest {
            system: self.system_message.clone(),
            user,
        })
    }

    /// Recovers the report text from a rendered user message.
    pub fn report_of<'a>(&self, request: &'a ChatRequest) -> Option<&'a str> {
        request
            .user
            .strip_prefix(self.instruction.as_str())
            .and_then(|rest| rest.strip_prefix(self.report_marker.as_str()))
    }

    /// Lists what the instruction fails to mention: every raw category and
    /// every output key must appear quoted in the instruction text.
    pub fn missing_schema_terms(&self, schema: &TaskSchema) -> Vec<String> {
        let fields = schema.output_fields();
        schema
            .raw_set()
            .iter()
            .chain([&fields.label, &fields.score, &fields.explanation])
            .filter(|term| {
                let quoted = alloc::format!("\"{term}\"");
                let escaped = alloc::format!("\\\"{term}\\\"");
                !self.instruction.contains(&quoted) && !self.instruction.contains(&escaped)
            })
            .cloned()
            .collect()
    }
}
