//! Chat backends: OpenAI-compatible HTTP, a local model server, and the
//! deterministic simulator.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use agentvote_core::prompt::ChatRequest;
use agentvote_core::sim::{simulate_response, SimAgentProfile, SyntheticCase};
use agentvote_core::TaskSchema;
use anyhow::{anyhow, bail, Result};
use log::{debug, warn};
use serde_json::{json, Value};

use crate::config::{AgentSpec, BackendKind, GenerationParams, RetryPolicy};
use crate::corpus::TruthTable;

/// Longest single backoff sleep.
const MAX_BACKOFF_MS: u64 = 30_000;

/// What one call produced. `outcome` is the completion text, or the reason
/// the case gets an invalid vote.
#[derive(Clone, Debug)]
pub struct Exchange {
    pub request: Value,
    pub raw_response: Option<String>,
    pub outcome: std::result::Result<String, String>,
    pub attempts: u32,
    pub latency_ms: u64,
}

#[derive(Clone, Debug)]
pub struct HttpBackend {
    kind: BackendKind,
    url: String,
    model: String,
    api_key: Option<String>,
    generation: GenerationParams,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

#[derive(Clone, Debug)]
pub struct SimulatedBackend {
    profile: SimAgentProfile,
    schema: TaskSchema,
    truth: Arc<TruthTable>,
}

#[derive(Clone, Debug)]
pub enum Backend {
    Http(HttpBackend),
    Simulated(Box<SimulatedBackend>),
}

enum Attempt {
    Done(String),
    Retry(String),
    Fail(String),
}

impl HttpBackend {
    pub fn new(spec: &AgentSpec) -> Result<Self> {
        let Some(url) = spec.endpoint.clone() else {
            bail!("agent {}: no endpoint", spec.agent_id);
        };
        let api_key = match &spec.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| anyhow!("agent {}: environment variable {var} is not set", spec.agent_id))?,
            ),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build();
        Ok(HttpBackend {
            kind: spec.backend,
            url,
            model: spec.model.clone(),
            api_key,
            generation: spec.generation.clone(),
            retry: spec.retry.clone(),
            agent,
        })
    }

    /// Request body for `chat`. Local servers get the Ollama chat shape with
    /// generation settings under `options`.
    pub fn body(&self, chat: &ChatRequest) -> Value {
        let messages = json!([
            {"role": "system", "content": chat.system},
            {"role": "user", "content": chat.user},
        ]);
        let g = &self.generation;
        match self.kind {
            BackendKind::LocalModelServer => {
                let mut options = json!({"temperature": g.temperature});
                if let Some(m) = g.max_tokens {
                    options["num_predict"] = json!(m);
                }
                if let Some(s) = g.seed {
                    options["seed"] = json!(s);
                }
                json!({"model": self.model, "messages": messages, "stream": false, "options": options})
            }
            _ => {
                let mut body = json!({"model": self.model, "messages": messages, "temperature": g.temperature});
                if let Some(m) = g.max_tokens {
                    body["max_tokens"] = json!(m);
                }
                if let Some(s) = g.seed {
                    body["seed"] = json!(s);
                }
                body
            }
        }
    }

    fn attempt(&self, body: &Value, last_body: &mut Option<String>) -> Attempt {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => match resp.into_string() {
                Ok(text) => {
                    *last_body = Some(text.clone());
                    match extract_content(&text) {
                        Some(content) => Attempt::Done(content),
                        None => Attempt::Fail("unexpected response shape".into()),
                    }
                }
                Err(e) => Attempt::Retry(format!("transport error: reading body: {e}")),
            },
            Err(ureq::Error::Status(code, resp)) => {
                *last_body = resp.into_string().ok();
                if code == 429 || code >= 500 {
                    Attempt::Retry(format!("transport error: HTTP {code}"))
                } else {
                    Attempt::Fail(format!("HTTP {code}"))
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry(format!("transport error: {t}")),
        }
    }

    pub fn invoke(&self, chat: &ChatRequest) -> Exchange {
        let body = self.body(chat);
        let start = Instant::now();
        let mut last_body = None;
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            match self.attempt(&body, &mut last_body) {
                Attempt::Done(text) => break Ok(text),
                Attempt::Fail(reason) => break Err(reason),
                Attempt::Retry(reason) => {
                    if attempts >= self.retry.max_attempts {
                        warn!("{}: giving up after {attempts} attempts: {reason}", self.url);
                        break Err(reason);
                    }
                    let shift = (attempts - 1).min(16);
                    let delay = self.retry.backoff_ms.saturating_mul(1 << shift).min(MAX_BACKOFF_MS);
                    debug!("{}: attempt {attempts} failed ({reason}); retrying in {delay} ms", self.url);
                    thread::sleep(Duration::from_millis(delay));
                }
            }
        };
        Exchange {
            request: body,
            raw_response: last_body,
            outcome,
            attempts,
            latency_ms: start.elapsed().as_millis() as u64,
        }
    }
}

/// Completion text from an OpenAI-style, Ollama chat or Ollama generate body.
pub fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/choices/0/text"))
        .or_else(|| v.pointer("/message/content"))
        .or_else(|| v.get("response"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl SimulatedBackend {
    pub fn new(profile: SimAgentProfile, schema: TaskSchema, truth: Arc<TruthTable>) -> Self {
        SimulatedBackend { profile, schema, truth }
    }

    pub fn invoke(&self, case_id: &str, report_text: &str, chat: &ChatRequest) -> Exchange {
        let start = Instant::now();
        let request = json!({"messages": [
            {"role": "system", "content": chat.system},
            {"role": "user", "content": chat.user},
        ]});
        let Some(&truth) = self.truth.labels.get(case_id) else {
            return Exchange {
                request,
                raw_response: None,
                outcome: Err("no ground truth for simulated case".into()),
                attempts: 1,
                latency_ms: 0,
            };
        };
        // Without an explicit wording, use the first raw category that maps
        // to the truth label.
        let wording = self.truth.wording.get(case_id).copied().or_else(|| {
            self.schema
                .raw_categories()
                .find(|&r| self.schema.postprocess(r) == Ok(truth))
        });
        let Some(wording) = wording else {
            return Exchange {
                request,
                raw_response: None,
                outcome: Err("truth label has no raw category".into()),
                attempts: 1,
                latency_ms: 0,
            };
        };
        let case = SyntheticCase {
            case_id: case_id.to_string(),
            report_text: report_text.to_string(),
            truth,
            wording,
        };
        let text = simulate_response(&self.profile, &case, &self.schema).text;
        Exchange {
            request,
            raw_response: Some(text.clone()),
            outcome: Ok(text),
            attempts: 1,
            latency_ms: start.elapsed().as_millis() as u64,
        }
    }
}

impl Backend {
    pub fn invoke(&self, case_id: &str, report_text: &str, chat: &ChatRequest) -> Exchange {
        match self {
            Backend::Http(b) => b.invoke(chat),
            Backend::Simulated(b) => b.invoke(case_id, report_text, chat),
        }
    }
}

/// Builds the backend for one configured agent. Simulated agents need their
/// profile and the ground truth they answer from.
pub fn from_spec(
    spec: &AgentSpec,
    profile: Option<SimAgentProfile>,
    schema: &TaskSchema,
    truth: Arc<TruthTable>,
) -> Result<Backend> {
    match spec.backend {
        BackendKind::Simulated => {
            let profile = profile.ok_or_else(|| anyhow!("agent {}: no simulation profile", spec.agent_id))?;
            Ok(Backend::Simulated(Box::new(SimulatedBackend::new(profile, schema.clone(), truth))))
        }
        BackendKind::ChatCompletionHttp | BackendKind::LocalModelServer => Ok(Backend::Http(HttpBackend::new(spec)?)),
    }
}
