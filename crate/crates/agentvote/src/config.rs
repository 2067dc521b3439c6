//! YAML run configuration.
//!
//! Deserialization is strict (unknown keys are errors) and every validation
//! failure names the YAML path it concerns, e.g. `agents[3].agent_id`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use agentvote_core::label::TaskSpec;
use agentvote_core::sim::{class_counts, HallucinationRates, SimAgentProfile};
use agentvote_core::vote::Denominator;
use agentvote_core::{PromptTemplate, TaskSchema};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prefilter::{compile_af_filter, CompiledFilter};

#[derive(Debug)]
pub struct ConfigError {
    /// YAML path of the offending value; empty for file-level problems.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

/// Exactly one of the three fields must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRef {
    /// `ecg_af` is the only built-in task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<TaskSpec>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedPrefilter {
    /// Fibrillation variants or flutter.
    #[default]
    Af,
    /// Every case goes to the agents.
    None,
}

/// `af`, `none`, or `{patterns: [...]}`: relevant when any expression
/// matches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrefilterSpec {
    Named(NamedPrefilter),
    Custom {
        patterns: Vec<String>,
    },
}

impl Default for PrefilterSpec {
    fn default() -> Self {
        PrefilterSpec::Named(NamedPrefilter::Af)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VotingSpec {
    /// Threshold used for the final table and the review queue.
    pub min_votes: u32,
    /// Extra thresholds for the threshold curve, ascending.
    #[serde(default)]
    pub sweep: Vec<u32>,
    #[serde(default)]
    pub denominator: Denominator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcurrencySpec {
    /// Agents run at once; 0 means all.
    #[serde(default)]
    pub agents: usize,
    #[serde(default = "one")]
    pub requests_per_agent: usize,
}

fn one() -> usize {
    1
}

impl Default for ConcurrencySpec {
    fn default() -> Self {
        ConcurrencySpec {
            agents: 0,
            requests_per_agent: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub n: usize,
    /// Class proportions in valid-set order.
    pub mix: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ChatCompletionHttp,
    LocalModelServer,
    Simulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: None,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "RetryPolicy::default_attempts")]
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each further failure.
    #[serde(default = "RetryPolicy::default_backoff")]
    pub backoff_ms: u64,
}

impl RetryPolicy {
    fn default_attempts() -> u32 {
        3
    }
    fn default_backoff() -> u64 {
        1000
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: Self::default_attempts(),
            backoff_ms: Self::default_backoff(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Probability of voting the correct final label, before hallucinations.
    #[serde(default)]
    pub accuracy: Option<f64>,
    /// Explicit `emission[truth][raw]` rows; overrides `accuracy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub hallucination: HallucinationRates,
    #[serde(default)]
    pub malformed_json_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub agent_id: String,
    pub backend: BackendKind,
    #[serde(default)]
    pub model: String,
    /// Full URL of the chat-completions or generate/chat endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "AgentSpec::default_timeout")]
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSpec>,
}

impl AgentSpec {
    fn default_timeout() -> u64 {
        120_000
    }
}

/// The configuration file as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub task: TaskRef,
    pub prompt: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_corpus: Option<SyntheticCorpusSpec>,
    pub run_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_store: Option<PathBuf>,
    #[serde(default)]
    pub prefilter: PrefilterSpec,
    pub voting: VotingSpec,
    #[serde(default)]
    pub concurrency: ConcurrencySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_schema_note: Option<String>,
    /// Free-form settings for forward compatibility; never interpreted.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extensions: BTreeMap<String, serde_json::Value>,
    pub agents: Vec<AgentSpec>,
}

/// Command-line overrides applied before validation.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub run_dir: Option<PathBuf>,
    pub min_votes: Option<u32>,
    pub seed: Option<u64>,
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub enum InputSource {
    File(PathBuf),
    Synthetic(SyntheticCorpusSpec),
}

/// A validated configuration with paths resolved against the config file's
/// directory.
#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub file: ConfigFile,
    pub schema: TaskSchema,
    pub template: PromptTemplate,
    pub input: InputSource,
    pub run_dir: PathBuf,
    pub truth: Option<PathBuf>,
    pub review_store: PathBuf,
    pub filter: Option<CompiledFilter>,
    pub min_votes: u32,
    /// Sorted, deduplicated thresholds including `min_votes`.
    pub thresholds: Vec<u32>,
    pub denominator: Denominator,
    pub agents: Vec<AgentSpec>,
    pub config_hash: String,
}

impl EnsembleConfig {
    pub fn agent_ids(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.agent_id.clone()).collect()
    }

    pub fn committee_size(&self) -> u32 {
        self.agents.len() as u32
    }

    pub fn agents_dir(&self) -> PathBuf {
        self.run_dir.join("agents")
    }

    /// Profile for a simulated agent; `None` for network backends.
    pub fn sim_profile(&self, agent: &AgentSpec) -> Option<SimAgentProfile> {
        build_profile(agent, &self.schema).ok().flatten()
    }
}

fn build_profile(agent: &AgentSpec, schema: &TaskSchema) -> Result<Option<SimAgentProfile>, String> {
    let Some(sim) = &agent.simulation else {
        return Ok(None);
    };
    let seed = sim.seed.ok_or("simulated backends require a seed")?;
    let mut profile = match (&sim.emission, sim.accuracy) {
        (Some(rows), _) => SimAgentProfile {
            agent_id: agent.agent_id.clone(),
            emission: rows.clone(),
            hallucination: sim.hallucination,
            malformed_json_rate: 0.0,
            seed,
        },
        (None, Some(acc)) => SimAgentProfile::calibrated(&agent.agent_id, schema, acc, sim.hallucination, seed)
            .map_err(|e| e.to_string())?,
        (None, None) => return Err("either accuracy or emission is required".into()),
    };
    profile.malformed_json_rate = sim.malformed_json_rate;
    profile.validate(schema).map_err(|e| e.to_string())?;
    Ok(Some(profile))
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn sorted(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => {
                let ordered: BTreeMap<&String, serde_json::Value> = m.iter().map(|(k, v)| (k, sorted(v))).collect();
                serde_json::to_value(ordered).expect("string keys")
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    sorted(value).to_string()
}

pub fn config_hash(file: &ConfigFile) -> String {
    let value = serde_json::to_value(file).expect("config serializes");
    hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
}

fn yaml_error(prefix: &str, e: serde_path_to_error::Error<serde_yaml::Error>) -> ConfigError {
    let inner_path = e.path().to_string();
    let inner_path = if inner_path == "." { String::new() } else { inner_path };
    let mut message = e.into_inner().to_string();
    // serde_yaml already prefixes some messages with the path.
    if let Some(rest) = message.strip_prefix(&format!("{inner_path}: ")) {
        message = rest.to_string();
    }
    let path = match (prefix.is_empty(), inner_path.is_empty()) {
        (true, _) => inner_path,
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}:{inner_path}"),
    };
    err(path, message)
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    serde_path_to_error::deserialize(serde_yaml::Deserializer::from_str(text)).map_err(|e| yaml_error("", e))
}

pub fn load_prompt(path: &Path) -> Result<PromptTemplate, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err("prompt", format!("{}: {e}", path.display())))?;
    serde_path_to_error::deserialize(serde_yaml::Deserializer::from_str(&text)).map_err(|e| yaml_error("prompt", e))
}

pub fn load_task_file(path: &Path) -> Result<TaskSchema, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err("task.file", format!("{}: {e}", path.display())))?;
    let spec: TaskSpec = serde_path_to_error::deserialize(serde_yaml::Deserializer::from_str(&text))
        .map_err(|e| yaml_error("task.file", e))?;
    TaskSchema::new(spec).map_err(|e| err("task.file", e.to_string()))
}

pub fn load_config(path: &Path) -> Result<EnsembleConfig, ConfigError> {
    load_config_with(path, &Overrides::default())
}

pub fn load_config_with(path: &Path, overrides: &Overrides) -> Result<EnsembleConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err("", format!("{}: {e}", path.display())))?;
    let mut file = parse_config(&text)?;
    if let Some(d) = &overrides.run_dir {
        file.run_dir = d.clone();
    }
    if let Some(k) = overrides.min_votes {
        file.voting.min_votes = k;
    }
    if let Some(t) = &overrides.truth {
        file.truth = Some(t.clone());
    }
    if let Some(seed) = overrides.seed {
        if let Some(c) = &mut file.synthetic_corpus {
            c.seed = seed;
        }
        for a in &mut file.agents {
            if let Some(sim) = &mut a.simulation {
                sim.seed = sim.seed.map(|s| s ^ seed);
            }
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    validate(file, base)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Checks a parsed configuration and resolves its paths against `base`.
pub fn validate(file: ConfigFile, base: &Path) -> Result<EnsembleConfig, ConfigError> {
    let schema = match &file.task {
        TaskRef { builtin: Some(name), file: None, inline: None } => match name.as_str() {
            "ecg_af" => TaskSchema::ecg_af(),
            _ => return Err(err("task.builtin", format!("unknown built-in task {name:?}"))),
        },
        TaskRef { builtin: None, file: Some(p), inline: None } => load_task_file(&resolve(base, p))?,
        TaskRef { builtin: None, file: None, inline: Some(spec) } => {
            TaskSchema::new(spec.clone()).map_err(|e| err("task.inline", e.to_string()))?
        }
        _ => return Err(err("task", "set exactly one of builtin, file or inline")),
    };

    let prompt_path = resolve(base, &file.prompt);
    if !prompt_path.is_file() {
        return Err(err("prompt", format!("{} does not exist", prompt_path.display())));
    }
    let template = load_prompt(&prompt_path)?;
    let missing = template.missing_schema_terms(&schema);
    if !missing.is_empty() {
        return Err(err(
            "prompt",
            format!("prompt instruction does not mention schema terms {missing:?}"),
        ));
    }

    let input = match (&file.input, &file.synthetic_corpus) {
        (Some(p), None) => {
            let p = resolve(base, p);
            if !p.is_file() {
                return Err(err("input", format!("{} does not exist", p.display())));
            }
            InputSource::File(p)
        }
        (None, Some(spec)) => {
            if spec.mix.len() != schema.n_labels() {
                return Err(err(
                    "synthetic_corpus.mix",
                    format!("{} proportions for {} labels", spec.mix.len(), schema.n_labels()),
                ));
            }
            class_counts(spec.n, &spec.mix).map_err(|e| err("synthetic_corpus.mix", e.to_string()))?;
            InputSource::Synthetic(spec.clone())
        }
        (Some(_), Some(_)) => return Err(err("input", "input and synthetic_corpus are mutually exclusive")),
        (None, None) => return Err(err("input", "either input or synthetic_corpus is required")),
    };

    let truth = match &file.truth {
        Some(p) => {
            let p = resolve(base, p);
            if !p.is_file() {
                return Err(err("truth", format!("{} does not exist", p.display())));
            }
            Some(p)
        }
        None => None,
    };

    let filter = match &file.prefilter {
        PrefilterSpec::Named(NamedPrefilter::Af) => {
            Some(compile_af_filter().map_err(|e| err("prefilter", e.to_string()))?)
        }
        PrefilterSpec::Named(NamedPrefilter::None) => None,
        PrefilterSpec::Custom { patterns: ps } => {
            if ps.is_empty() {
                return Err(err("prefilter.patterns", "at least one pattern is required"));
            }
            Some(CompiledFilter::new("custom", ps).map_err(|e| err("prefilter.patterns", e.to_string()))?)
        }
    };
    if filter.is_some() && schema.default_label().is_none() {
        return Err(err(
            "prefilter",
            "a prefilter needs the task to declare default_label for screened-out cases",
        ));
    }

    if file.agents.is_empty() {
        return Err(err("agents", "at least one agent is required"));
    }
    let mut seen = BTreeSet::new();
    for (i, a) in file.agents.iter().enumerate() {
        let at = |field: &str| format!("agents[{i}].{field}");
        if !safe_id(&a.agent_id) {
            return Err(err(
                at("agent_id"),
                format!("agent_id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'", a.agent_id),
            ));
        }
        if !seen.insert(a.agent_id.as_str()) {
            return Err(err(at("agent_id"), format!("duplicate agent_id {:?}", a.agent_id)));
        }
        if a.retry.max_attempts == 0 {
            return Err(err(at("retry.max_attempts"), "max_attempts must be at least 1"));
        }
        match a.backend {
            BackendKind::Simulated => {
                let Some(sim) = &a.simulation else {
                    return Err(err(at("simulation"), "simulated backends require a simulation block with a seed"));
                };
                if sim.seed.is_none() {
                    return Err(err(at("simulation.seed"), "simulated backends require a seed"));
                }
                build_profile(a, &schema).map_err(|m| err(at("simulation"), m))?;
            }
            BackendKind::ChatCompletionHttp | BackendKind::LocalModelServer => {
                let Some(endpoint) = &a.endpoint else {
                    return Err(err(at("endpoint"), "network backends require an endpoint"));
                };
                match url::Url::parse(endpoint) {
                    Ok(u) if matches!(u.scheme(), "http" | "https") => {}
                    Ok(u) => return Err(err(at("endpoint"), format!("unsupported scheme {:?}", u.scheme()))),
                    Err(e) => return Err(err(at("endpoint"), format!("malformed endpoint {endpoint:?}: {e}"))),
                }
                if a.model.is_empty() {
                    return Err(err(at("model"), "network backends require a model name"));
                }
                if a.simulation.is_some() {
                    return Err(err(at("simulation"), "only simulated backends take a simulation block"));
                }
            }
        }
    }

    let n = file.agents.len() as u32;
    let exceeds = |k: u32| format!("threshold exceeds committee size ({k} > {n} agents)");
    if file.voting.min_votes > n {
        return Err(err("voting.min_votes", exceeds(file.voting.min_votes)));
    }
    for (j, &k) in file.voting.sweep.iter().enumerate() {
        if k > n {
            return Err(err(format!("voting.sweep[{j}]"), exceeds(k)));
        }
    }
    if file.voting.sweep.windows(2).any(|w| w[0] > w[1]) {
        return Err(err("voting.sweep", "thresholds must be sorted ascending"));
    }
    if file.concurrency.requests_per_agent == 0 {
        return Err(err("concurrency.requests_per_agent", "must be at least 1"));
    }
    let mut thresholds: Vec<u32> = file.voting.sweep.clone();
    thresholds.push(file.voting.min_votes);
    thresholds.sort_unstable();
    thresholds.dedup();

    let run_dir = resolve(base, &file.run_dir);
    let review_store = file
        .review_store
        .as_ref()
        .map(|p| resolve(base, p))
        .unwrap_or_else(|| run_dir.join("review.jsonl"));

    Ok(EnsembleConfig {
        config_hash: config_hash(&file),
        schema,
        template,
        input,
        run_dir,
        truth,
        review_store,
        filter,
        min_votes: file.voting.min_votes,
        thresholds,
        denominator: file.voting.denominator,
        agents: file.agents.clone(),
        file,
    })
}
