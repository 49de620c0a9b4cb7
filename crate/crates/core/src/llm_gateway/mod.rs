//! Prompt rendering, chat-completion providers (live or replayed) and answer parsing.

mod parse;
mod prompts;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use parse::{parse_artifact, Parsed, ParsedArtifact};
pub use prompts::{prompt_step_of, render_prompt, repair_prompt};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStep {
    Paths,
    Concurrency,
    Loops,
    Abstraction,
}

impl fmt::Display for PromptStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptStep::Paths => "paths",
            PromptStep::Concurrency => "concurrency",
            PromptStep::Loops => "loops",
            PromptStep::Abstraction => "abstraction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("process description is empty")]
    EmptyDescription,
    #[error("the {0} prompt needs the activity list")]
    MissingActivities(PromptStep),
    #[error("provider did not answer in time")]
    ProviderTimeout,
    #[error("no recorded exchange for prompt digest {0}")]
    ReplayMiss(String),
    #[error("provider answered with HTTP status {0}")]
    HttpError(u16),
    #[error("provider transport failed: {0}")]
    Transport(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("unusable response: {0}")]
    MalformedResponse(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    OpenaiCompatible,
    GeminiCompatible,
    Replay,
}

impl std::str::FromStr for ProviderKind {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<ProviderKind, GatewayError> {
        match s {
            "openai" | "openai-compatible" => Ok(ProviderKind::OpenaiCompatible),
            "gemini" | "gemini-compatible" => Ok(ProviderKind::GeminiCompatible),
            "replay" => Ok(ProviderKind::Replay),
            other => Err(GatewayError::Config(format!("unknown provider `{other}`"))),
        }
    }
}

pub const DEFAULT_API_KEY_ENV: &str = "PRAGMOS_API_KEY";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_kind: ProviderKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    /// Name of the environment variable holding the key.
    #[serde(default)]
    pub api_key_ref: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    #[serde(default)]
    pub replay_dir: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn replay(dir: impl Into<PathBuf>) -> ProviderConfig {
        ProviderConfig {
            provider_kind: ProviderKind::Replay,
            base_url: None,
            model_name: None,
            api_key_ref: None,
            timeout_secs: 60,
            max_retries: 2,
            replay_dir: Some(dir.into()),
        }
    }

    /// Reads PRAGMOS_PROVIDER, PRAGMOS_MODEL, PRAGMOS_BASE_URL and
    /// PRAGMOS_REPLAY_DIR. The key itself stays in PRAGMOS_API_KEY.
    pub fn from_env() -> Result<ProviderConfig, GatewayError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let kind: ProviderKind = var("PRAGMOS_PROVIDER").as_deref().unwrap_or("replay").parse()?;
        let config = ProviderConfig {
            provider_kind: kind,
            base_url: var("PRAGMOS_BASE_URL"),
            model_name: var("PRAGMOS_MODEL"),
            api_key_ref: (kind != ProviderKind::Replay).then(|| DEFAULT_API_KEY_ENV.to_string()),
            timeout_secs: 60,
            max_retries: 2,
            replay_dir: var("PRAGMOS_REPLAY_DIR").map(PathBuf::from),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.provider_kind {
            ProviderKind::Replay if self.replay_dir.is_none() => {
                Err(GatewayError::Config("replay provider needs a replay directory".into()))
            }
            ProviderKind::OpenaiCompatible | ProviderKind::GeminiCompatible => {
                match &self.api_key_ref {
                    None => return Err(GatewayError::Config("live provider needs api_key_ref".into())),
                    Some(r) if r.is_empty() || r.contains(char::is_whitespace) => {
                        return Err(GatewayError::Config("api_key_ref must name an environment variable".into()))
                    }
                    _ => {}
                }
                if self.model_name.is_none() {
                    return Err(GatewayError::Config("live provider needs a model name".into()));
                }
                Ok(())
            }
            ProviderKind::Replay => Ok(()),
        }
    }

    pub fn is_live(&self) -> bool {
        self.provider_kind != ProviderKind::Replay
    }

    pub fn client(&self) -> Result<Box<dyn ChatModel>, GatewayError> {
        self.validate()?;
        Ok(match self.provider_kind {
            ProviderKind::Replay => Box::new(ReplayProvider {
                dir: self.replay_dir.clone().expect("validated"),
            }),
            kind => Box::new(HttpProvider {
                kind,
                config: self.clone(),
            }),
        })
    }
}

/// One prompt in, one answer out.
pub trait ChatModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError>;
}

/// Replay key of a prompt: the first 16 hex digits of its SHA-256.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))[..16].to_string()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub prompt: String,
    pub response: String,
}

pub struct ReplayProvider {
    pub dir: PathBuf,
}

impl ChatModel for ReplayProvider {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let digest = prompt_digest(prompt);
        let file = self.dir.join(format!("{digest}.json"));
        let text = std::fs::read_to_string(&file).map_err(|_| GatewayError::ReplayMiss(digest.clone()))?;
        let record: ReplayRecord =
            serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", file.display())))?;
        if record.prompt != prompt {
            return Err(GatewayError::ReplayMiss(digest));
        }
        Ok(record.response)
    }
}

/// Writes a replay file for `prompt` and returns its path.
pub fn record_replay(dir: &Path, prompt: &str, response: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", prompt_digest(prompt)));
    let record = ReplayRecord {
        prompt: prompt.to_string(),
        response: response.to_string(),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(path)
}

struct HttpProvider {
    kind: ProviderKind,
    config: ProviderConfig,
}

impl HttpProvider {
    fn key(&self) -> Result<String, GatewayError> {
        let var = self.config.api_key_ref.as_deref().expect("validated");
        std::env::var(var).map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))
    }
}

fn transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::ProviderTimeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GatewayError::ProviderTimeout,
        ureq::Error::StatusCode(s) => GatewayError::HttpError(s),
        other => GatewayError::Transport(other.to_string()),
    }
}

impl ChatModel for HttpProvider {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let key = self.key()?;
        let model = self.config.model_name.as_deref().expect("validated");
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let (request, body) = match self.kind {
            ProviderKind::OpenaiCompatible => {
                let base = self.config.base_url.as_deref().unwrap_or("https://api.openai.com/v1");
                (
                    agent
                        .post(format!("{}/chat/completions", base.trim_end_matches('/')))
                        .header("Authorization", format!("Bearer {key}")),
                    json!({
                        "model": model,
                        "temperature": 0,
                        "messages": [{"role": "user", "content": prompt}],
                    }),
                )
            }
            _ => {
                let base = self
                    .config
                    .base_url
                    .as_deref()
                    .unwrap_or("https://generativelanguage.googleapis.com/v1beta");
                (
                    agent
                        .post(format!("{}/models/{model}:generateContent", base.trim_end_matches('/')))
                        .header("x-goog-api-key", key),
                    json!({
                        "contents": [{"role": "user", "parts": [{"text": prompt}]}],
                        "generationConfig": {"temperature": 0},
                    }),
                )
            }
        };
        let mut response = request.send_json(&body).map_err(transport)?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(GatewayError::HttpError(status));
        }
        let value: Value = response.body_mut().read_json().map_err(transport)?;
        let text = match self.kind {
            ProviderKind::OpenaiCompatible => value["choices"][0]["message"]["content"].as_str().map(str::to_string),
            _ => value["candidates"][0]["content"]["parts"].as_array().map(|parts| {
                parts
                    .iter()
                    .filter_map(|p| p["text"].as_str())
                    .collect::<Vec<_>>()
                    .join("")
            }),
        };
        text.ok_or_else(|| GatewayError::MalformedResponse("provider reply carries no text".into()))
    }
}

/// Answers each prompt with a fixed text chosen by the prompt's step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedModel {
    #[serde(flatten)]
    pub answers: std::collections::BTreeMap<PromptStep, String>,
}

impl ChatModel for ScriptedModel {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        prompt_step_of(prompt)
            .and_then(|s| self.answers.get(&s))
            .cloned()
            .ok_or_else(|| GatewayError::ReplayMiss(prompt_digest(prompt)))
    }
}

/// Passes prompts through and writes every successful exchange as a replay file.
pub struct Recording<'a> {
    pub inner: &'a dyn ChatModel,
    pub dir: PathBuf,
}

impl ChatModel for Recording<'_> {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let answer = self.inner.complete(prompt)?;
        record_replay(&self.dir, prompt, &answer).map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(answer)
    }
}

/// Sends one prompt through the configured provider.
pub fn invoke(config: &ProviderConfig, prompt: &str) -> Result<String, GatewayError> {
    config.client()?.complete(prompt)
}

/// One prompt/answer round trip, kept verbatim for the audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub step: PromptStep,
    pub prompt_text: String,
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub parsed_ok: bool,
    pub attempt: u32,
    pub timestamp: DateTime<Utc>,
}
