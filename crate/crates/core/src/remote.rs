//! Chat-completion clients for phrase expansion and constrained extraction.
//!
//! The wire format is the common `messages` / `choices[0].message.content`
//! shape. The API key is read from [`API_KEY_ENV`] and never stored in
//! configuration files.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{AnswerProvider, ConstrainedQuery};
use crate::template::{AnswerOption, Question};
use crate::terminology::{normalize_phrase, PhraseExpander, Provenance};

pub const API_KEY_ENV: &str = "PROTOKB_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Upper bound on phrasings accepted per label during expansion.
    pub max_variants: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "default".into(),
            timeout_secs: 60,
            max_variants: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// Sends one chat request and returns the assistant's text.
pub trait ChatTransport: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// Reads the key from the environment; a missing key sends no
    /// `Authorization` header (useful for local servers).
    pub fn from_config(config: &LlmConfig) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(config, api_key)
    }

    pub fn new(config: &LlmConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        HttpTransport {
            endpoint: config.endpoint.clone(),
            api_key,
            agent,
        }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = req
            .send_json(request)
            .map_err(|e| Error::Config(format!("request to {} failed: {e}", self.endpoint)))?;
        let body: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Parse(format!("chat response: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Parse("chat response has no choices".into()))
    }
}

const EXTRACT_SYSTEM: &str = "You read radiology reports and answer questions about them. \
Put only the answer on the first line of your reply.";

const EXPAND_SYSTEM: &str = "You list alternative phrasings of radiology findings. \
Reply with one phrasing per line and nothing else.";

/// Constrained extractor backed by a chat model.
pub struct LlmExtractor<T> {
    pub transport: T,
    pub model: String,
}

impl<T: ChatTransport> LlmExtractor<T> {
    pub fn new(transport: T, config: &LlmConfig) -> Self {
        LlmExtractor {
            transport,
            model: config.model.clone(),
        }
    }

    pub fn request(&self, query: &ConstrainedQuery) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![
                ChatMessage::system(EXTRACT_SYSTEM),
                ChatMessage::user(format!("Report:\n{}\n\n{}", query.report_excerpt, query.prompt)),
            ],
            temperature: 0.0,
        }
    }
}

impl<T: ChatTransport> AnswerProvider for LlmExtractor<T> {
    fn answer(&self, query: &ConstrainedQuery) -> Result<String> {
        self.transport
            .complete(&self.request(query))
            .map_err(|e| Error::ExtractorUnavailable(e.to_string()))
    }
}

/// Phrase expander backed by a chat model.
pub struct LlmExpander<T> {
    pub transport: T,
    pub model: String,
    pub max_variants: usize,
}

impl<T: ChatTransport> LlmExpander<T> {
    pub fn new(transport: T, config: &LlmConfig) -> Self {
        LlmExpander {
            transport,
            model: config.model.clone(),
            max_variants: config.max_variants,
        }
    }

    pub fn request(&self, option: &AnswerOption, question: &Question) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![
                ChatMessage::system(EXPAND_SYSTEM),
                ChatMessage::user(format!(
                    "Question: {}\nAnswer: {}\nList up to {} synonyms, abbreviations or alternative \
                     phrasings a radiologist might write for this answer.",
                    question.text, option.canonical_text, self.max_variants
                )),
            ],
            temperature: 0.0,
        }
    }
}

/// One phrase per line; list markers and numbering are stripped.
pub fn parse_phrase_list(reply: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in reply.lines() {
        let stripped = line
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '-' | '*' | '.' | ')' | '•'))
            .trim();
        let phrase = normalize_phrase(stripped);
        if !phrase.is_empty() && !out.contains(&phrase) {
            out.push(phrase);
        }
    }
    out
}

impl<T: ChatTransport> PhraseExpander for LlmExpander<T> {
    fn provenance(&self) -> Provenance {
        Provenance::LlmExpanded
    }

    fn propose(&self, option: &AnswerOption, question: &Question) -> Result<Vec<String>> {
        let reply = self
            .transport
            .complete(&self.request(option, question))
            .map_err(|e| Error::ExpanderUnavailable(e.to_string()))?;
        let mut phrases = parse_phrase_list(&reply);
        phrases.truncate(self.max_variants);
        Ok(phrases)
    }
}
