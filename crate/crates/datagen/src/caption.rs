//! Caption prompting, providers and constraint validation.

use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{DatagenError, Result};
use crate::source::ClassTable;
use crate::split::stable_hash;

pub const MAX_WORDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// `{category}`, `{max_words}` and `{forbidden}` are substituted.
    pub template: String,
    pub max_words: usize,
    /// Attempts per sample before it is rejected.
    pub max_retries: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: "Describe the {category} in this aerial image in one referring \
                       expression. Use at most {max_words} words and mention the {category}. \
                       Do not use these words: {forbidden}."
                .into(),
            max_words: MAX_WORDS,
            max_retries: 3,
        }
    }
}

/// Renders the prompt for one target category.
pub fn build_prompt(category: &str, table: &ClassTable, cfg: &PromptConfig) -> Result<String> {
    let class = table
        .by_name(category)
        .ok_or_else(|| DatagenError::Config(format!("unknown category {category:?}")))?;
    let forbidden = if class.conflicting.is_empty() {
        "none".to_string()
    } else {
        class.conflicting.join(", ")
    };
    Ok(cfg
        .template
        .replace("{category}", category)
        .replace("{max_words}", &cfg.max_words.to_string())
        .replace("{forbidden}", &forbidden))
}

pub struct CaptionRequest<'a> {
    /// Lossless PNG of the patch.
    pub png: &'a [u8],
    pub prompt: &'a str,
    pub category: &'a str,
    /// Stable identity of the sample, for deterministic providers.
    pub key: &'a str,
    pub attempt: usize,
}

pub trait CaptionProvider: Sync {
    fn caption(&self, req: &CaptionRequest<'_>) -> Result<String>;
}

/// Template captions chosen by hashing the seed, sample and attempt.
#[derive(Clone, Debug)]
pub struct StubProvider {
    pub seed: u64,
}

const ADJECTIVES: [&str; 8] = [
    "large", "small", "grey", "long", "narrow", "wide", "dense", "bright",
];
const PLACES: [&str; 6] = [
    "near the center",
    "at the top left",
    "along the bottom edge",
    "beside the open area",
    "on the right side",
    "in the upper half",
];

impl CaptionProvider for StubProvider {
    fn caption(&self, req: &CaptionRequest<'_>) -> Result<String> {
        let r = stable_hash(&[
            &self.seed.to_le_bytes(),
            req.key.as_bytes(),
            req.category.as_bytes(),
            &(req.attempt as u64).to_le_bytes(),
        ]);
        let adj = ADJECTIVES[(r % 8) as usize];
        let place = PLACES[((r >> 8) % 6) as usize];
        // Some variants carry an uninformative clause for refinement to cut.
        Ok(match (r >> 16) % 4 {
            0 => format!("the {adj} {} {place}, no visible people", req.category),
            1 => format!("{adj} {} {place}", req.category),
            _ => format!("the {adj} {} {place}", req.category),
        })
    }
}

/// POSTs `{"prompt", "image_png_base64"}` as JSON and reads the caption as
/// the plain-text response body.
#[derive(Clone, Debug)]
pub struct HttpProvider {
    pub url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: usize,
    pub backoff: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpProviderConfig {
    pub url: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub retries: usize,
    pub backoff_ms: u64,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/caption".into(),
            api_key_env: "CAPTION_API_KEY".into(),
            timeout_secs: 60.0,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

impl HttpProvider {
    pub fn from_config(cfg: &HttpProviderConfig) -> Self {
        Self {
            url: cfg.url.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
            timeout: Duration::from_secs_f64(cfg.timeout_secs),
            retries: cfg.retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
        }
    }

    fn attempt(&self, agent: &ureq::Agent, body: &[u8]) -> std::result::Result<String, String> {
        let mut req = agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        if status.is_success() {
            Ok(text.trim().to_string())
        } else {
            Err(format!("HTTP {status}: {}", text.trim()))
        }
    }
}

impl CaptionProvider for HttpProvider {
    fn caption(&self, req: &CaptionRequest<'_>) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::to_vec(&serde_json::json!({
            "prompt": req.prompt,
            "image_png_base64": base64::engine::general_purpose::STANDARD.encode(req.png),
        }))
        .map_err(|e| DatagenError::Provider(e.to_string()))?;
        let mut last = String::new();
        for i in 0..=self.retries {
            if i > 0 {
                thread::sleep(self.backoff * (1 << (i - 1).min(16)));
            }
            match self.attempt(&agent, &body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!(
                        "caption request {} failed (attempt {}): {e}",
                        req.key,
                        i + 1
                    );
                    last = e;
                }
            }
        }
        Err(DatagenError::Provider(format!(
            "{} failed after {} attempts: {last}",
            self.url,
            self.retries + 1
        )))
    }
}

/// Lowercased words with surrounding punctuation stripped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Whether `text` names `term` at a word start (plural suffixes allowed).
pub fn mentions(text: &str, term: &str) -> bool {
    let hay = format!(" {} ", words(text).join(" "));
    let needle = format!(" {}", words(term).join(" "));
    hay.contains(&needle)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CaptionOutcome {
    Accepted(String),
    Rejected { attempts: usize, last: String },
}

/// Asks `provider` for a caption until one satisfies the word limit and
/// names the category, up to `cfg.max_retries` attempts.
pub fn generate_caption(
    provider: &dyn CaptionProvider,
    png: &[u8],
    key: &str,
    category: &str,
    table: &ClassTable,
    cfg: &PromptConfig,
) -> Result<CaptionOutcome> {
    let prompt = build_prompt(category, table, cfg)?;
    let attempts = cfg.max_retries.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        let text = provider.caption(&CaptionRequest {
            png,
            prompt: &prompt,
            category,
            key,
            attempt,
        })?;
        let n = text.split_whitespace().count();
        if n <= cfg.max_words && mentions(&text, category) {
            return Ok(CaptionOutcome::Accepted(text));
        }
        log::debug!("{key}: caption {text:?} violates constraints ({n} words)");
        last = text;
    }
    log::info!("{key}: rejected after {attempts} attempts, last caption {last:?}");
    Ok(CaptionOutcome::Rejected { attempts, last })
}
