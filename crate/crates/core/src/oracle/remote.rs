//! Client for OpenAI-compatible `/v1/completions` servers.
//!
//! Scoring sends the rendered prompt followed by the frozen response with
//! `echo: true, max_tokens: 0` and reads back the per-token log-probabilities
//! of the echoed text. The response region is the run of server tokens whose
//! character offset is at or past the end of the rendered prompt.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{LikelihoodOracle, TokenLikelihoods};
use crate::corpus::{render_prompt, Instance, SubsetMask};
use crate::error::{Error, Result};
use crate::eval::ResponseGenerator;

pub const ENV_API_BASE: &str = "CAMAB_API_BASE";
pub const ENV_API_KEY: &str = "CAMAB_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL without the `/v1/completions` suffix.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub initial_backoff: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }

    /// Read the endpoint from `CAMAB_API_BASE` and an optional key from
    /// `CAMAB_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let base = std::env::var(ENV_API_BASE)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .ok_or_else(|| {
                Error::Capability(format!("remote oracle requires {ENV_API_BASE} to be set"))
            })?;
        let mut config = Self::new(base, model);
        config.api_key = std::env::var(ENV_API_KEY).ok().filter(|v| !v.is_empty());
        Ok(config)
    }

    fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/completions")
    }
}

/// Shared HTTP plumbing with bounded retries.
#[derive(Clone)]
struct Client {
    config: RemoteConfig,
    agent: ureq::Agent,
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl Client {
    fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let attempts = self.config.max_attempts.max(1);
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(message)) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(Failure::Retry(message)) => last = message,
            }
            if attempt < attempts {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    fn post_once(&self, body: &Value) -> Result<Value, Failure> {
        let mut request = self.agent.post(self.config.completions_url());
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| Failure::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Retry(format!("reading body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(format!("malformed response body: {e}"))),
            401 | 403 => Err(Failure::Fatal(format!(
                "authentication failed (HTTP {status}); check {ENV_API_KEY}"
            ))),
            429 | 500..=599 => Err(Failure::Retry(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(Failure::Fatal(format!("HTTP {status}: {}", snippet(&text)))),
        }
    }
}

fn snippet(text: &str) -> &str {
    match text.char_indices().nth(200) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Option<Vec<String>>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

fn malformed(message: impl Into<String>) -> Error {
    Error::Transport {
        attempts: 1,
        message: format!("malformed response body: {}", message.into()),
    }
}

/// Likelihood oracle backed by a remote completions endpoint.
#[derive(Clone)]
pub struct RemoteOracle {
    client: Client,
}

impl RemoteOracle {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            client: Client::new(config),
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.client.config
    }
}

/// Prompt plus response as sent on the wire, and the character offset where
/// the response region begins.
fn scoring_text(instance: &Instance, mask: &SubsetMask) -> Result<(String, usize)> {
    let prompt = render_prompt(instance, mask)?;
    let boundary = prompt.chars().count();
    Ok((format!("{prompt} {}", instance.response_text()), boundary))
}

/// Map echoed server tokens onto the instance's response tokens.
fn extract_response(
    instance: &Instance,
    full_text: &str,
    boundary: usize,
    body: Value,
) -> Result<TokenLikelihoods> {
    let parsed: CompletionResponse =
        serde_json::from_value(body).map_err(|e| malformed(e.to_string()))?;
    let logprobs = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.logprobs)
        .ok_or_else(|| malformed("missing choices[0].logprobs"))?;
    let n = logprobs.text_offset.len();
    if logprobs.token_logprobs.len() != n {
        return Err(malformed("token_logprobs and text_offset differ in length"));
    }

    let chars: Vec<char> = full_text.chars().collect();
    let token_texts: Vec<String> = match logprobs.tokens {
        Some(tokens) if tokens.len() == n => tokens,
        _ => (0..n)
            .map(|i| {
                let start = logprobs.text_offset[i].min(chars.len());
                let end = logprobs
                    .text_offset
                    .get(i + 1)
                    .copied()
                    .unwrap_or(chars.len())
                    .clamp(start, chars.len());
                chars[start..end].iter().collect()
            })
            .collect(),
    };

    let first = logprobs.text_offset.iter().position(|&o| o >= boundary);
    let region: Vec<usize> = match first {
        Some(i) => (i..n).collect(),
        None => Vec::new(),
    };
    let aligned_start = first.is_some_and(|i| logprobs.text_offset[i] == boundary);
    if !aligned_start || region.len() != instance.n_tokens() {
        return Err(Error::Alignment {
            expected: instance.response_tokens().to_vec(),
            returned: region.iter().map(|&i| token_texts[i].clone()).collect(),
        });
    }

    let values = region
        .iter()
        .map(|&i| {
            logprobs.token_logprobs[i]
                .ok_or_else(|| malformed(format!("null logprob for response token {i}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    TokenLikelihoods::from_logprobs(&values)
}

impl LikelihoodOracle for RemoteOracle {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods> {
        let (text, boundary) = scoring_text(instance, mask)?;
        let body = json!({
            "model": self.client.config.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let response = self.client.post(&body)?;
        extract_response(instance, &text, boundary, response)
    }
}

/// Greedy (temperature 0) completion through the same endpoint.
#[derive(Clone)]
pub struct RemoteGenerator {
    client: Client,
}

impl RemoteGenerator {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            client: Client::new(config),
        }
    }
}

impl ResponseGenerator for RemoteGenerator {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Vec<String>> {
        let body = json!({
            "model": self.client.config.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": 0.0,
        });
        let parsed: CompletionResponse = serde_json::from_value(self.client.post(&body)?)
            .map_err(|e| malformed(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| malformed("no choices"))?;
        Ok(choice.text.split_whitespace().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst() -> Instance {
        Instance::new(
            "r",
            "Q?",
            vec!["ctx".into()],
            vec!["yes".into(), "sir".into()],
        )
        .unwrap()
    }

    /// Split on spaces, each token carrying its leading space.
    fn word_tokens(text: &str) -> (Vec<String>, Vec<usize>) {
        let mut tokens = Vec::new();
        let mut offsets = Vec::new();
        let mut current = String::new();
        let mut start = 0;
        for (i, c) in text.chars().enumerate() {
            if c == ' ' && !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
                offsets.push(start);
                start = i;
            }
            current.push(c);
        }
        tokens.push(current);
        offsets.push(start);
        (tokens, offsets)
    }

    fn body(tokens: &[String], offsets: &[usize], lps: &[f64]) -> Value {
        json!({"choices": [{"text": "", "logprobs": {
            "tokens": tokens, "token_logprobs": lps, "text_offset": offsets}}]})
    }

    #[test]
    fn extracts_response_region() {
        let i = inst();
        let (text, boundary) = scoring_text(&i, &i.full_mask()).unwrap();
        assert_eq!(text, "ctx\n\nQ? yes sir");
        let (tokens, offsets) = word_tokens(&text);
        let n = tokens.len();
        let mut lps = vec![-3.0; n];
        lps[n - 2] = -std::f64::consts::LN_2;
        lps[n - 1] = 0.0;
        let l = extract_response(&i, &text, boundary, body(&tokens, &offsets, &lps)).unwrap();
        assert!((l.values()[0] - 0.5).abs() < 1e-12);
        assert_eq!(l.values()[1], 1.0);
    }

    #[test]
    fn extra_token_is_misaligned() {
        let i = inst();
        let (text, boundary) = scoring_text(&i, &i.full_mask()).unwrap();
        let (mut tokens, mut offsets) = word_tokens(&text);
        // split " sir" into " s" + "ir"
        let last = tokens.pop().unwrap();
        let off = offsets.pop().unwrap();
        tokens.extend([last[..2].to_string(), last[2..].to_string()]);
        offsets.extend([off, off + 2]);
        let lps = vec![-1.0; tokens.len()];
        let err = extract_response(&i, &text, boundary, body(&tokens, &offsets, &lps)).unwrap_err();
        match err {
            Error::Alignment { expected, returned } => {
                assert_eq!(expected, ["yes", "sir"]);
                assert_eq!(returned.len(), 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn straddling_token_is_misaligned() {
        let i = inst();
        let (text, boundary) = scoring_text(&i, &i.full_mask()).unwrap();
        // one token covering "Q? yes" crosses the prompt boundary
        let tokens: Vec<String> = vec!["ctx\n\n".into(), "Q? yes".into(), " sir".into()];
        let offsets = vec![0, 5, 11];
        let err =
            extract_response(&i, &text, boundary, body(&tokens, &offsets, &[0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::Alignment { .. }));
    }

    #[test]
    fn missing_logprobs_is_transport_error() {
        let i = inst();
        let err = extract_response(&i, "x", 0, json!({"choices": [{"text": "x"}]})).unwrap_err();
        assert!(matches!(err, Error::Transport { .. }));
    }

    #[test]
    fn url_normalization() {
        assert_eq!(
            RemoteConfig::new("http://h:1/", "m").completions_url(),
            "http://h:1/v1/completions"
        );
        assert_eq!(
            RemoteConfig::new("http://h:1/v1", "m").completions_url(),
            "http://h:1/v1/completions"
        );
    }
}
