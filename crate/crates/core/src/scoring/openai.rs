//! OpenAI-compatible `/completions` client returning next-token logprobs.
//!
//! One request per prompt: `max_tokens = 1`, `temperature = 0`, and
//! `logprobs = top_k`. The distribution is taken from
//! `choices[0].logprobs.top_logprobs[0]`.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendProfile, MassKind, ScoreRequest, TokenDistribution};

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    logprobs: usize,
    echo: bool,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    top_logprobs: Vec<Option<BTreeMap<String, f64>>>,
}

pub struct OpenAiCompletions {
    method_id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    top_k: usize,
    returns: MassKind,
    agent: ureq::Agent,
}

impl OpenAiCompletions {
    /// Builds a client from a profile. The API key is read from the
    /// environment variable the profile names; the key itself never appears
    /// in configuration.
    pub fn from_profile(profile: &BackendProfile) -> Result<Self, String> {
        profile.validate()?;
        let endpoint = profile.endpoint.as_deref().expect("validated");
        let api_key = match &profile.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| format!("{}: environment variable {var} is not set", profile.name))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(profile.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            method_id: profile.name.clone(),
            url: completions_url(endpoint),
            model: profile.model.clone().expect("validated"),
            api_key,
            top_k: profile.top_k,
            returns: profile.returns,
            agent,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn completions_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/completions") {
        base.to_string()
    } else {
        format!("{base}/completions")
    }
}

/// Pulls the first-position top-K map out of a completions response body.
fn parse_distribution(body: &str, kind: MassKind) -> Result<TokenDistribution, BackendError> {
    let resp: CompletionResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("bad JSON: {e}")))?;
    let first = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let top = first
        .logprobs
        .and_then(|l| l.top_logprobs.into_iter().next().flatten())
        .ok_or_else(|| BackendError::Protocol("response has no top_logprobs".into()))?;
    Ok(TokenDistribution {
        tokens: top.into_iter().collect(),
        kind,
    })
}

impl Backend for OpenAiCompletions {
    fn method_id(&self) -> &str {
        &self.method_id
    }

    fn next_token(&self, request: &ScoreRequest<'_>) -> Result<TokenDistribution, BackendError> {
        let body = CompletionRequest {
            model: &self.model,
            prompt: request.prompt,
            max_tokens: 1,
            temperature: 0.0,
            logprobs: self.top_k,
            echo: false,
        };
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => parse_distribution(&text, self.returns),
            408 | 429 | 500..=599 => Err(BackendError::Transport(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::Protocol(format!("HTTP {status}: {text}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_joining() {
        assert_eq!(completions_url("http://h:1/v1"), "http://h:1/v1/completions");
        assert_eq!(completions_url("http://h:1/v1/"), "http://h:1/v1/completions");
        assert_eq!(
            completions_url("http://h:1/v1/completions"),
            "http://h:1/v1/completions"
        );
    }

    #[test]
    fn parses_top_logprobs() {
        let body = r#"{"id":"x","choices":[{"text":" yes","index":0,"logprobs":{
            "tokens":[" yes"],"token_logprobs":[-0.1],
            "top_logprobs":[{" yes":-0.1,"No":-2.5,"maybe":-4.0}]}}]}"#;
        let d = parse_distribution(body, MassKind::Logprob).unwrap();
        assert_eq!(d.tokens.len(), 3);
        assert_eq!(d.kind, MassKind::Logprob);
    }

    #[test]
    fn missing_logprobs_is_protocol_error() {
        let err = parse_distribution(r#"{"choices":[{"text":"yes"}]}"#, MassKind::Logprob).unwrap_err();
        assert!(!err.is_retryable());
        let err = parse_distribution("not json", MassKind::Logprob).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }
}
