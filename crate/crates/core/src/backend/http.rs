//! Client for the widely used `/chat/completions` wire format.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, BackendRequest, Completion, TokenLogprob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full URL of the chat-completion endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; no auth header if unset.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug)]
pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpConfig,
    token: Option<String>,
    next_id: AtomicU64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Option<Vec<TokenEntry>>,
}

#[derive(Deserialize)]
struct TokenEntry {
    token: String,
    logprob: f64,
}

impl HttpBackend {
    /// Reads the bearer token from `config.auth_env` once, at construction.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Precondition(format!("auth variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            config,
            token,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn body(&self, request: &BackendRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": request.want_logprobs,
        });
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        body
    }
}

/// 429 and 5xx are treated as transient so the retry layer can back off.
fn classify_status(status: u16, body: String) -> BackendError {
    if status == 429 || status >= 500 {
        BackendError::transport(format!("HTTP {status}: {body}"))
    } else {
        BackendError::Protocol {
            status,
            message: body,
        }
    }
}

fn into_completion(resp: ChatResponse) -> Result<Completion, BackendError> {
    let choice = resp.choices.into_iter().next().ok_or(BackendError::Protocol {
        status: 200,
        message: "response has no choices".into(),
    })?;
    let text = choice.message.content.unwrap_or_default();
    let tokens = choice.logprobs.and_then(|l| l.content).map(|entries| {
        entries
            .into_iter()
            .map(|e| TokenLogprob {
                token: e.token,
                logprob: e.logprob.min(0.0),
            })
            .collect::<Vec<_>>()
    });
    // Servers occasionally return token lists that do not spell the text
    // (special tokens, trimming); drop them rather than misattribute scores.
    let tokens = tokens.filter(|t| t.iter().map(|e| e.token.as_str()).collect::<String>() == text);
    Ok(Completion { text, tokens })
}

impl Backend for HttpBackend {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        request.validate()?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("X-Request-Id", format!("medadapt-{id}"));
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(self.body(request))
            .map_err(|e| BackendError::transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(classify_status(status, body));
        }
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| BackendError::Protocol {
            status,
            message: format!("malformed response body: {e}"),
        })?;
        into_completion(parsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_logprobs() {
        let resp: ChatResponse = serde_json::from_str(
            r#"{"choices":[{"message":{"content":"Answer: A"},
                "logprobs":{"content":[{"token":"Answer","logprob":-0.1},{"token":":","logprob":0.0000001},{"token":" A","logprob":-0.5}]}}]}"#,
        )
        .unwrap();
        let c = into_completion(resp).unwrap();
        assert_eq!(c.text, "Answer: A");
        let t = c.tokens.unwrap();
        assert_eq!(t[1].logprob, 0.0);
        c_validate(&Completion { text: c.text, tokens: Some(t) });
    }

    fn c_validate(c: &Completion) {
        c.validate().unwrap();
    }

    #[test]
    fn mismatched_tokens_are_dropped() {
        let resp: ChatResponse = serde_json::from_str(
            r#"{"choices":[{"message":{"content":"B"},"logprobs":{"content":[{"token":"<s>","logprob":-1}]}}]}"#,
        )
        .unwrap();
        assert_eq!(into_completion(resp).unwrap().tokens, None);
    }

    #[test]
    fn status_classes() {
        assert!(classify_status(503, String::new()).is_retryable());
        assert!(classify_status(429, String::new()).is_retryable());
        assert_eq!(
            classify_status(401, "denied".into()),
            BackendError::Protocol {
                status: 401,
                message: "denied".into()
            }
        );
    }

    #[test]
    fn missing_auth_variable() {
        let err = HttpBackend::new(HttpConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            model: "m".into(),
            auth_env: Some("MEDADAPT_TEST_UNSET_VAR_0xdead".into()),
            timeout_secs: 1,
        })
        .unwrap_err();
        assert!(matches!(err, BackendError::Precondition(_)));
    }
}
