//! Model clients.
//!
//! Every model the pipeline talks to implements [`Backend`]: text completion
//! with optional per-token log-probabilities, plus continuation scoring where
//! the backend supports it. [`MockBackend`] replays a declarative script
//! offline; [`HttpBackend`] speaks the common chat-completion wire format.

mod http;
mod limit;
mod mock;
mod retry;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpConfig};
pub use limit::{map_bounded, Limited};
pub use mock::{Matcher, MockBackend, MockRule, MockScript};
pub use retry::{with_retry, Retry};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error (status {status}): {message}")]
    Protocol { status: u16, message: String },
    #[error("backend does not support {0}")]
    Capability(String),
}

impl BackendError {
    pub fn transport(message: impl Into<String>) -> Self {
        BackendError::Transport {
            attempts: 1,
            message: message.into(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl BackendRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
            want_logprobs: false,
            stop: None,
        }
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn logprobs(mut self, on: bool) -> Self {
        self.want_logprobs = on;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens < 1 {
            return Err(BackendError::Precondition("max_tokens must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::Precondition(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    /// Natural log, always <= 0.
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenLogprob>>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tokens: None,
        }
    }

    /// Checks that tokens, when present, spell out `text` and carry
    /// non-positive log-probabilities.
    pub fn validate(&self) -> Result<(), BackendError> {
        if let Some(tokens) = &self.tokens {
            let joined: String = tokens.iter().map(|t| t.token.as_str()).collect();
            if joined != self.text {
                return Err(BackendError::Protocol {
                    status: 0,
                    message: "token texts do not concatenate to the completion text".into(),
                });
            }
            if let Some(bad) = tokens.iter().find(|t| !(t.logprob <= 0.0)) {
                return Err(BackendError::Protocol {
                    status: 0,
                    message: format!("logprob {} for token {:?} is not <= 0", bad.logprob, bad.token),
                });
            }
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError>;

    /// Log-probability of each token of `continuation` given `prefix`.
    fn score_tokens(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let _ = (prefix, continuation);
        Err(BackendError::Capability("token scoring".into()))
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn score_tokens(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score_tokens(prefix, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn score_tokens(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score_tokens(prefix, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn score_tokens(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score_tokens(prefix, continuation)
    }
}

/// Validates the request, then delegates. Use this instead of calling
/// `Backend::complete` directly when the backend is not trusted to check.
pub fn complete(backend: &dyn Backend, request: &BackendRequest) -> Result<Completion, BackendError> {
    request.validate()?;
    let c = backend.complete(request)?;
    c.validate()?;
    Ok(c)
}

pub fn score_tokens(
    backend: &dyn Backend,
    prefix: &str,
    continuation: &str,
) -> Result<Vec<f64>, BackendError> {
    if continuation.trim().is_empty() {
        return Err(BackendError::Precondition("continuation is empty".into()));
    }
    let lps = backend.score_tokens(prefix, continuation)?;
    if let Some(bad) = lps.iter().find(|l| !(**l <= 0.0)) {
        return Err(BackendError::Protocol {
            status: 0,
            message: format!("backend returned logprob {bad} > 0"),
        });
    }
    Ok(lps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_max_tokens_is_rejected() {
        let mock = MockBackend::new(MockScript::default());
        let err = complete(&mock, &BackendRequest::new("hi").max_tokens(0)).unwrap_err();
        assert!(matches!(err, BackendError::Precondition(_)));
    }

    #[test]
    fn completion_invariants() {
        let ok = Completion {
            text: "a b".into(),
            tokens: Some(vec![
                TokenLogprob { token: "a".into(), logprob: -0.1 },
                TokenLogprob { token: " b".into(), logprob: 0.0 },
            ]),
        };
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.text = "ab".into();
        assert!(bad.validate().is_err());
        let mut pos = ok;
        pos.tokens.as_mut().unwrap()[0].logprob = 0.5;
        assert!(pos.validate().is_err());
    }
}
