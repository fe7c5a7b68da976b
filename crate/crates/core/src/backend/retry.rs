use std::thread;
use std::time::Duration;

use super::{Backend, BackendError, BackendRequest, Completion};

/// Retries transport failures with exponential backoff
/// (`base_delay * 2^(attempt - 1)` between attempts). Protocol, capability
/// and precondition errors pass straight through.
#[derive(Debug)]
pub struct Retry<B> {
    inner: B,
    max_attempts: u32,
    base_delay: Duration,
}

pub fn with_retry<B: Backend>(
    backend: B,
    max_attempts: u32,
    base_delay: Duration,
) -> Result<Retry<B>, BackendError> {
    if max_attempts < 1 {
        return Err(BackendError::Precondition("max_attempts must be >= 1".into()));
    }
    Ok(Retry {
        inner: backend,
        max_attempts,
        base_delay,
    })
}

impl<B> Retry<B> {
    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 1u32;
        loop {
            match op() {
                Err(BackendError::Transport { message, .. }) => {
                    if attempt >= self.max_attempts {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    let delay = self.base_delay.saturating_mul(1u32 << (attempt - 1).min(16));
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl<B: Backend> Backend for Retry<B> {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        self.run(|| self.inner.complete(request))
    }

    fn score_tokens(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        self.run(|| self.inner.score_tokens(prefix, continuation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};

    fn flaky(n: usize) -> MockBackend {
        MockBackend::new(MockScript::new().contains("q", "ok")).with_transient_failures(n)
    }

    #[test]
    fn recovers_within_budget() {
        let r = with_retry(flaky(2), 3, Duration::ZERO).unwrap();
        assert_eq!(r.complete(&BackendRequest::new("q")).unwrap().text, "ok");
        assert_eq!(r.inner().calls(), 3);
    }

    #[test]
    fn single_attempt_surfaces_transport_error() {
        let r = with_retry(flaky(1), 1, Duration::ZERO).unwrap();
        assert_eq!(
            r.complete(&BackendRequest::new("q")).unwrap_err(),
            BackendError::Transport {
                attempts: 1,
                message: "injected mock failure".into()
            }
        );
    }

    #[test]
    fn exhaustion_reports_attempt_count() {
        let r = with_retry(flaky(10), 4, Duration::ZERO).unwrap();
        match r.complete(&BackendRequest::new("q")) {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(r.inner().calls(), 4);
    }

    #[test]
    fn precondition_errors_are_not_retried() {
        let r = with_retry(flaky(0), 5, Duration::ZERO).unwrap();
        let err = r.complete(&BackendRequest::new("q").max_tokens(0)).unwrap_err();
        assert!(matches!(err, BackendError::Precondition(_)));
        assert_eq!(r.inner().calls(), 1);
    }

    #[test]
    fn zero_attempts_rejected() {
        assert!(with_retry(flaky(0), 0, Duration::ZERO).is_err());
    }
}
