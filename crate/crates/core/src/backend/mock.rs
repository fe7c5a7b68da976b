use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest, Completion, TokenLogprob};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Contains(String),
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Exact(s) => prompt == s,
            Matcher::Contains(s) => prompt.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockRule {
    pub matcher: Matcher,
    pub reply: Completion,
}

/// File form of a rule: exactly one of `exact` / `contains`.
#[derive(Debug, Serialize, Deserialize)]
struct RuleRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ScriptRepr {
    #[serde(default, rename = "rule")]
    rules: Vec<RuleRepr>,
    #[serde(default)]
    unigram: BTreeMap<String, f64>,
}

/// Ordered reply rules (first match wins) and a unigram fallback model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockScript {
    rules: Vec<MockRule>,
    unigram: BTreeMap<String, f64>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, matcher: Matcher, reply: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            matcher,
            reply: Completion::text(reply),
        });
        self
    }

    pub fn contains(self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rule(Matcher::Contains(needle.into()), reply)
    }

    pub fn exact(self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rule(Matcher::Exact(prompt.into()), reply)
    }

    /// Replaces the unigram table. Probabilities must sum to 1.
    pub fn unigram<I, S>(mut self, table: I) -> Result<Self, BackendError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        self.unigram = table.into_iter().map(|(k, v)| (k.into(), v)).collect();
        self.validate()?;
        Ok(self)
    }

    pub fn rules(&self) -> &[MockRule] {
        &self.rules
    }

    pub fn unigram_table(&self) -> &BTreeMap<String, f64> {
        &self.unigram
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.unigram.is_empty() {
            return Ok(());
        }
        if let Some((k, p)) = self.unigram.iter().find(|(_, p)| !(**p > 0.0 && **p <= 1.0)) {
            return Err(BackendError::Precondition(format!(
                "unigram probability for {k:?} is {p}, need 0 < p <= 1"
            )));
        }
        let sum: f64 = self.unigram.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(BackendError::Precondition(format!(
                "unigram probabilities sum to {sum}, expected 1"
            )));
        }
        for r in &self.rules {
            r.reply.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        let repr: ScriptRepr = toml::from_str(text)
            .map_err(|e| BackendError::Precondition(format!("bad mock script: {e}")))?;
        let mut rules = Vec::with_capacity(repr.rules.len());
        for (i, r) in repr.rules.into_iter().enumerate() {
            let matcher = match (r.exact, r.contains) {
                (Some(e), None) => Matcher::Exact(e),
                (None, Some(c)) => Matcher::Contains(c),
                _ => {
                    return Err(BackendError::Precondition(format!(
                        "mock rule {i} needs exactly one of `exact` or `contains`"
                    )))
                }
            };
            rules.push(MockRule {
                matcher,
                reply: Completion {
                    text: r.reply,
                    tokens: r.tokens,
                },
            });
        }
        let script = Self {
            rules,
            unigram: repr.unigram,
        };
        script.validate()?;
        Ok(script)
    }

    pub fn to_toml(&self) -> String {
        let repr = ScriptRepr {
            rules: self
                .rules
                .iter()
                .map(|r| {
                    let (exact, contains) = match &r.matcher {
                        Matcher::Exact(e) => (Some(e.clone()), None),
                        Matcher::Contains(c) => (None, Some(c.clone())),
                    };
                    RuleRepr {
                        exact,
                        contains,
                        reply: r.reply.text.clone(),
                        tokens: r.reply.tokens.clone(),
                    }
                })
                .collect(),
            unigram: self.unigram.clone(),
        };
        toml::to_string(&repr).expect("mock script is always representable")
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Precondition(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }
}

/// Splits text into whitespace-led pieces whose concatenation is the input:
/// `"a b"` becomes `["a", " b"]`.
fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                out.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic offline backend driven by a [`MockScript`].
///
/// Counts every `complete` and `score_tokens` call and can inject a number of
/// leading transport failures for retry tests.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    calls: AtomicUsize,
    score_calls: AtomicUsize,
    failures_left: AtomicUsize,
    fail_after: Option<usize>,
    prompts: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            ..Self::default()
        }
    }

    /// The first `n` completion calls fail with a transport error.
    pub fn with_transient_failures(self, n: usize) -> Self {
        self.failures_left.store(n, Ordering::SeqCst);
        self
    }

    /// Every completion call after the first `n` fails with a transport error.
    pub fn failing_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    /// Prompts seen by `complete`, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }

    fn logprob(&self, piece: &str) -> Option<f64> {
        self.script.unigram.get(piece.trim()).map(|p| p.ln())
    }

    fn annotate(&self, text: String) -> Completion {
        let tokens: Option<Vec<TokenLogprob>> = pieces(&text)
            .into_iter()
            .map(|p| {
                self.logprob(p).map(|logprob| TokenLogprob {
                    token: p.to_string(),
                    logprob,
                })
            })
            .collect();
        Completion { text, tokens }
    }

    fn generate(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        if self.script.unigram.is_empty() {
            return Err(BackendError::Protocol {
                status: 404,
                message: "no mock rule matches the prompt".into(),
            });
        }
        let vocab: Vec<(&String, &f64)> = self.script.unigram.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(request.prompt.as_bytes()));
        let mut words = Vec::with_capacity(request.max_tokens as usize);
        for _ in 0..request.max_tokens {
            let word = if request.temperature == 0.0 {
                // Highest probability, ties to the lexicographically first.
                vocab
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(w, _)| w.as_str())
                    .unwrap_or_default()
            } else {
                let weights: Vec<f64> = vocab.iter().map(|(_, p)| p.powf(1.0 / request.temperature)).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = vocab.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                vocab[pick].0.as_str()
            };
            words.push(word);
        }
        Ok(self.annotate(words.join(" ")))
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        request.validate()?;
        if self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| f.checked_sub(1))
            .is_ok()
        {
            return Err(BackendError::transport("injected mock failure"));
        }
        if self.fail_after.is_some_and(|limit| n > limit) {
            return Err(BackendError::transport("mock backend went away"));
        }
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(request.prompt.clone());

        let mut completion = match self.script.rules.iter().find(|r| r.matcher.matches(&request.prompt)) {
            Some(rule) => {
                let mut c = rule.reply.clone();
                if request.want_logprobs && c.tokens.is_none() {
                    c = self.annotate(c.text);
                }
                c
            }
            None => self.generate(request)?,
        };
        if !request.want_logprobs {
            completion.tokens = None;
        }
        Ok(completion)
    }

    /// Whitespace tokenization; each token scores `ln p(token)` under the
    /// unigram table regardless of the prefix.
    fn score_tokens(&self, _prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        if self.script.unigram.is_empty() {
            return Err(BackendError::Capability(
                "token scoring (mock script has no unigram table)".into(),
            ));
        }
        if continuation.trim().is_empty() {
            return Err(BackendError::Precondition("continuation is empty".into()));
        }
        continuation
            .split_whitespace()
            .map(|w| {
                self.logprob(w).ok_or_else(|| {
                    BackendError::Precondition(format!("token {w:?} is not in the mock vocabulary"))
                })
            })
            .collect()
    }
}
