//! Blank-filling pretraining examples.
//!
//! A token sequence is corrupted by replacing sampled spans with a MASK
//! sentinel (Part A). The removed spans, each prefixed with START, are
//! concatenated in shuffled order to form Part B, which the model regenerates
//! autoregressively (targets end each span with END). Part A precedes Part B
//! in the flat index space used by positions and the attention contract.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GlmError {
    #[error("invalid span sampling parameters: {0}")]
    InvalidParameters(String),
    #[error("infeasible span configuration: {0}")]
    Infeasible(String),
    #[error("invalid span set: {0}")]
    InvalidSpans(String),
    #[error("invalid tokens: {0}")]
    InvalidTokens(String),
    #[error("inconsistent example: {0}")]
    Inconsistent(String),
    #[error("index {index} out of range for sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Vocabulary size and the reserved sentinel ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentinels {
    pub vocab_size: u32,
    pub mask: TokenId,
    pub start: TokenId,
    pub end: TokenId,
}

impl Sentinels {
    /// Reserves the three ids directly above `base_vocab` ordinary tokens.
    pub fn after(base_vocab: u32) -> Self {
        Self {
            vocab_size: base_vocab + 3,
            mask: base_vocab,
            start: base_vocab + 1,
            end: base_vocab + 2,
        }
    }

    pub fn is_sentinel(&self, t: TokenId) -> bool {
        t == self.mask || t == self.start || t == self.end
    }

    fn validate(&self) -> Result<(), GlmError> {
        let ids = [self.mask, self.start, self.end];
        if ids.iter().any(|&i| i >= self.vocab_size) {
            return Err(GlmError::InvalidTokens("sentinel id outside vocabulary".into()));
        }
        if self.mask == self.start || self.mask == self.end || self.start == self.end {
            return Err(GlmError::InvalidTokens("sentinel ids must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Non-overlapping spans sorted by start, plus the order in which they are
/// emitted into Part B (`permutation[j]` is the span index placed j-th).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSet {
    pub spans: Vec<Span>,
    pub permutation: Vec<usize>,
}

impl SpanSet {
    /// Identity permutation; spans are sorted by start.
    pub fn new(mut spans: Vec<Span>) -> Self {
        spans.sort_by_key(|s| s.start);
        let permutation = (0..spans.len()).collect();
        Self { spans, permutation }
    }

    pub fn with_permutation(mut self, permutation: Vec<usize>) -> Self {
        self.permutation = permutation;
        self
    }

    pub fn masked_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    pub fn validate(&self, n: usize) -> Result<(), GlmError> {
        let mut prev_end = 0usize;
        for (i, s) in self.spans.iter().enumerate() {
            if s.len == 0 {
                return Err(GlmError::InvalidSpans(format!("span {i} has length 0")));
            }
            if i > 0 && s.start < prev_end {
                return Err(GlmError::InvalidSpans(format!(
                    "span {i} overlaps or is out of order"
                )));
            }
            if s.start + s.len > n {
                return Err(GlmError::InvalidSpans(format!(
                    "span {i} ({}..{}) exceeds sequence length {n}",
                    s.start,
                    s.start + s.len
                )));
            }
            prev_end = s.start + s.len;
        }
        let mut seen = vec![false; self.spans.len()];
        if self.permutation.len() != self.spans.len() {
            return Err(GlmError::InvalidSpans("permutation length mismatch".into()));
        }
        for &p in &self.permutation {
            if p >= seen.len() || seen[p] {
                return Err(GlmError::InvalidSpans("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        Ok(())
    }
}

/// Draws a span length from a geometric law on {1, 2, ...} with the given mean.
fn geometric_len<R: Rng>(rng: &mut R, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.random::<f64>();
    // 1 - u is in (0, 1].
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize
}

/// Samples non-overlapping spans covering `round(mask_ratio * n)` tokens.
///
/// Span lengths are geometric with mean `mean_span_len`, the last one
/// truncated so the total lands exactly on the target. Spans are placed
/// uniformly among the unmasked tokens and the Part-B order is a uniform
/// shuffle.
pub fn sample_spans(
    n: usize,
    mask_ratio: f64,
    mean_span_len: f64,
    seed: u64,
) -> Result<SpanSet, GlmError> {
    if n < 2 {
        return Err(GlmError::InvalidParameters(format!("n = {n}, need n >= 2")));
    }
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(GlmError::InvalidParameters(format!(
            "mask_ratio = {mask_ratio}, need 0 < ratio < 1"
        )));
    }
    if !(mean_span_len >= 1.0) || !mean_span_len.is_finite() {
        return Err(GlmError::InvalidParameters(format!(
            "mean_span_len = {mean_span_len}, need >= 1"
        )));
    }
    let target = (mask_ratio * n as f64).round() as usize;
    if target == 0 {
        return Err(GlmError::Infeasible(format!(
            "ratio {mask_ratio} masks no tokens of {n}"
        )));
    }
    if target >= n {
        return Err(GlmError::Infeasible(format!(
            "ratio {mask_ratio} masks all {n} tokens"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lengths = Vec::new();
    let mut total = 0usize;
    while total < target {
        let len = geometric_len(&mut rng, mean_span_len).min(target - total);
        lengths.push(len);
        total += len;
    }
    lengths.shuffle(&mut rng);

    // Interleave k span slots with the n - total visible tokens uniformly.
    let k = lengths.len();
    let visible = n - total;
    let mut slots = rand::seq::index::sample(&mut rng, visible + k, k).into_vec();
    slots.sort_unstable();
    let mut spans = Vec::with_capacity(k);
    let mut offset = 0usize;
    for (j, (&slot, &len)) in slots.iter().zip(&lengths).enumerate() {
        // `slot - j` visible tokens precede this span.
        let start = (slot - j) + offset;
        spans.push(Span { start, len });
        offset += len;
    }
    let mut permutation: Vec<usize> = (0..k).collect();
    permutation.shuffle(&mut rng);
    let set = SpanSet { spans, permutation };
    debug_assert!(set.validate(n).is_ok());
    Ok(set)
}

/// Part A / Part B layout with per-token two-dimensional positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedExample {
    pub part_a: Vec<TokenId>,
    pub part_b: Vec<TokenId>,
    /// Token to predict at each Part-B position.
    pub targets: Vec<TokenId>,
    /// Position in the corrupted text; Part-B tokens inherit their MASK's.
    pub pos_1: Vec<usize>,
    /// 0 on Part A, 1.. within each Part-B span block.
    pub pos_2: Vec<usize>,
}

impl CorruptedExample {
    pub fn total_len(&self) -> usize {
        self.part_a.len() + self.part_b.len()
    }
}

pub fn corrupt(
    tokens: &[TokenId],
    spans: &SpanSet,
    sentinels: &Sentinels,
) -> Result<CorruptedExample, GlmError> {
    sentinels.validate()?;
    if tokens.is_empty() {
        return Err(GlmError::InvalidTokens("empty token sequence".into()));
    }
    if let Some(&t) = tokens
        .iter()
        .find(|&&t| t >= sentinels.vocab_size || sentinels.is_sentinel(t))
    {
        return Err(GlmError::InvalidTokens(format!(
            "token {t} is a sentinel or outside the vocabulary"
        )));
    }
    spans.validate(tokens.len())?;

    let mut part_a = Vec::with_capacity(tokens.len());
    let mut mask_pos = Vec::with_capacity(spans.spans.len());
    let mut cursor = 0usize;
    for s in &spans.spans {
        part_a.extend_from_slice(&tokens[cursor..s.start]);
        mask_pos.push(part_a.len());
        part_a.push(sentinels.mask);
        cursor = s.start + s.len;
    }
    part_a.extend_from_slice(&tokens[cursor..]);

    let b_len = spans.masked_tokens() + spans.spans.len();
    let mut part_b = Vec::with_capacity(b_len);
    let mut targets = Vec::with_capacity(b_len);
    let mut pos_1: Vec<usize> = (0..part_a.len()).collect();
    let mut pos_2 = vec![0usize; part_a.len()];
    for &si in &spans.permutation {
        let s = spans.spans[si];
        let body = &tokens[s.start..s.start + s.len];
        part_b.push(sentinels.start);
        part_b.extend_from_slice(body);
        targets.extend_from_slice(body);
        targets.push(sentinels.end);
        pos_1.extend(std::iter::repeat_n(mask_pos[si], s.len + 1));
        pos_2.extend(1..=s.len + 1);
    }
    Ok(CorruptedExample {
        part_a,
        part_b,
        targets,
        pos_1,
        pos_2,
    })
}

/// Inverts [`corrupt`], checking every layout invariant on the way.
pub fn reconstruct(
    example: &CorruptedExample,
    sentinels: &Sentinels,
) -> Result<Vec<TokenId>, GlmError> {
    let bad = |m: &str| GlmError::Inconsistent(m.to_string());
    let a = &example.part_a;
    let b = &example.part_b;
    let total = a.len() + b.len();
    if example.pos_1.len() != total || example.pos_2.len() != total {
        return Err(bad("position arrays do not cover Part A + Part B"));
    }
    if example.targets.len() != b.len() {
        return Err(bad("targets do not align with Part B"));
    }
    if a.is_empty() {
        return Err(bad("empty Part A"));
    }
    for (i, &t) in a.iter().enumerate() {
        if example.pos_1[i] != i || example.pos_2[i] != 0 {
            return Err(bad("Part A positions are not (i, 0)"));
        }
        if t == sentinels.start || t == sentinels.end {
            return Err(bad("START/END sentinel inside Part A"));
        }
    }
    let mask_positions: Vec<usize> = a
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == sentinels.mask)
        .map(|(i, _)| i)
        .collect();

    // Split Part B into START-led blocks.
    let mut fills: Vec<Option<Vec<TokenId>>> = vec![None; mask_positions.len()];
    let mut j = 0usize;
    while j < b.len() {
        if b[j] != sentinels.start {
            return Err(bad("Part B block does not begin with START"));
        }
        let mut k = j + 1;
        while k < b.len() && b[k] != sentinels.start {
            k += 1;
        }
        let body = &b[j + 1..k];
        if body.is_empty() {
            return Err(bad("empty span block"));
        }
        if body.iter().any(|&t| sentinels.is_sentinel(t)) {
            return Err(bad("sentinel inside a span block"));
        }
        let anchor = example.pos_1[a.len() + j];
        for (off, idx) in (a.len() + j..a.len() + k).enumerate() {
            if example.pos_1[idx] != anchor || example.pos_2[idx] != off + 1 {
                return Err(bad("Part B positions are inconsistent"));
            }
        }
        let expected_targets: Vec<TokenId> = body
            .iter()
            .copied()
            .chain(std::iter::once(sentinels.end))
            .collect();
        if example.targets[j..k] != expected_targets[..] {
            return Err(bad("targets do not shift the span block"));
        }
        let slot = mask_positions
            .iter()
            .position(|&p| p == anchor)
            .ok_or_else(|| bad("span block anchored to a non-MASK position"))?;
        if fills[slot].replace(body.to_vec()).is_some() {
            return Err(bad("two span blocks fill the same MASK"));
        }
        j = k;
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let mut next = 0usize;
    for &t in a {
        if t == sentinels.mask {
            let fill = fills[next]
                .as_ref()
                .ok_or_else(|| bad("MASK without a span block"))?;
            out.extend_from_slice(fill);
            next += 1;
        } else {
            out.push(t);
        }
    }
    Ok(out)
}

/// Part A attends to all of Part A; a Part-B token attends to Part A and to
/// Part-B tokens at or before itself.
pub fn attention_allowed(
    example: &CorruptedExample,
    query: usize,
    key: usize,
) -> Result<bool, GlmError> {
    let len = example.total_len();
    for index in [query, key] {
        if index >= len {
            return Err(GlmError::IndexOutOfRange { index, len });
        }
    }
    let a = example.part_a.len();
    Ok(if query < a { key < a } else { key < a || key <= query })
}

/// Row-major `[query][key]` visibility matrix over Part A + Part B.
pub fn attention_mask(example: &CorruptedExample) -> Vec<Vec<bool>> {
    let len = example.total_len();
    let a = example.part_a.len();
    (0..len)
        .map(|q| {
            (0..len)
                .map(|k| if q < a { k < a } else { k < a || k <= q })
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(flatten)]
    sentinels: Sentinels,
}

const FORMAT_TAG: &str = "glm-blank-filling/v1";

/// Header line declaring vocabulary and sentinels, then one example per line.
pub fn to_jsonl(sentinels: &Sentinels, examples: &[CorruptedExample]) -> Result<String, serde_json::Error> {
    let mut out = serde_json::to_string(&Header {
        format: FORMAT_TAG.into(),
        sentinels: *sentinels,
    })?;
    out.push('\n');
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<(Sentinels, Vec<CorruptedExample>), serde_json::Error> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Header = serde_json::from_str(lines.next().unwrap_or(""))?;
    let examples = lines.map(serde_json::from_str).collect::<Result<_, _>>()?;
    Ok((header.sentinels, examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u32 = 10;
    const B: u32 = 11;
    const C: u32 = 12;
    const D: u32 = 13;
    const E: u32 = 14;

    fn sent() -> Sentinels {
        Sentinels::after(100)
    }

    #[test]
    fn single_span_layout() {
        let s = sent();
        let spans = SpanSet::new(vec![Span { start: 1, len: 2 }]);
        let ex = corrupt(&[A, B, C, D, E], &spans, &s).unwrap();
        assert_eq!(ex.part_a, vec![A, s.mask, D, E]);
        assert_eq!(ex.part_b, vec![s.start, B, C]);
        assert_eq!(ex.targets, vec![B, C, s.end]);
        assert_eq!(ex.pos_1, vec![0, 1, 2, 3, 1, 1, 1]);
        assert_eq!(ex.pos_2, vec![0, 0, 0, 0, 1, 2, 3]);
        assert_eq!(reconstruct(&ex, &s).unwrap(), vec![A, B, C, D, E]);
    }

    #[test]
    fn swapped_permutation_emits_second_span_first() {
        let s = sent();
        let spans = SpanSet::new(vec![Span { start: 0, len: 1 }, Span { start: 3, len: 2 }])
            .with_permutation(vec![1, 0]);
        let ex = corrupt(&[A, B, C, D, E], &spans, &s).unwrap();
        assert_eq!(ex.part_a, vec![s.mask, B, C, s.mask]);
        assert_eq!(ex.part_b, vec![s.start, D, E, s.start, A]);
        assert_eq!(ex.targets, vec![D, E, s.end, A, s.end]);
        assert_eq!(&ex.pos_1[4..], &[3, 3, 3, 0, 0]);
        assert_eq!(reconstruct(&ex, &s).unwrap(), vec![A, B, C, D, E]);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(
            corrupt(&[], &SpanSet::new(vec![]), &sent()),
            Err(GlmError::InvalidTokens(_))
        ));
    }

    #[test]
    fn out_of_bounds_span_is_rejected() {
        let spans = SpanSet::new(vec![Span { start: 4, len: 2 }]);
        assert!(matches!(
            corrupt(&[A, B, C, D, E], &spans, &sent()),
            Err(GlmError::InvalidSpans(_))
        ));
    }

    #[test]
    fn corrupted_sentinel_layout_fails_to_reconstruct() {
        let s = sent();
        let spans = SpanSet::new(vec![Span { start: 1, len: 2 }]);
        let mut ex = corrupt(&[A, B, C, D, E], &spans, &s).unwrap();
        ex.part_b[0] = A;
        assert!(reconstruct(&ex, &s).is_err());
        let mut ex2 = corrupt(&[A, B, C, D, E], &spans, &s).unwrap();
        ex2.part_a[1] = A;
        assert!(reconstruct(&ex2, &s).is_err());
    }

    #[test]
    fn forced_single_span() {
        let set = sample_spans(10, 0.2, 50.0, 7).unwrap();
        assert_eq!(set.spans.len(), 1);
        assert_eq!(set.masked_tokens(), 2);
    }

    #[test]
    fn span_sampling_is_seeded() {
        assert_eq!(
            sample_spans(64, 0.15, 3.0, 99).unwrap(),
            sample_spans(64, 0.15, 3.0, 99).unwrap()
        );
    }

    #[test]
    fn bad_sampling_parameters() {
        assert!(sample_spans(1, 0.5, 1.0, 0).is_err());
        assert!(sample_spans(10, 0.0, 1.0, 0).is_err());
        assert!(sample_spans(10, 1.0, 1.0, 0).is_err());
        assert!(sample_spans(10, 0.2, 0.5, 0).is_err());
        assert!(matches!(
            sample_spans(2, 0.9, 1.0, 0),
            Err(GlmError::Infeasible(_))
        ));
    }

    #[test]
    fn attention_contract_edges() {
        let s = sent();
        let spans = SpanSet::new(vec![Span { start: 1, len: 2 }]);
        let ex = corrupt(&[A, B, C, D, E], &spans, &s).unwrap();
        assert!(attention_allowed(&ex, 0, 3).unwrap());
        assert!(!attention_allowed(&ex, 0, 4).unwrap());
        assert!(attention_allowed(&ex, 5, 4).unwrap());
        assert!(!attention_allowed(&ex, 5, 6).unwrap());
        assert!(attention_allowed(&ex, 6, 0).unwrap());
        assert_eq!(
            attention_allowed(&ex, 7, 0),
            Err(GlmError::IndexOutOfRange { index: 7, len: 7 })
        );
    }

    #[test]
    fn serialization_round_trip() {
        let s = sent();
        let spans = SpanSet::new(vec![Span { start: 1, len: 2 }]);
        let ex = corrupt(&[A, B, C, D, E], &spans, &s).unwrap();
        let text = to_jsonl(&s, std::slice::from_ref(&ex)).unwrap();
        assert!(text.lines().next().unwrap().contains("\"mask\":100"));
        let (s2, exs) = from_jsonl(&text).unwrap();
        assert_eq!(s2, s);
        assert_eq!(exs, vec![ex]);
    }
}
