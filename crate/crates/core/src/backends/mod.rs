//! Text-generation, label-confidence and embedding providers.
//!
//! Three families of providers implement the same traits:
//!
//! * [`openai`]: an HTTP client for OpenAI-compatible completion, chat and
//!   embedding endpoints.
//! * [`cassette`]: record/replay of completions keyed by a request hash, for
//!   offline tests against captured responses.
//! * [`synthetic`]: a seeded simulated model that answers prompts from the
//!   ground truth of a registered dataset, plus a hash-based embedder. Its
//!   label confidences are Dirichlet draws, which makes calibration scores
//!   exchangeable and lets coverage be checked by Monte Carlo.
//!
//! [`scripted`] holds a rule-based stub used by fixtures and tests.

pub mod cassette;
pub mod openai;
pub mod scripted;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::OptionLabel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("no API credential configured (set {0})")]
    MissingCredential(String),

    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },

    #[error("provider returned HTTP {code}: {body}")]
    Status { code: u16, body: String, retryable: bool },

    #[error("malformed provider response: {0}")]
    MalformedBody(String),

    #[error("none of the labels {labels} appear among the returned log-probabilities")]
    DegenerateDistribution { labels: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("synthetic model has no scenario for task {0:?}")]
    UnknownScenario(String),

    #[error("cassette has no recording for request {0}")]
    CassetteMiss(String),

    #[error("no scripted response matches the prompt ending {0:?}")]
    Unscripted(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { retryable, .. } | BackendError::Status { retryable, .. } => *retryable,
            _ => false,
        }
    }

    /// Maps an HTTP status to an error, marking rate limits, timeouts and
    /// server errors as retryable.
    pub fn from_status(code: u16, body: impl Into<String>) -> Self {
        let retryable = code == 408 || code == 429 || (500..600).contains(&code);
        BackendError::Status {
            code,
            body: body.into(),
            retryable,
        }
    }
}

/// Parameters of one completion call. Temperature defaults to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub logprob_top_k: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: max_tokens.max(1),
            temperature: 0.0,
            logprob_top_k: 0,
        }
    }

    pub fn with_logprobs(mut self, top_k: u32) -> Self {
        self.logprob_top_k = top_k;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TopLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

/// Generated text plus, per generated position, the top-k alternatives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub logprobs: Vec<Vec<TopLogprob>>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            logprobs: Vec::new(),
        }
    }
}

pub trait TextGenerator: Send + Sync {
    /// Stable identifier recorded in artifacts (provider + model).
    fn id(&self) -> String;

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::MalformedBody("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::MalformedBody("embedding contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;

    /// Declared output dimension.
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
}

/// Normalized confidence over the candidate labels of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelConfidences {
    entries: BTreeMap<OptionLabel, f64>,
}

impl LabelConfidences {
    /// Normalizes non-negative weights to sum to one.
    pub fn from_weights(weights: BTreeMap<OptionLabel, f64>) -> Result<Self, BackendError> {
        if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(BackendError::Precondition("confidence weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.values().sum();
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(total > 0.0) {
            return Err(BackendError::DegenerateDistribution {
                labels: label_list(weights.keys()),
            });
        }
        let entries = weights.into_iter().map(|(l, w)| (l, w / total)).collect();
        Ok(Self { entries })
    }

    pub fn get(&self, label: OptionLabel) -> Option<f64> {
        self.entries.get(&label).copied()
    }

    pub fn labels(&self) -> impl Iterator<Item = OptionLabel> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OptionLabel, f64)> + '_ {
        self.entries.iter().map(|(l, p)| (*l, *p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Label with the highest confidence; ties go to the earlier letter.
    pub fn argmax(&self) -> Option<OptionLabel> {
        let mut best: Option<(OptionLabel, f64)> = None;
        for (l, p) in self.iter() {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((l, p));
            }
        }
        best.map(|(l, _)| l)
    }
}

fn label_list<'a>(labels: impl Iterator<Item = &'a OptionLabel>) -> String {
    let v: Vec<String> = labels.map(|l| l.to_string()).collect();
    format!("{{{}}}", v.join(", "))
}

/// Converts next-token log-probabilities into confidences over `labels`.
///
/// A top-k token counts for a label when its trimmed text equals the label
/// letter (so `" A"` and `"A"` both match); if several tokens match, the
/// largest log-probability wins. Labels with no matching token get zero mass
/// and the remainder is renormalized.
pub fn confidences_from_logprobs(
    top: &[TopLogprob],
    labels: &[OptionLabel],
) -> Result<LabelConfidences, BackendError> {
    check_labels(labels)?;
    let mut best: BTreeMap<OptionLabel, f64> = BTreeMap::new();
    for cand in top {
        if !cand.logprob.is_finite() {
            continue;
        }
        let Ok(label) = cand.token.trim().parse::<OptionLabel>() else {
            continue;
        };
        if !labels.contains(&label) {
            continue;
        }
        let slot = best.entry(label).or_insert(f64::NEG_INFINITY);
        if cand.logprob > *slot {
            *slot = cand.logprob;
        }
    }
    if best.is_empty() {
        return Err(BackendError::DegenerateDistribution {
            labels: label_list(labels.iter()),
        });
    }
    // shift by the max before exponentiating
    let max = best.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = labels
        .iter()
        .map(|l| (*l, best.get(l).map_or(0.0, |lp| (lp - max).exp())))
        .collect();
    LabelConfidences::from_weights(weights)
}

fn check_labels(labels: &[OptionLabel]) -> Result<(), BackendError> {
    if labels.is_empty() {
        return Err(BackendError::Precondition("at least one label is required".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    if !labels.iter().all(|l| seen.insert(*l)) {
        return Err(BackendError::Precondition("labels must be unique".into()));
    }
    Ok(())
}

/// Minimum number of alternatives requested when scoring labels.
pub const MIN_TOP_LOGPROBS: u32 = 5;

/// Queries one next token and reads the label distribution from its logprobs.
pub fn score_labels(
    generator: &dyn TextGenerator,
    prompt: &str,
    labels: &[OptionLabel],
) -> Result<LabelConfidences, BackendError> {
    check_labels(labels)?;
    let top_k = (labels.len() as u32).max(MIN_TOP_LOGPROBS);
    let req = CompletionRequest::new(prompt, 1).with_logprobs(top_k);
    let completion = generator.complete(&req)?;
    let first = completion.logprobs.first().map(Vec::as_slice).unwrap_or(&[]);
    confidences_from_logprobs(first, labels)
}
