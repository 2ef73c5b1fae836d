//! Re-ranker input sequences and scoring backends.
//!
//! Inputs follow the two templates
//!
//! ```text
//! Query: {q} Document: {d} Relevant:
//! Query: {q} Description: {expansion} Document: {d} Relevant:
//! ```
//!
//! Training sequences append ` true` or ` false` after `Relevant:`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::augment::Expansion;
use crate::corpus_io::{Corpus, Passage, Query, RankedEntry, RankedList};
use crate::error::{Error, Result};
use crate::index::{tokenize, InvertedIndex};

/// One scorer input. `sequence` is what a sequence model would see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RerankInput {
    pub sequence: String,
    pub query_id: String,
    pub passage_id: String,
    pub augmented: bool,
    query_text: String,
    description: Option<String>,
}

impl RerankInput {
    pub fn query_text(&self) -> &str {
        &self.query_text
    }

    pub fn description(&self) -> Option<&str> {
        self.description.as_deref()
    }

    /// Appends the target token for a training example.
    pub fn training_sequence(&self, label: RelevanceLabel) -> String {
        format!("{} {}", self.sequence, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelevanceLabel {
    True,
    False,
}

impl RelevanceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RelevanceLabel::True => "true",
            RelevanceLabel::False => "false",
        }
    }
}

impl fmt::Display for RelevanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn build_input(query: &Query, passage: &Passage) -> RerankInput {
    RerankInput {
        sequence: format!("Query: {} Document: {} Relevant:", query.text, passage.text),
        query_id: query.id.clone(),
        passage_id: passage.id.clone(),
        augmented: false,
        query_text: query.text.clone(),
        description: None,
    }
}

/// Adds a `Description:` segment, or falls back to the plain template when
/// the expansion is an empty fallback.
pub fn build_augmented_input(query: &Query, expansion: &Expansion, passage: &Passage) -> RerankInput {
    if expansion.fallback && expansion.text.is_empty() {
        return build_input(query, passage);
    }
    RerankInput {
        sequence: format!(
            "Query: {} Description: {} Document: {} Relevant:",
            query.text, expansion.text, passage.text
        ),
        query_id: query.id.clone(),
        passage_id: passage.id.clone(),
        augmented: true,
        query_text: query.text.clone(),
        description: Some(expansion.text.clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[serde(alias = "baseline")]
    LexicalBaseline,
    Remote,
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "lexical_baseline" => Ok(ScorerKind::LexicalBaseline),
            "remote" => Ok(ScorerKind::Remote),
            other => Err(Error::Invalid(format!("unknown scorer kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScorerEndpoint {
    pub kind: ScorerKind,
    pub address: Option<String>,
    pub batch_size: usize,
    pub timeout: Duration,
    /// Upper bound on concurrent batch requests to a remote scorer.
    pub max_in_flight: usize,
}

impl Default for ScorerEndpoint {
    fn default() -> Self {
        ScorerEndpoint {
            kind: ScorerKind::LexicalBaseline,
            address: None,
            batch_size: 32,
            timeout: Duration::from_secs(30),
            max_in_flight: 4,
        }
    }
}

impl ScorerEndpoint {
    pub fn remote(address: impl Into<String>) -> Self {
        ScorerEndpoint {
            kind: ScorerKind::Remote,
            address: Some(address.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_in_flight == 0 {
            return Err(Error::Invalid("batch_size and max_in_flight must be at least 1".into()));
        }
        if self.kind == ScorerKind::Remote && self.address.as_deref().is_none_or(str::is_empty) {
            return Err(Error::Invalid("remote scorer needs an address".into()));
        }
        Ok(())
    }
}

/// Relevance scorer. Higher is more relevant; scores lie in `[0, 1]` and are
/// returned in input order.
pub trait Scorer: Sync {
    fn score_batch(&self, inputs: &[RerankInput]) -> Result<Vec<f64>>;
}

/// BM25 of the passage against the query plus description terms, squashed
/// through `s / (s + 1)`.
pub struct LexicalScorer<'a> {
    index: &'a InvertedIndex,
}

impl<'a> LexicalScorer<'a> {
    pub fn new(index: &'a InvertedIndex) -> Self {
        LexicalScorer { index }
    }
}

impl Scorer for LexicalScorer<'_> {
    fn score_batch(&self, inputs: &[RerankInput]) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Err(Error::Invalid("score_batch needs at least one input".into()));
        }
        inputs
            .iter()
            .map(|input| {
                let mut terms = tokenize(input.query_text());
                if let Some(description) = input.description() {
                    terms.extend(tokenize(description));
                }
                let s = self.index.bm25_score(&terms, &input.passage_id)?;
                Ok(s / (s + 1.0))
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    inputs: Vec<&'a str>,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Client for `POST <address>/score` with body `{"inputs": [...]}` answered
/// by `{"scores": [...]}`.
pub struct RemoteScorer {
    url: String,
    batch_size: usize,
    max_in_flight: usize,
    client: reqwest::blocking::Client,
}

impl RemoteScorer {
    pub fn new(endpoint: &ScorerEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let address = endpoint.address.as_deref().unwrap_or_default();
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| Error::Transport {
                indices: Vec::new(),
                message: e.to_string(),
            })?;
        Ok(RemoteScorer {
            url: format!("{}/score", address.trim_end_matches('/')),
            batch_size: endpoint.batch_size,
            max_in_flight: endpoint.max_in_flight,
            client,
        })
    }

    fn post(&self, batch: &[RerankInput], offset: usize) -> Result<Vec<f64>> {
        let indices = || (offset..offset + batch.len()).collect::<Vec<_>>();
        let transport = |message: String| Error::Transport {
            indices: indices(),
            message,
        };
        let body = ScoreRequest {
            inputs: batch.iter().map(|i| i.sequence.as_str()).collect(),
        };
        let response = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(transport(format!("scorer answered HTTP {status}")));
        }
        let parsed: ScoreResponse = response
            .json()
            .map_err(|e| Error::Protocol(format!("unreadable scorer response: {e}")))?;
        if parsed.scores.len() != batch.len() {
            return Err(Error::Protocol(format!(
                "sent {} inputs but received {} scores",
                batch.len(),
                parsed.scores.len()
            )));
        }
        if let Some((i, s)) = parsed
            .scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(0.0..=1.0).contains(*s))
        {
            return Err(Error::Protocol(format!(
                "score {s} for input {} is outside [0, 1]",
                offset + i
            )));
        }
        Ok(parsed.scores)
    }
}

impl Scorer for RemoteScorer {
    fn score_batch(&self, inputs: &[RerankInput]) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Err(Error::Invalid("score_batch needs at least one input".into()));
        }
        let batches: Vec<(usize, &[RerankInput])> = inputs
            .chunks(self.batch_size)
            .enumerate()
            .map(|(i, chunk)| (i * self.batch_size, chunk))
            .collect();
        let mut scores = Vec::with_capacity(inputs.len());
        for wave in batches.chunks(self.max_in_flight) {
            let results: Vec<Result<Vec<f64>>> = thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&(offset, batch)| scope.spawn(move || self.post(batch, offset)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scorer request thread panicked"))
                    .collect()
            });
            for result in results {
                scores.extend(result?);
            }
        }
        Ok(scores)
    }
}

/// Builds the scorer an endpoint describes. The baseline scores against `index`.
pub fn scorer_for<'a>(endpoint: &ScorerEndpoint, index: &'a InvertedIndex) -> Result<Box<dyn Scorer + 'a>> {
    endpoint.validate()?;
    Ok(match endpoint.kind {
        ScorerKind::LexicalBaseline => Box::new(LexicalScorer::new(index)),
        ScorerKind::Remote => Box::new(RemoteScorer::new(endpoint)?),
    })
}

/// Rescores the first `k` entries of `initial`.
///
/// The head is sorted by score with ties kept in initial order. Entries past
/// `k` follow in their initial order, with scores placed below the head so
/// the list stays score-sorted. `k` larger than the list is clamped.
pub fn rerank_topk(
    initial: &RankedList,
    corpus: &Corpus,
    query: &Query,
    expansion: Option<&Expansion>,
    scorer: &dyn Scorer,
    k: usize,
) -> Result<RankedList> {
    const TAG: &str = "rerank";
    let k = k.min(initial.len());
    if k == 0 {
        return RankedList::new(initial.query_id.clone(), TAG, initial.entries().to_vec());
    }
    let (head, tail) = initial.entries().split_at(k);
    let inputs = head
        .iter()
        .map(|e| {
            let passage = corpus.require(&e.passage_id)?;
            Ok(match expansion {
                Some(exp) => build_augmented_input(query, exp, passage),
                None => build_input(query, passage),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = scorer.score_batch(&inputs)?;
    if scores.len() != head.len() {
        return Err(Error::Protocol(format!(
            "scorer returned {} scores for {} inputs",
            scores.len(),
            head.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Protocol("scorer returned NaN".into()));
    }

    let mut order: Vec<usize> = (0..head.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut entries: Vec<RankedEntry> = order
        .into_iter()
        .map(|i| RankedEntry::new(head[i].passage_id.clone(), scores[i]))
        .collect();

    let floor = entries.last().map_or(0.0, |e| e.score).min(0.0);
    entries.extend(
        tail.iter()
            .enumerate()
            .map(|(i, e)| RankedEntry::new(e.passage_id.clone(), floor - (i + 1) as f64)),
    );
    RankedList::new(initial.query_id.clone(), TAG, entries)
}

/// Fixed scores keyed by passage id; used where a deterministic stand-in
/// scorer is needed.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    pub scores: HashMap<String, f64>,
    pub default: f64,
}

impl Scorer for TableScorer {
    fn score_batch(&self, inputs: &[RerankInput]) -> Result<Vec<f64>> {
        Ok(inputs
            .iter()
            .map(|i| self.scores.get(&i.passage_id).copied().unwrap_or(self.default))
            .collect())
    }
}
