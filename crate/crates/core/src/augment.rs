//! Query augmentation from externally retrieved snippets.
//!
//! Two expansion strategies are supported. Natural-language expansion
//! concatenates the retrieved snippets and keeps the first `max_words`
//! whitespace words. Topical-term expansion scores each term `t` of the
//! retrieved text `A` by its contribution to the KL divergence between
//! `A` and the corpus model `C`,
//!
//! ```text
//! w(t, A) = P(t|A) * log2(P(t|A) / P(t|C))
//! ```
//!
//! and keeps the `max_terms` highest-weighted terms.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus_io::{Query, Snippet, SnippetCache, SnippetKind, SnippetSource};
use crate::error::{Error, Result};
use crate::index::{tokenize, CorpusLanguageModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrieverConfig {
    pub max_snippets: usize,
    pub source: SnippetSource,
    pub skip_direct_answers: bool,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            max_snippets: 5,
            source: SnippetSource::WebSerp,
            skip_direct_answers: true,
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_snippets == 0 {
            return Err(Error::Invalid("max_snippets must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    NaturalLanguage,
    TopicalTerms,
}

impl FromStr for ExpansionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nl" | "natural_language" => Ok(ExpansionMode::NaturalLanguage),
            "terms" | "topical_terms" => Ok(ExpansionMode::TopicalTerms),
            other => Err(Error::Invalid(format!("unknown expansion mode `{other}`"))),
        }
    }
}

impl fmt::Display for ExpansionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpansionMode::NaturalLanguage => "natural_language",
            ExpansionMode::TopicalTerms => "topical_terms",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionConfig {
    pub mode: ExpansionMode,
    pub max_words: usize,
    pub max_terms: usize,
    /// Terms never selected as topical terms. Empty by default.
    pub stopwords: HashSet<String>,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            mode: ExpansionMode::NaturalLanguage,
            max_words: 64,
            max_terms: 64,
            stopwords: HashSet::new(),
        }
    }
}

impl ExpansionConfig {
    pub fn new(mode: ExpansionMode) -> Self {
        ExpansionConfig {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_words == 0 || self.max_terms == 0 {
            return Err(Error::Invalid("max_words and max_terms must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermWeight {
    pub term: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetRef {
    pub source: SnippetSource,
    pub rank: u32,
}

/// The augmenting string for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub query_id: String,
    pub mode: ExpansionMode,
    pub text: String,
    pub provenance: Vec<SnippetRef>,
    /// Set when nothing was retrieved; re-ranker inputs then use the plain template.
    pub fallback: bool,
}

impl Expansion {
    pub fn empty(query_id: impl Into<String>, mode: ExpansionMode) -> Self {
        Expansion {
            query_id: query_id.into(),
            mode,
            text: String::new(),
            provenance: Vec::new(),
            fallback: true,
        }
    }

    fn from_snippets(query_id: &str, mode: ExpansionMode, text: String, snippets: &[Snippet]) -> Self {
        let fallback = text.is_empty();
        Expansion {
            query_id: query_id.to_string(),
            mode,
            text,
            provenance: snippets
                .iter()
                .map(|s| SnippetRef {
                    source: s.source,
                    rank: s.rank,
                })
                .collect(),
            fallback,
        }
    }
}

/// Drops direct answers when configured; keeps the order of the rest.
pub fn filter_snippets(snippets: &[Snippet], cfg: &RetrieverConfig) -> Vec<Snippet> {
    snippets
        .iter()
        .filter(|s| !(cfg.skip_direct_answers && s.kind == SnippetKind::DirectAnswer))
        .cloned()
        .collect()
}

/// The retrieval service backed by a snippet cache. Uncached queries yield
/// nothing.
pub fn retrieve(query: &Query, cache: &SnippetCache, cfg: &RetrieverConfig) -> Vec<Snippet> {
    let Some(cached) = cache.get(&query.id) else {
        return Vec::new();
    };
    let mut from_source: Vec<Snippet> = cached
        .iter()
        .filter(|s| s.source == cfg.source)
        .cloned()
        .collect();
    from_source.sort_by_key(|s| s.rank);
    let mut kept = filter_snippets(&from_source, cfg);
    kept.truncate(cfg.max_snippets);
    kept
}

pub fn natural_language_expansion(
    query_id: &str,
    snippets: &[Snippet],
    cfg: &ExpansionConfig,
) -> Expansion {
    let text = snippets
        .iter()
        .flat_map(|s| s.text.split_whitespace())
        .take(cfg.max_words)
        .collect::<Vec<_>>()
        .join(" ");
    Expansion::from_snippets(query_id, ExpansionMode::NaturalLanguage, text, snippets)
}

/// KL contribution of every distinct term in the snippets, highest first,
/// ties by term. Negative weights are kept.
pub fn topical_term_weights(snippets: &[Snippet], lm: &CorpusLanguageModel) -> Result<Vec<TermWeight>> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    for snippet in snippets {
        for token in tokenize(&snippet.text) {
            *counts.entry(token).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("retrieved text contains no terms".into()));
    }
    let total = total as f64;
    let mut weights: Vec<TermWeight> = counts
        .into_iter()
        .map(|(term, count)| {
            let p_a = count as f64 / total;
            let weight = p_a * (p_a / lm.probability(&term)).log2();
            TermWeight { term, weight }
        })
        .collect();
    weights.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.term.cmp(&b.term)));
    Ok(weights)
}

pub fn topical_term_expansion(
    query_id: &str,
    snippets: &[Snippet],
    lm: &CorpusLanguageModel,
    cfg: &ExpansionConfig,
) -> Result<Expansion> {
    let text = topical_term_weights(snippets, lm)?
        .into_iter()
        .filter(|w| !cfg.stopwords.contains(&w.term))
        .take(cfg.max_terms)
        .map(|w| w.term)
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Expansion::from_snippets(query_id, ExpansionMode::TopicalTerms, text, snippets))
}

/// Retrieves snippets for `query` and builds the configured expansion.
pub fn augment_query(
    query: &Query,
    cache: &SnippetCache,
    retriever: &RetrieverConfig,
    expansion: &ExpansionConfig,
    lm: &CorpusLanguageModel,
) -> Result<Expansion> {
    let snippets = retrieve(query, cache, retriever);
    if snippets.is_empty() {
        return Ok(Expansion::empty(query.id.clone(), expansion.mode));
    }
    match expansion.mode {
        ExpansionMode::NaturalLanguage => Ok(natural_language_expansion(&query.id, &snippets, expansion)),
        ExpansionMode::TopicalTerms => topical_term_expansion(&query.id, &snippets, lm, expansion),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ExpansionRecord {
    query_id: String,
    mode: ExpansionMode,
    text: String,
}

/// Writes `{query_id, mode, text}` JSON lines.
pub fn write_expansions<W: Write>(expansions: &[Expansion], mut out: W) -> Result<()> {
    for e in expansions {
        let record = ExpansionRecord {
            query_id: e.query_id.clone(),
            mode: e.mode,
            text: e.text.clone(),
        };
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an expansion file keyed by query id. Records with empty text are
/// marked as fallbacks.
pub fn load_expansions<R: BufRead>(reader: R) -> Result<BTreeMap<String, Expansion>> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExpansionRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let fallback = record.text.is_empty();
        let expansion = Expansion {
            query_id: record.query_id.clone(),
            mode: record.mode,
            text: record.text,
            provenance: Vec::new(),
            fallback,
        };
        if out.insert(record.query_id.clone(), expansion).is_some() {
            return Err(Error::Conflict(format!(
                "duplicate expansion for query {} (line {})",
                record.query_id,
                i + 1
            )));
        }
    }
    Ok(out)
}
