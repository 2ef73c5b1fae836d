//! Tokenization, inverted index, BM25 ranking, corpus language model and
//! linear run fusion.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus_io::{Passage, Query, RankedEntry, RankedList};
use crate::error::{Error, Result};

const INDEX_MAGIC: &str = "AUGRANK-INDEX";
const INDEX_VERSION: u32 = 1;

/// Splits on every non-alphanumeric character and lowercases.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Position of the passage in the index's document table.
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    /// Postings sorted by `doc`.
    postings: BTreeMap<String, Vec<Posting>>,
    collection_frequency: BTreeMap<String, u64>,
    total_tokens: u64,
    avg_doc_length: f64,
    params: Bm25Params,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl InvertedIndex {
    pub fn build(passages: &[Passage]) -> Result<Self> {
        Self::build_with(passages, Bm25Params::default())
    }

    pub fn build_with(passages: &[Passage], params: Bm25Params) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(passages.len());
        let mut doc_ids = Vec::with_capacity(passages.len());
        let mut doc_lengths = Vec::with_capacity(passages.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut collection_frequency: BTreeMap<String, u64> = BTreeMap::new();
        let mut total_tokens = 0u64;

        for passage in passages {
            let doc = u32::try_from(doc_ids.len())
                .map_err(|_| Error::Invalid("too many passages for one index".into()))?;
            if lookup.insert(passage.id.clone(), doc).is_some() {
                return Err(Error::Conflict(format!("duplicate passage id {}", passage.id)));
            }
            let tokens = tokenize(&passage.text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for token in &tokens {
                *tf.entry(token.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                *collection_frequency.entry(term.clone()).or_default() += u64::from(count);
                postings.entry(term).or_default().push(Posting { doc, tf: count });
            }
            total_tokens += tokens.len() as u64;
            doc_ids.push(passage.id.clone());
            doc_lengths.push(tokens.len() as u32);
        }

        let avg_doc_length = if doc_ids.is_empty() {
            0.0
        } else {
            total_tokens as f64 / doc_ids.len() as f64
        };
        Ok(InvertedIndex {
            doc_ids,
            doc_lengths,
            postings,
            collection_frequency,
            total_tokens,
            avg_doc_length,
            params,
            lookup,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.postings.len()
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.lookup.contains_key(passage_id)
    }

    pub fn doc_length(&self, passage_id: &str) -> Option<u32> {
        self.lookup.get(passage_id).map(|&d| self.doc_lengths[d as usize])
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn collection_frequency(&self, term: &str) -> u64 {
        self.collection_frequency.get(term).copied().unwrap_or(0)
    }

    pub fn term_frequency(&self, term: &str, passage_id: &str) -> u32 {
        match self.lookup.get(passage_id) {
            Some(&doc) => self.tf_at(term, doc),
            None => 0,
        }
    }

    /// Terms and their collection frequencies in lexicographic order.
    pub fn vocabulary(&self) -> impl Iterator<Item = (&str, u64)> {
        self.collection_frequency.iter().map(|(t, &c)| (t.as_str(), c))
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn passage_id(&self, doc: u32) -> &str {
        &self.doc_ids[doc as usize]
    }

    fn tf_at(&self, term: &str, doc: u32) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc)
            .map(|i| list[i].tf)
            .unwrap_or(0)
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = 1.0 - b + b * f64::from(doc_len) / self.avg_doc_length;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 of one passage. Repeated query terms contribute once per occurrence.
    pub fn bm25_score<S: AsRef<str>>(&self, query_terms: &[S], passage_id: &str) -> Result<f64> {
        let doc = *self
            .lookup
            .get(passage_id)
            .ok_or_else(|| Error::Lookup(format!("passage {passage_id} is not indexed")))?;
        let doc_len = self.doc_lengths[doc as usize];
        let mut score = 0.0;
        for term in query_terms {
            let term = term.as_ref();
            let tf = self.tf_at(term, doc);
            if tf > 0 {
                score += self.term_weight(self.idf(self.document_frequency(term)), tf, doc_len);
            }
        }
        Ok(score)
    }

    /// Scores every passage sharing a term with `query_terms`.
    pub fn score_all<S: AsRef<str>>(&self, query_terms: &[S]) -> Vec<(u32, f64)> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in query_terms {
            let list = self.postings(term.as_ref());
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(list.len());
            for p in list {
                *acc.entry(p.doc).or_default() +=
                    self.term_weight(idf, p.tf, self.doc_lengths[p.doc as usize]);
            }
        }
        acc.into_iter().collect()
    }

    /// Top-`k` passages for `query`; ties go to the smaller passage id.
    pub fn bm25_search(&self, query: &Query, k: usize) -> RankedList {
        let terms = tokenize(&query.text);
        let mut hits = self.score_all(&terms);
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.passage_id(a.0).cmp(self.passage_id(b.0)))
        });
        hits.truncate(k);
        let entries = hits
            .into_iter()
            .map(|(doc, score)| RankedEntry::new(self.passage_id(doc), score))
            .collect();
        RankedList::new(query.id.clone(), "bm25", entries).expect("scores are finite and ids unique")
    }

    /// Writes the index behind a versioned magic header.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{INDEX_MAGIC} {INDEX_VERSION}")?;
        serde_json::to_writer(&mut out, self).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(INDEX_MAGIC) {
            return Err(Error::parse(1, "not an index file (bad magic header)"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(1, "missing index version"))?;
        if version != INDEX_VERSION {
            return Err(Error::parse(1, format!("unsupported index version {version}")));
        }
        let mut index: InvertedIndex =
            serde_json::from_reader(reader).map_err(|e| Error::parse(2, e.to_string()))?;
        if index.doc_ids.len() != index.doc_lengths.len() {
            return Err(Error::parse(2, "document table is inconsistent"));
        }
        index.lookup = index
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        if index.lookup.len() != index.doc_ids.len() {
            return Err(Error::parse(2, "duplicate passage id in index"));
        }
        Ok(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothing {
    /// (cf + 1) / (total_tokens + vocab_size)
    AddOne,
}

/// Smoothed unigram model of the target corpus.
#[derive(Debug, Clone)]
pub struct CorpusLanguageModel {
    counts: HashMap<String, u64>,
    total_tokens: u64,
    vocab_size: usize,
    smoothing: Smoothing,
}

impl CorpusLanguageModel {
    pub fn estimate(index: &InvertedIndex) -> Result<Self> {
        if index.total_tokens() == 0 {
            return Err(Error::Invalid(
                "cannot estimate a language model from an empty index".into(),
            ));
        }
        Ok(CorpusLanguageModel {
            counts: index.vocabulary().map(|(t, c)| (t.to_string(), c)).collect(),
            total_tokens: index.total_tokens(),
            vocab_size: index.vocab_size(),
            smoothing: Smoothing::AddOne,
        })
    }

    /// Always strictly positive, also for terms the corpus never saw.
    pub fn probability(&self, term: &str) -> f64 {
        match self.smoothing {
            Smoothing::AddOne => {
                let cf = self.counts.get(term).copied().unwrap_or(0);
                (cf + 1) as f64 / (self.total_tokens + self.vocab_size as u64) as f64
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }
}

pub fn estimate_corpus_lm(index: &InvertedIndex) -> Result<CorpusLanguageModel> {
    CorpusLanguageModel::estimate(index)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    alpha: f64,
}

impl FusionConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Invalid(format!("fusion weight must be finite and >= 0, got {alpha}")));
        }
        Ok(FusionConfig { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { alpha: 1.3 }
    }
}

/// `dense + alpha * sparse` over the union of both lists. A passage missing
/// from one list takes that list's minimum score.
pub fn fuse_runs(dense: &RankedList, sparse: &RankedList, cfg: FusionConfig) -> Result<RankedList> {
    if dense.query_id != sparse.query_id {
        return Err(Error::Invalid(format!(
            "cannot fuse lists of different queries ({} vs {})",
            dense.query_id, sparse.query_id
        )));
    }
    let min_score = |list: &RankedList| list.entries().last().map_or(0.0, |e| e.score);
    let dense_fill = min_score(dense);
    let sparse_fill = min_score(sparse);
    let dense_scores: HashMap<&str, f64> =
        dense.entries().iter().map(|e| (e.passage_id.as_str(), e.score)).collect();
    let sparse_scores: HashMap<&str, f64> =
        sparse.entries().iter().map(|e| (e.passage_id.as_str(), e.score)).collect();

    let mut union: Vec<&str> = dense.passage_ids().collect();
    union.extend(sparse.passage_ids().filter(|id| !dense_scores.contains_key(id)));

    let entries = union
        .into_iter()
        .map(|id| {
            let d = dense_scores.get(id).copied().unwrap_or(dense_fill);
            let s = sparse_scores.get(id).copied().unwrap_or(sparse_fill);
            RankedEntry::new(id, d + cfg.alpha * s)
        })
        .collect();
    RankedList::sorted(dense.query_id.clone(), "hybrid", entries)
}
