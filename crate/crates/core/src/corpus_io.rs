//! Experiment artifacts and their on-disk formats.
//!
//! * qrels: `qid 0 docid grade`
//! * runs: `qid Q0 docid rank score tag`, scores written with four decimals
//! * corpus: one JSON object per line, `{"id", "title"?, "text"}`
//! * snippet cache: one JSON object per line, `{"query_id", "rank", "kind", "text", "source"}`
//! * queries: `qid<TAB>text`
//! * training triples: `qid<TAB>docid<TAB>label`

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Passage {
            id: id.into(),
            title: None,
            text: text.into(),
        }
    }
}

/// Passages addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::Conflict(format!("duplicate passage id {}", p.id)));
            }
        }
        Ok(Corpus { passages, by_id })
    }

    pub fn get(&self, passage_id: &str) -> Option<&Passage> {
        self.by_id.get(passage_id).map(|&i| &self.passages[i])
    }

    pub fn require(&self, passage_id: &str) -> Result<&Passage> {
        self.get(passage_id)
            .ok_or_else(|| Error::Lookup(format!("passage {passage_id} not in corpus")))
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnippetKind {
    Organic,
    /// Answer boxes and similar; they can leak the answer into the query.
    DirectAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnippetSource {
    WebSerp,
    Wiki,
}

impl FromStr for SnippetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "web_serp" | "serp" => Ok(SnippetSource::WebSerp),
            "wiki" => Ok(SnippetSource::Wiki),
            other => Err(Error::Invalid(format!("unknown snippet source `{other}`"))),
        }
    }
}

impl fmt::Display for SnippetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SnippetSource::WebSerp => "web_serp",
            SnippetSource::Wiki => "wiki",
        })
    }
}

/// One externally retrieved text for a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub query_id: String,
    /// 1-based position in the external result list.
    pub rank: u32,
    pub kind: SnippetKind,
    pub text: String,
    pub source: SnippetSource,
}

/// Snippets grouped per query, each group sorted by rank.
pub type SnippetCache = BTreeMap<String, Vec<Snippet>>;

/// Graded relevance judgments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a judgment, rejecting a second grade for the same pair.
    pub fn insert(&mut self, query_id: &str, passage_id: &str, grade: u32) -> Result<()> {
        let docs = self.judgments.entry(query_id.to_string()).or_default();
        match docs.entry(passage_id.to_string()) {
            Entry::Occupied(_) => Err(Error::Conflict(format!(
                "duplicate judgment for ({query_id}, {passage_id})"
            ))),
            Entry::Vacant(slot) => {
                slot.insert(grade);
                Ok(())
            }
        }
    }

    pub fn grade(&self, query_id: &str, passage_id: &str) -> Option<u32> {
        self.judgments.get(query_id)?.get(passage_id).copied()
    }

    /// All judgments of one query, or `None` if the query is unjudged.
    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.judgments.contains_key(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_grade(&self) -> u32 {
        self.judgments
            .values()
            .flat_map(|docs| docs.values().copied())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
}

impl RankedEntry {
    pub fn new(passage_id: impl Into<String>, score: f64) -> Self {
        RankedEntry {
            passage_id: passage_id.into(),
            score,
        }
    }
}

/// Candidate ranking for one query: scores non-increasing, ids unique, no NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub tag: String,
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Wraps entries that are already in rank order.
    pub fn new(
        query_id: impl Into<String>,
        tag: impl Into<String>,
        entries: Vec<RankedEntry>,
    ) -> Result<Self> {
        let list = RankedList {
            query_id: query_id.into(),
            tag: tag.into(),
            entries,
        };
        list.validate()?;
        Ok(list)
    }

    /// Sorts by score descending, ties by ascending passage id.
    pub fn sorted(
        query_id: impl Into<String>,
        tag: impl Into<String>,
        mut entries: Vec<RankedEntry>,
    ) -> Result<Self> {
        if entries.iter().any(|e| e.score.is_nan()) {
            return Err(Error::Invalid("NaN score in ranked list".into()));
        }
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.passage_id.cmp(&b.passage_id))
        });
        Self::new(query_id, tag, entries)
    }

    pub fn empty(query_id: impl Into<String>, tag: impl Into<String>) -> Self {
        RankedList {
            query_id: query_id.into(),
            tag: tag.into(),
            entries: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if e.score.is_nan() {
                return Err(Error::Invalid(format!(
                    "NaN score for {} in query {}",
                    e.passage_id, self.query_id
                )));
            }
            if !seen.insert(e.passage_id.as_str()) {
                return Err(Error::Conflict(format!(
                    "passage {} appears twice for query {}",
                    e.passage_id, self.query_id
                )));
            }
            if i > 0 && self.entries[i - 1].score < e.score {
                return Err(Error::Invalid(format!(
                    "ranked list for query {} is not sorted by descending score",
                    self.query_id
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Relevant,
    NotRelevant,
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "true" | "relevant" | "pos" => Ok(Label::Relevant),
            "0" | "false" | "not_relevant" | "neg" => Ok(Label::NotRelevant),
            other => Err(Error::Invalid(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub query_id: String,
    pub passage_id: String,
    pub label: Label,
}

fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, line)| line.map(|l| (i + 1, l)).map_err(Error::from))
        .filter(|res| !matches!(res, Ok((_, l)) if l.trim().is_empty()))
}

/// Parses `qid 0 docid grade` lines.
pub fn parse_qrels<R: BufRead>(reader: R) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for item in content_lines(reader) {
        let (lineno, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("grade `{}` is not an integer", fields[3])))?;
        if grade < 0 {
            return Err(Error::parse(lineno, format!("negative grade {grade}")));
        }
        let grade = u32::try_from(grade)
            .map_err(|_| Error::parse(lineno, format!("grade {grade} out of range")))?;
        qrels.insert(fields[0], fields[2], grade)?;
    }
    Ok(qrels)
}

/// Parses a six-column TREC run. Lists come out in order of first appearance of
/// each query; entries are re-sorted by score with ties going to the smaller
/// given rank.
pub fn parse_run<R: BufRead>(reader: R) -> Result<Vec<RankedList>> {
    struct Row {
        passage_id: String,
        rank: u64,
        score: f64,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (String, Vec<Row>, HashSet<String>)> = HashMap::new();

    for item in content_lines(reader) {
        let (lineno, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                lineno,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let rank: u64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("rank `{}` is not an integer", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("score `{}` is not a number", fields[4])))?;
        if score.is_nan() {
            return Err(Error::parse(lineno, "score is NaN"));
        }
        let qid = fields[0];
        let (_, rows, seen) = groups.entry(qid.to_string()).or_insert_with(|| {
            order.push(qid.to_string());
            (fields[5].to_string(), Vec::new(), HashSet::new())
        });
        if !seen.insert(fields[2].to_string()) {
            return Err(Error::Conflict(format!(
                "passage {} listed twice for query {qid} (line {lineno})",
                fields[2]
            )));
        }
        rows.push(Row {
            passage_id: fields[2].to_string(),
            rank,
            score,
        });
    }

    order
        .into_iter()
        .map(|qid| {
            let (tag, mut rows, _) = groups.remove(&qid).expect("group recorded for every qid");
            rows.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.rank.cmp(&b.rank)));
            let entries = rows
                .into_iter()
                .map(|r| RankedEntry::new(r.passage_id, r.score))
                .collect();
            RankedList::new(qid, tag, entries)
        })
        .collect()
}

pub fn write_run<W: Write>(lists: &[RankedList], mut out: W) -> Result<()> {
    for list in lists {
        for (i, e) in list.entries().iter().enumerate() {
            writeln!(
                out,
                "{} Q0 {} {} {:.4} {}",
                list.query_id,
                e.passage_id,
                i + 1,
                e.score,
                list.tag
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn parse_json_line<T: for<'de> Deserialize<'de>>(lineno: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::parse(lineno, e.to_string()))
}

/// Loads a JSON-lines passage corpus, keeping file order.
pub fn load_corpus<R: BufRead>(reader: R) -> Result<Vec<Passage>> {
    let mut seen = HashSet::new();
    let mut passages = Vec::new();
    for item in content_lines(reader) {
        let (lineno, line) = item?;
        let passage: Passage = parse_json_line(lineno, &line)?;
        if passage.id.is_empty() {
            return Err(Error::parse(lineno, "empty passage id"));
        }
        if passage.text.trim().is_empty() {
            return Err(Error::parse(lineno, format!("passage {} has empty text", passage.id)));
        }
        if !seen.insert(passage.id.clone()) {
            return Err(Error::Conflict(format!(
                "duplicate passage id {} (line {lineno})",
                passage.id
            )));
        }
        passages.push(passage);
    }
    Ok(passages)
}

pub fn write_corpus<W: Write>(passages: &[Passage], mut out: W) -> Result<()> {
    for p in passages {
        serde_json::to_writer(&mut out, p).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a JSON-lines snippet cache grouped by query and sorted by rank.
pub fn load_snippet_cache<R: BufRead>(reader: R) -> Result<SnippetCache> {
    let mut cache = SnippetCache::new();
    let mut seen = HashSet::new();
    for item in content_lines(reader) {
        let (lineno, line) = item?;
        let snippet: Snippet = parse_json_line(lineno, &line)?;
        if snippet.rank == 0 {
            return Err(Error::parse(lineno, "snippet rank must be at least 1"));
        }
        if snippet.text.trim().is_empty() {
            return Err(Error::parse(lineno, "snippet text is empty"));
        }
        if !seen.insert((snippet.query_id.clone(), snippet.source, snippet.rank)) {
            return Err(Error::Conflict(format!(
                "duplicate snippet ({}, {}, rank {}) at line {lineno}",
                snippet.query_id, snippet.source, snippet.rank
            )));
        }
        cache.entry(snippet.query_id.clone()).or_default().push(snippet);
    }
    for group in cache.values_mut() {
        group.sort_by(|a, b| a.rank.cmp(&b.rank).then(a.source.cmp(&b.source)));
    }
    Ok(cache)
}

pub fn write_snippet_cache<W: Write>(cache: &SnippetCache, mut out: W) -> Result<()> {
    for snippet in cache.values().flatten() {
        serde_json::to_writer(&mut out, snippet).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads `qid<TAB>text` queries.
pub fn load_queries<R: BufRead>(reader: R) -> Result<Vec<Query>> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for item in content_lines(reader) {
        let (lineno, line) = item?;
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno, "expected `qid<TAB>text`"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::parse(lineno, "empty query id"));
        }
        if text.trim().is_empty() {
            return Err(Error::parse(lineno, format!("query {id} has empty text")));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::Conflict(format!("duplicate query id {id} (line {lineno})")));
        }
        queries.push(Query::new(id, text.trim()));
    }
    Ok(queries)
}

pub fn write_queries<W: Write>(queries: &[Query], mut out: W) -> Result<()> {
    for q in queries {
        writeln!(out, "{}\t{}", q.id, q.text)?;
    }
    out.flush()?;
    Ok(())
}

/// Loads `qid<TAB>docid<TAB>label` training triples. Labels accept
/// `1/0`, `true/false` and `relevant/not_relevant`.
pub fn load_triples<R: BufRead>(reader: R) -> Result<Vec<TrainingExample>> {
    let mut examples = Vec::new();
    for item in content_lines(reader) {
        let (lineno, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                lineno,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let label = fields[2]
            .parse()
            .map_err(|e: Error| Error::parse(lineno, e.to_string()))?;
        examples.push(TrainingExample {
            query_id: fields[0].to_string(),
            passage_id: fields[1].to_string(),
            label,
        });
    }
    Ok(examples)
}
