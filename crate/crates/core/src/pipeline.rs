//! End-to-end experiment driver.
//!
//! Stages run in order and leave their artifacts in the output directory:
//! `initial.run`, `expansions.jsonl` (when expanding), `reranked.run`,
//! `report.tsv`, and with a configured baseline run `baseline_report.tsv`
//! and `comparison.tsv`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::augment::{augment_query, write_expansions, Expansion, ExpansionConfig, ExpansionMode, RetrieverConfig};
use crate::corpus_io::{
    load_corpus, load_queries, load_snippet_cache, parse_qrels, parse_run, write_run, Corpus, RankedList,
    SnippetSource,
};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, evaluate_run, write_comparison, write_report, Metric, MetricConfig, MetricReport, TTestResult};
use crate::index::{estimate_corpus_lm, InvertedIndex};
use crate::rerank::{rerank_topk, scorer_for, ScorerEndpoint, ScorerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum PipelineMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "nl", alias = "natural_language")]
    NaturalLanguage,
    #[serde(rename = "terms", alias = "topical_terms")]
    TopicalTerms,
}

impl PipelineMode {
    pub fn expansion_mode(self) -> Option<ExpansionMode> {
        match self {
            PipelineMode::None => None,
            PipelineMode::NaturalLanguage => Some(ExpansionMode::NaturalLanguage),
            PipelineMode::TopicalTerms => Some(ExpansionMode::TopicalTerms),
        }
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PipelineMode::None),
            other => other.parse::<ExpansionMode>().map(|m| match m {
                ExpansionMode::NaturalLanguage => PipelineMode::NaturalLanguage,
                ExpansionMode::TopicalTerms => PipelineMode::TopicalTerms,
            }),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSettings {
    pub max_snippets: usize,
    pub source: SnippetSource,
    pub skip_direct_answers: bool,
}

impl Default for RetrieverSettings {
    fn default() -> Self {
        let d = RetrieverConfig::default();
        RetrieverSettings {
            max_snippets: d.max_snippets,
            source: d.source,
            skip_direct_answers: d.skip_direct_answers,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSettings {
    pub mode: PipelineMode,
    pub max_words: usize,
    pub max_terms: usize,
    pub stopwords: Vec<String>,
}

impl Default for ExpansionSettings {
    fn default() -> Self {
        ExpansionSettings {
            mode: PipelineMode::None,
            max_words: 64,
            max_terms: 64,
            stopwords: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSettings {
    pub kind: ScorerKind,
    pub address: Option<String>,
    pub batch_size: usize,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for ScorerSettings {
    fn default() -> Self {
        let d = ScorerEndpoint::default();
        ScorerSettings {
            kind: d.kind,
            address: d.address,
            batch_size: d.batch_size,
            timeout_secs: d.timeout.as_secs(),
            max_in_flight: d.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub names: Vec<String>,
    pub binary_relevance_threshold: u32,
    pub map_relevance_threshold: Option<u32>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            names: MetricConfig::default().metrics().iter().map(Metric::to_string).collect(),
            binary_relevance_threshold: 1,
            map_relevance_threshold: None,
        }
    }
}

/// Experiment description, usually read from a TOML file. Relative paths
/// are resolved against the file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    /// Initial candidates; BM25 over the corpus when absent.
    #[serde(default)]
    pub initial_run: Option<PathBuf>,
    #[serde(default)]
    pub snippets: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Run file to test the re-ranked run against.
    #[serde(default)]
    pub baseline_run: Option<PathBuf>,
    /// Metrics compared against the baseline; all configured metrics when empty.
    #[serde(default)]
    pub compare_metrics: Vec<String>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub retriever: RetrieverSettings,
    #[serde(default)]
    pub expansion: ExpansionSettings,
    #[serde(default)]
    pub scorer: ScorerSettings,
    #[serde(default)]
    pub metrics: MetricSettings,
}

fn default_depth() -> usize {
    100
}

impl ExperimentConfig {
    /// A config with default settings for the given inputs.
    pub fn new(
        corpus: impl Into<PathBuf>,
        queries: impl Into<PathBuf>,
        qrels: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        ExperimentConfig {
            corpus: corpus.into(),
            queries: queries.into(),
            qrels: qrels.into(),
            initial_run: None,
            snippets: None,
            output_dir: output_dir.into(),
            baseline_run: None,
            compare_metrics: Vec::new(),
            depth: default_depth(),
            retriever: RetrieverSettings::default(),
            expansion: ExpansionSettings::default(),
            scorer: ScorerSettings::default(),
            metrics: MetricSettings::default(),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Invalid(format!("bad experiment config: {e}")))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.queries);
        fix(&mut self.qrels);
        fix(&mut self.output_dir);
        for p in [&mut self.initial_run, &mut self.snippets, &mut self.baseline_run]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn retriever_config(&self) -> RetrieverConfig {
        RetrieverConfig {
            max_snippets: self.retriever.max_snippets,
            source: self.retriever.source,
            skip_direct_answers: self.retriever.skip_direct_answers,
        }
    }

    pub fn expansion_config(&self) -> Option<ExpansionConfig> {
        self.expansion.mode.expansion_mode().map(|mode| ExpansionConfig {
            mode,
            max_words: self.expansion.max_words,
            max_terms: self.expansion.max_terms,
            stopwords: self.expansion.stopwords.iter().cloned().collect(),
        })
    }

    pub fn scorer_endpoint(&self) -> ScorerEndpoint {
        ScorerEndpoint {
            kind: self.scorer.kind,
            address: self.scorer.address.clone(),
            batch_size: self.scorer.batch_size,
            timeout: Duration::from_secs(self.scorer.timeout_secs),
            max_in_flight: self.scorer.max_in_flight,
        }
    }

    pub fn metric_config(&self) -> Result<MetricConfig> {
        let metrics = self
            .metrics
            .names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<Metric>>>()?;
        let mut cfg = MetricConfig::from_metrics(&metrics)?;
        cfg.binary_relevance_threshold = self.metrics.binary_relevance_threshold;
        cfg.map_relevance_threshold = self.metrics.map_relevance_threshold;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks settings and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Invalid("rerank depth must be at least 1".into()));
        }
        self.retriever_config().validate()?;
        if let Some(e) = self.expansion_config() {
            e.validate()?;
            if self.snippets.is_none() {
                return Err(Error::Invalid("expansion requires a snippet cache".into()));
            }
        }
        self.scorer_endpoint().validate()?;
        self.metric_config()?;
        let inputs = [Some(&self.corpus), Some(&self.queries), Some(&self.qrels)]
            .into_iter()
            .chain([self.initial_run.as_ref(), self.snippets.as_ref(), self.baseline_run.as_ref()])
            .flatten();
        for path in inputs {
            if !path.exists() {
                return Err(Error::Invalid(format!("input {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Index,
    InitialRanking,
    Expand,
    Rerank,
    Eval,
    Compare,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Index => "index",
            Stage::InitialRanking => "initial-ranking",
            Stage::Expand => "expand",
            Stage::Rerank => "rerank",
            Stage::Eval => "eval",
            Stage::Compare => "compare",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("pipeline stage `{stage}` failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub reranked_run: PathBuf,
    pub report_path: PathBuf,
    pub report: MetricReport,
    pub expansions_path: Option<PathBuf>,
    pub baseline_report: Option<MetricReport>,
    pub comparisons: Vec<(String, TTestResult)>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Invalid(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_run_file(path: &Path) -> Result<BTreeMap<String, RankedList>> {
    Ok(parse_run(open(path)?)?
        .into_iter()
        .map(|l| (l.query_id.clone(), l))
        .collect())
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> std::result::Result<PipelineOutput, PipelineError> {
    cfg.validate().at(Stage::Config)?;
    let metric_cfg = cfg.metric_config().at(Stage::Config)?;
    fs::create_dir_all(&cfg.output_dir).map_err(Error::from).at(Stage::Config)?;
    let out = |name: &str| cfg.output_dir.join(name);

    let passages = open(&cfg.corpus).and_then(load_corpus).at(Stage::Load)?;
    let mut queries = open(&cfg.queries).and_then(load_queries).at(Stage::Load)?;
    queries.sort_by(|a, b| a.id.cmp(&b.id));
    let qrels = open(&cfg.qrels).and_then(parse_qrels).at(Stage::Load)?;

    let index = InvertedIndex::build(&passages).at(Stage::Index)?;
    let corpus = Corpus::new(passages).at(Stage::Index)?;

    let initial: BTreeMap<String, RankedList> = match &cfg.initial_run {
        Some(path) => read_run_file(path).at(Stage::InitialRanking)?,
        None => queries
            .iter()
            .map(|q| (q.id.clone(), index.bm25_search(q, cfg.depth)))
            .collect(),
    };
    let initial_lists: Vec<RankedList> = initial.values().cloned().collect();
    create(&out("initial.run"))
        .and_then(|w| write_run(&initial_lists, w))
        .at(Stage::InitialRanking)?;

    let mut expansions: BTreeMap<String, Expansion> = BTreeMap::new();
    let mut expansions_path = None;
    if let Some(exp_cfg) = cfg.expansion_config() {
        let snippets_path = cfg.snippets.as_ref().expect("validated");
        let cache = open(snippets_path).and_then(load_snippet_cache).at(Stage::Expand)?;
        let lm = estimate_corpus_lm(&index).at(Stage::Expand)?;
        let retriever = cfg.retriever_config();
        for q in &queries {
            let e = augment_query(q, &cache, &retriever, &exp_cfg, &lm).at(Stage::Expand)?;
            expansions.insert(q.id.clone(), e);
        }
        let path = out("expansions.jsonl");
        let all: Vec<Expansion> = expansions.values().cloned().collect();
        create(&path).and_then(|w| write_expansions(&all, w)).at(Stage::Expand)?;
        expansions_path = Some(path);
    }

    let scorer = scorer_for(&cfg.scorer_endpoint(), &index).at(Stage::Rerank)?;
    let mut reranked = Vec::new();
    for q in &queries {
        let Some(list) = initial.get(&q.id) else {
            continue;
        };
        let list = rerank_topk(list, &corpus, q, expansions.get(&q.id), scorer.as_ref(), cfg.depth)
            .at(Stage::Rerank)?;
        reranked.push(list);
    }
    let reranked_run = out("reranked.run");
    create(&reranked_run).and_then(|w| write_run(&reranked, w)).at(Stage::Rerank)?;

    // evaluate what was written so reports match the on-disk run exactly
    let written: Vec<RankedList> = read_run_file(&reranked_run).at(Stage::Eval)?.into_values().collect();
    let report = evaluate_run(&written, &qrels, &metric_cfg).at(Stage::Eval)?;
    let report_path = out("report.tsv");
    create(&report_path)
        .and_then(|w| write_report(&report, true, w))
        .at(Stage::Eval)?;

    let mut baseline_report = None;
    let mut comparisons = Vec::new();
    if let Some(path) = &cfg.baseline_run {
        let baseline: Vec<RankedList> = read_run_file(path).at(Stage::Compare)?.into_values().collect();
        let base = evaluate_run(&baseline, &qrels, &metric_cfg).at(Stage::Compare)?;
        create(&out("baseline_report.tsv"))
            .and_then(|w| write_report(&base, true, w))
            .at(Stage::Compare)?;
        let names: Vec<String> = if cfg.compare_metrics.is_empty() {
            metric_cfg.metrics().iter().map(Metric::to_string).collect()
        } else {
            cfg.compare_metrics.clone()
        };
        let mut w = create(&out("comparison.tsv")).at(Stage::Compare)?;
        for name in names {
            let result = compare_runs(&base, &report, &name).at(Stage::Compare)?;
            write_comparison(&name, &result, &mut w).at(Stage::Compare)?;
            comparisons.push((name, result));
        }
        baseline_report = Some(base);
    }

    Ok(PipelineOutput {
        reranked_run,
        report_path,
        report,
        expansions_path,
        baseline_report,
        comparisons,
    })
}
