use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use augrank_core::augment::{augment_query, load_expansions, write_expansions, ExpansionConfig, ExpansionMode, RetrieverConfig};
use augrank_core::corpus_io::{
    load_corpus, load_queries, load_snippet_cache, load_triples, parse_qrels, parse_run, write_run, Corpus,
    RankedList, SnippetSource,
};
use augrank_core::eval::{compare_runs, evaluate_run, read_report, write_comparison, write_report, Metric, MetricConfig};
use augrank_core::index::{estimate_corpus_lm, fuse_runs, Bm25Params, FusionConfig, InvertedIndex};
use augrank_core::pipeline::{run_pipeline, ExperimentConfig, PipelineMode};
use augrank_core::rerank::{rerank_topk, scorer_for, ScorerEndpoint, ScorerKind};
use augrank_core::trainset::{balance_upsample, make_pairs, render_training_sequences};
use augrank_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "augrank", version, about = "Retrieval-augmented passage re-ranking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or query a BM25 index
    #[command(subcommand)]
    Index(IndexCommand),
    /// Linearly fuse a dense and a sparse run
    Fuse(FuseArgs),
    /// Expand queries with cached snippets
    Expand(ExpandArgs),
    /// Re-rank an initial run
    Rerank(RerankArgs),
    /// Build labelled training sequences
    #[command(subcommand)]
    Trainset(TrainsetCommand),
    /// Evaluate a run against qrels
    Eval(EvalArgs),
    /// Paired t-test between two per-query reports
    Compare(CompareArgs),
    /// Run a configured experiment end to end
    #[command(subcommand)]
    Pipeline(PipelineCommand),
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        k1: f64,
        #[arg(long, default_value_t = 0.4)]
        b: f64,
    },
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    dense: PathBuf,
    #[arg(long)]
    sparse: PathBuf,
    #[arg(long, default_value_t = 1.3)]
    alpha: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    #[arg(long, value_parser = ["nl", "terms"])]
    mode: String,
    #[arg(long, default_value_t = 64)]
    max_words: usize,
    #[arg(long, default_value_t = 64)]
    max_terms: usize,
    #[arg(long, default_value_t = 5)]
    max_snippets: usize,
    #[arg(long, default_value = "serp", value_parser = ["serp", "wiki"])]
    source: String,
    #[arg(long)]
    keep_direct_answers: bool,
    #[arg(long)]
    snippets: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Corpus for the background language model
    #[arg(long, conflicts_with = "index", required_unless_present = "index")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScorerArgs {
    #[arg(long, default_value = "baseline", value_parser = ["baseline", "remote"])]
    scorer: String,
    #[arg(long)]
    address: Option<String>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

impl ScorerArgs {
    fn endpoint(&self) -> Result<ScorerEndpoint, Error> {
        Ok(ScorerEndpoint {
            kind: self.scorer.parse::<ScorerKind>()?,
            address: self.address.clone(),
            batch_size: self.batch_size,
            timeout: Duration::from_secs(self.timeout_secs),
            ..ScorerEndpoint::default()
        })
    }
}

#[derive(Debug, Args)]
struct RerankArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Expansion file, or `none`
    #[arg(long, default_value = "none")]
    expansions: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum TrainsetCommand {
    Build {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        expansions: Option<PathBuf>,
        #[arg(long)]
        balance: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "s@1,s@5,s@10,s@20,mrr@10,ndcg@10,map")]
    metrics: String,
    #[arg(long)]
    per_query: bool,
    #[arg(long)]
    map_threshold: Option<u32>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    treatment: PathBuf,
    #[arg(long)]
    metric: String,
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["none", "nl", "terms"])]
        mode: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        max_words: Option<usize>,
        #[arg(long)]
        max_terms: Option<usize>,
        #[arg(long)]
        max_snippets: Option<usize>,
        #[arg(long, value_parser = ["serp", "wiki"])]
        source: Option<String>,
        #[arg(long, value_parser = ["baseline", "remote"])]
        scorer: Option<String>,
        #[arg(long)]
        address: Option<String>,
        #[arg(long)]
        baseline_run: Option<PathBuf>,
    },
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Invalid(format!("cannot open {}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_lists_by_query(path: &Path) -> Result<BTreeMap<String, RankedList>, Error> {
    Ok(parse_run(open(path)?)?
        .into_iter()
        .map(|l| (l.query_id.clone(), l))
        .collect())
}

fn index_cmd(cmd: IndexCommand) -> Result<(), Error> {
    match cmd {
        IndexCommand::Build { corpus, output, k1, b } => {
            let passages = load_corpus(open(&corpus)?)?;
            let index = InvertedIndex::build_with(&passages, Bm25Params { k1, b })?;
            index.save(BufWriter::new(File::create(&output)?))?;
            eprintln!(
                "indexed {} passages, {} terms, {} tokens",
                index.doc_count(),
                index.vocab_size(),
                index.total_tokens()
            );
            Ok(())
        }
        IndexCommand::Search { index, queries, k, output: out } => {
            if k == 0 {
                return Err(Error::Invalid("--k must be at least 1".into()));
            }
            let index = InvertedIndex::load(open(&index)?)?;
            let queries = load_queries(open(&queries)?)?;
            let lists: Vec<RankedList> = queries.iter().map(|q| index.bm25_search(q, k)).collect();
            write_run(&lists, output(out.as_deref())?)
        }
    }
}

fn fuse_cmd(args: FuseArgs) -> Result<(), Error> {
    let cfg = FusionConfig::new(args.alpha)?;
    let dense = run_lists_by_query(&args.dense)?;
    let sparse = run_lists_by_query(&args.sparse)?;
    let mut qids: Vec<&String> = dense.keys().chain(sparse.keys()).collect();
    qids.sort();
    qids.dedup();
    let fused = qids
        .into_iter()
        .map(|q| {
            let empty = RankedList::empty(q.clone(), "");
            fuse_runs(dense.get(q).unwrap_or(&empty), sparse.get(q).unwrap_or(&empty), cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_run(&fused, output(args.output.as_deref())?)
}

fn expand_cmd(args: ExpandArgs) -> Result<(), Error> {
    let mode: ExpansionMode = args.mode.parse()?;
    let retriever = RetrieverConfig {
        max_snippets: args.max_snippets,
        source: args.source.parse::<SnippetSource>()?,
        skip_direct_answers: !args.keep_direct_answers,
    };
    retriever.validate()?;
    let expansion = ExpansionConfig {
        mode,
        max_words: args.max_words,
        max_terms: args.max_terms,
        ..ExpansionConfig::default()
    };
    expansion.validate()?;
    let index = match (&args.index, &args.corpus) {
        (Some(path), _) => InvertedIndex::load(open(path)?)?,
        (None, Some(path)) => InvertedIndex::build(&load_corpus(open(path)?)?)?,
        (None, None) => unreachable!("clap requires --corpus or --index"),
    };
    let lm = estimate_corpus_lm(&index)?;
    let cache = load_snippet_cache(open(&args.snippets)?)?;
    let queries = load_queries(open(&args.queries)?)?;
    let expansions = queries
        .iter()
        .map(|q| augment_query(q, &cache, &retriever, &expansion, &lm))
        .collect::<Result<Vec<_>, _>>()?;
    write_expansions(&expansions, output(args.output.as_deref())?)
}

fn rerank_cmd(args: RerankArgs) -> Result<(), Error> {
    if args.k == 0 {
        return Err(Error::Invalid("--k must be at least 1".into()));
    }
    let endpoint = args.scorer.endpoint()?;
    let passages = load_corpus(open(&args.corpus)?)?;
    let index = InvertedIndex::build(&passages)?;
    let corpus = Corpus::new(passages)?;
    let queries = load_queries(open(&args.queries)?)?;
    let expansions = match args.expansions.as_str() {
        "none" => BTreeMap::new(),
        path => load_expansions(open(Path::new(path))?)?,
    };
    let initial = run_lists_by_query(&args.run)?;
    let scorer = scorer_for(&endpoint, &index)?;
    let mut lists = Vec::new();
    for (qid, list) in &initial {
        let query = queries
            .iter()
            .find(|q| &q.id == qid)
            .ok_or_else(|| Error::Lookup(format!("query {qid} from the run is not in the query file")))?;
        lists.push(rerank_topk(list, &corpus, query, expansions.get(qid), scorer.as_ref(), args.k)?);
    }
    write_run(&lists, output(args.output.as_deref())?)
}

fn trainset_cmd(cmd: TrainsetCommand) -> Result<(), Error> {
    let TrainsetCommand::Build {
        triples,
        corpus,
        queries,
        expansions,
        balance,
        output: out,
    } = cmd;
    let corpus = Corpus::new(load_corpus(open(&corpus)?)?)?;
    let queries = load_queries(open(&queries)?)?;
    let triples = load_triples(open(&triples)?)?;
    let expansions = expansions
        .map(|p| open(&p).and_then(load_expansions))
        .transpose()?;
    let mut set = make_pairs(&triples, &corpus, &queries)?;
    if balance {
        set = balance_upsample(&set)?;
    }
    let lines = render_training_sequences(&set, &corpus, &queries, expansions.as_ref())?;
    let mut w = output(out.as_deref())?;
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    eprintln!("{} positives, {} negatives", set.positives(), set.negatives());
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), Error> {
    let metrics = args
        .metrics
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Metric>, _>>()?;
    let mut cfg = MetricConfig::from_metrics(&metrics)?;
    cfg.map_relevance_threshold = args.map_threshold;
    let lists = parse_run(open(&args.run)?)?;
    let qrels = parse_qrels(open(&args.qrels)?)?;
    let report = evaluate_run(&lists, &qrels, &cfg)?;
    write_report(&report, args.per_query, output(args.output.as_deref())?)
}

fn compare_cmd(args: CompareArgs) -> Result<(), Error> {
    let baseline = read_report(open(&args.baseline)?)?;
    let treatment = read_report(open(&args.treatment)?)?;
    let result = compare_runs(&baseline, &treatment, &args.metric)?;
    write_comparison(&args.metric, &result, output(None)?)
}

fn pipeline_cmd(cmd: PipelineCommand) -> Result<(), Error> {
    let PipelineCommand::Run {
        config,
        mode,
        output_dir,
        depth,
        max_words,
        max_terms,
        max_snippets,
        source,
        scorer,
        address,
        baseline_run,
    } = cmd;
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(m) = mode {
        cfg.expansion.mode = m.parse::<PipelineMode>()?;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    if let Some(d) = depth {
        cfg.depth = d;
    }
    if let Some(w) = max_words {
        cfg.expansion.max_words = w;
    }
    if let Some(t) = max_terms {
        cfg.expansion.max_terms = t;
    }
    if let Some(m) = max_snippets {
        cfg.retriever.max_snippets = m;
    }
    if let Some(s) = source {
        cfg.retriever.source = s.parse()?;
    }
    if let Some(s) = scorer {
        cfg.scorer.kind = s.parse()?;
    }
    if address.is_some() {
        cfg.scorer.address = address;
    }
    if baseline_run.is_some() {
        cfg.baseline_run = baseline_run;
    }
    let out = run_pipeline(&cfg).map_err(|e| {
        eprintln!("augrank: stage `{}` failed", e.stage);
        e.source
    })?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "run\t{}", out.reranked_run.display())?;
    writeln!(stdout, "report\t{}", out.report_path.display())?;
    for (name, value) in &out.report.aggregate {
        writeln!(stdout, "{name}\t{value:.4}")?;
    }
    for (name, t) in &out.comparisons {
        writeln!(
            stdout,
            "compare\t{name}\tt={:.4}\tdf={}\tp={:.4}\t{}",
            t.t_statistic, t.degrees_of_freedom, t.p_value, t.marker
        )?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Index(cmd) => index_cmd(cmd),
        Command::Fuse(args) => fuse_cmd(args),
        Command::Expand(args) => expand_cmd(args),
        Command::Rerank(args) => rerank_cmd(args),
        Command::Trainset(cmd) => trainset_cmd(cmd),
        Command::Eval(args) => eval_cmd(args),
        Command::Compare(args) => compare_cmd(args),
        Command::Pipeline(cmd) => pipeline_cmd(cmd),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("augrank: {e}");
            ExitCode::from(if e.is_transport() { EXIT_TRANSPORT } else { EXIT_DATA })
        }
    }
}
