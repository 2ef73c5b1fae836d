//! Ranking metrics and paired significance testing.
//!
//! Per-query metric functions return `None` when the query has no judgments
//! at all; such queries are left out of aggregates and counted separately.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::corpus_io::{Qrels, RankedList};
use crate::error::{Error, Result};
use crate::stats::student_t_two_tailed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Success(usize),
    Mrr(usize),
    Ndcg(usize),
    Map,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Success(k) => write!(f, "s@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Map => f.write_str("map"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "map" {
            return Ok(Metric::Map);
        }
        let bad = || Error::Invalid(format!("unknown metric `{s}`"));
        let (name, cutoff) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = cutoff.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(Error::Invalid(format!("metric cutoff must be at least 1 in `{s}`")));
        }
        match name {
            "s" | "success" | "hits" => Ok(Metric::Success(k)),
            "mrr" => Ok(Metric::Mrr(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricConfig {
    pub success_cutoffs: BTreeSet<usize>,
    pub mrr_cutoff: Option<usize>,
    pub ndcg_cutoff: Option<usize>,
    pub map: bool,
    /// Minimum grade counted as relevant for Success and MRR.
    pub binary_relevance_threshold: u32,
    /// Minimum grade counted as relevant for MAP. `None` picks 2 for graded
    /// qrels (any grade above 1) and 1 otherwise.
    pub map_relevance_threshold: Option<u32>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            success_cutoffs: [1, 5, 10, 20].into_iter().collect(),
            mrr_cutoff: Some(10),
            ndcg_cutoff: Some(10),
            map: true,
            binary_relevance_threshold: 1,
            map_relevance_threshold: None,
        }
    }
}

impl MetricConfig {
    /// Config computing exactly `metrics`, default thresholds. At most one
    /// MRR and one nDCG cutoff are allowed.
    pub fn from_metrics(metrics: &[Metric]) -> Result<Self> {
        let mut cfg = MetricConfig {
            success_cutoffs: BTreeSet::new(),
            mrr_cutoff: None,
            ndcg_cutoff: None,
            map: false,
            ..Self::default()
        };
        for &m in metrics {
            match m {
                Metric::Success(k) => {
                    cfg.success_cutoffs.insert(k);
                }
                Metric::Mrr(k) => {
                    if cfg.mrr_cutoff.is_some_and(|c| c != k) {
                        return Err(Error::Invalid("only one MRR cutoff is supported".into()));
                    }
                    cfg.mrr_cutoff = Some(k);
                }
                Metric::Ndcg(k) => {
                    if cfg.ndcg_cutoff.is_some_and(|c| c != k) {
                        return Err(Error::Invalid("only one nDCG cutoff is supported".into()));
                    }
                    cfg.ndcg_cutoff = Some(k);
                }
                Metric::Map => cfg.map = true,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cutoffs = self
            .success_cutoffs
            .iter()
            .copied()
            .chain(self.mrr_cutoff)
            .chain(self.ndcg_cutoff);
        for k in cutoffs {
            if k == 0 {
                return Err(Error::Invalid("metric cutoffs must be at least 1".into()));
            }
        }
        if self.binary_relevance_threshold == 0 || self.map_relevance_threshold == Some(0) {
            return Err(Error::Invalid("relevance thresholds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn metrics(&self) -> Vec<Metric> {
        let mut out: Vec<Metric> = self.success_cutoffs.iter().map(|&k| Metric::Success(k)).collect();
        out.extend(self.mrr_cutoff.map(Metric::Mrr));
        out.extend(self.ndcg_cutoff.map(Metric::Ndcg));
        if self.map {
            out.push(Metric::Map);
        }
        out
    }

    fn map_threshold(&self, qrels: &Qrels) -> u32 {
        self.map_relevance_threshold
            .unwrap_or(if qrels.max_grade() > 1 { 2 } else { 1 })
    }
}

/// Grades of the ranked passages, unjudged passages counting as 0.
fn ranked_grades(list: &RankedList, qrels: &Qrels) -> Option<Vec<u32>> {
    let judged = qrels.for_query(&list.query_id)?;
    Some(
        list.passage_ids()
            .map(|id| judged.get(id).copied().unwrap_or(0))
            .collect(),
    )
}

pub fn success_at_k(list: &RankedList, qrels: &Qrels, k: usize, threshold: u32) -> Option<f64> {
    let grades = ranked_grades(list, qrels)?;
    let hit = grades.iter().take(k).any(|&g| g >= threshold);
    Some(if hit { 1.0 } else { 0.0 })
}

pub fn mrr_at_k(list: &RankedList, qrels: &Qrels, k: usize, threshold: u32) -> Option<f64> {
    let grades = ranked_grades(list, qrels)?;
    Some(
        grades
            .iter()
            .take(k)
            .position(|&g| g >= threshold)
            .map_or(0.0, |i| 1.0 / (i + 1) as f64),
    )
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| f64::from(g) / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG with linear gain.
pub fn ndcg_at_k(list: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
    let grades = ranked_grades(list, qrels)?;
    let mut ideal: Vec<u32> = qrels.for_query(&list.query_id)?.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return Some(0.0);
    }
    Some(dcg(grades.into_iter().take(k)) / idcg)
}

pub fn average_precision(list: &RankedList, qrels: &Qrels, threshold: u32) -> Option<f64> {
    let grades = ranked_grades(list, qrels)?;
    let total_relevant = qrels
        .for_query(&list.query_id)?
        .values()
        .filter(|&&g| g >= threshold)
        .count();
    if total_relevant == 0 {
        return Some(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &g) in grades.iter().enumerate() {
        if g >= threshold {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    /// query id -> metric name -> value
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    /// Mean over judged queries.
    pub aggregate: BTreeMap<String, f64>,
    pub query_count: usize,
    pub unjudged: Vec<String>,
}

impl MetricReport {
    pub fn values(&self, metric: &str) -> BTreeMap<String, f64> {
        self.per_query
            .iter()
            .filter_map(|(q, m)| m.get(metric).map(|&v| (q.clone(), v)))
            .collect()
    }
}

pub fn evaluate_run(lists: &[RankedList], qrels: &Qrels, cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let mut seen = HashSet::new();
    for list in lists {
        if !seen.insert(list.query_id.as_str()) {
            return Err(Error::Conflict(format!("query {} appears twice in the run", list.query_id)));
        }
    }
    let map_threshold = cfg.map_threshold(qrels);
    let metrics = cfg.metrics();
    let mut report = MetricReport::default();

    for list in lists {
        if !qrels.contains_query(&list.query_id) {
            report.unjudged.push(list.query_id.clone());
            continue;
        }
        let values = metrics
            .iter()
            .map(|&m| {
                let v = match m {
                    Metric::Success(k) => success_at_k(list, qrels, k, cfg.binary_relevance_threshold),
                    Metric::Mrr(k) => mrr_at_k(list, qrels, k, cfg.binary_relevance_threshold),
                    Metric::Ndcg(k) => ndcg_at_k(list, qrels, k),
                    Metric::Map => average_precision(list, qrels, map_threshold),
                }
                .expect("query is judged");
                (m.to_string(), v)
            })
            .collect();
        report.per_query.insert(list.query_id.clone(), values);
    }
    if report.per_query.is_empty() {
        return Err(Error::Invalid("no run query has relevance judgments".into()));
    }
    report.unjudged.sort();
    report.query_count = report.per_query.len();
    // BTreeMap iteration gives a fixed summation order over sorted query ids
    for m in &metrics {
        let name = m.to_string();
        let sum: f64 = report.per_query.values().map(|v| v[&name]).sum();
        report.aggregate.insert(name, sum / report.query_count as f64);
    }
    Ok(report)
}

/// Tab-separated `metric  query  value` lines; aggregates use the query
/// column `all`.
pub fn write_report<W: Write>(report: &MetricReport, per_query: bool, mut out: W) -> Result<()> {
    if per_query {
        for (qid, values) in &report.per_query {
            for (name, v) in values {
                writeln!(out, "{name}\t{qid}\t{v:.6}")?;
            }
        }
    }
    writeln!(out, "num_q\tall\t{}", report.query_count)?;
    writeln!(out, "num_unjudged\tall\t{}", report.unjudged.len())?;
    for qid in &report.unjudged {
        writeln!(out, "unjudged\t{qid}\t1")?;
    }
    for (name, v) in &report.aggregate {
        writeln!(out, "{name}\tall\t{v:.6}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_report<R: BufRead>(reader: R) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(i + 1, "expected `metric<TAB>query<TAB>value`"));
        }
        let parse_err = || Error::parse(i + 1, format!("bad value `{}`", fields[2]));
        match (fields[0], fields[1]) {
            ("num_q", "all") => report.query_count = fields[2].parse().map_err(|_| parse_err())?,
            ("num_unjudged", "all") => {}
            ("unjudged", qid) => report.unjudged.push(qid.to_string()),
            (name, qid) => {
                let v: f64 = fields[2].parse().map_err(|_| parse_err())?;
                if qid == "all" {
                    report.aggregate.insert(name.to_string(), v);
                } else {
                    report
                        .per_query
                        .entry(qid.to_string())
                        .or_default()
                        .insert(name.to_string(), v);
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Significance {
    None,
    /// p <= 0.05
    P05,
    /// p <= 0.01
    P01,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p <= 0.01 {
            Significance::P01
        } else if p <= 0.05 {
            Significance::P05
        } else {
            Significance::None
        }
    }

    /// Table marker: single arrow for p <= 0.05, double for p <= 0.01.
    pub fn arrow(self) -> &'static str {
        match self {
            Significance::None => "",
            Significance::P05 => "↑",
            Significance::P01 => "⇑",
        }
    }
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Significance::None => "none",
            Significance::P05 => "p05",
            Significance::P01 => "p01",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub mean_difference: f64,
    pub marker: Significance,
}

/// Two-tailed paired t-test on `treatment - baseline`.
///
/// Differences that are all identical have zero variance: the result is
/// p = 1 when they are all zero and p = 0 otherwise.
pub fn paired_t_test(baseline: &BTreeMap<String, f64>, treatment: &BTreeMap<String, f64>) -> Result<TTestResult> {
    if baseline.len() != treatment.len() || baseline.keys().any(|k| !treatment.contains_key(k)) {
        return Err(Error::Invalid("paired t-test needs the same queries on both sides".into()));
    }
    let n = baseline.len();
    if n < 2 {
        return Err(Error::Invalid(format!("paired t-test needs at least 2 queries, got {n}")));
    }
    let diffs: Vec<f64> = baseline.iter().map(|(q, b)| treatment[q] - b).collect();
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let df = n - 1;

    // rounding noise in (b + c) - b must not turn a constant shift into a finite t
    let (t, p) = if sd <= mean.abs() * 1e-12 || sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (sd / nf.sqrt());
        (t, student_t_two_tailed(t, df as f64))
    };
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        mean_difference: mean,
        marker: Significance::from_p(p),
    })
}

/// Paired t-test of one metric over the queries both reports evaluated.
pub fn compare_runs(baseline: &MetricReport, treatment: &MetricReport, metric: &str) -> Result<TTestResult> {
    let base = baseline.values(metric);
    let treat = treatment.values(metric);
    if base.is_empty() || treat.is_empty() {
        return Err(Error::Invalid(format!("metric {metric} is missing from a report")));
    }
    let shared: BTreeSet<&String> = base.keys().filter(|q| treat.contains_key(*q)).collect();
    if shared.is_empty() {
        return Err(Error::Invalid("reports share no queries".into()));
    }
    let pick = |m: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
        shared.iter().map(|&q| (q.clone(), m[q])).collect()
    };
    paired_t_test(&pick(&base), &pick(&treat))
}

pub fn write_comparison<W: Write>(metric: &str, result: &TTestResult, mut out: W) -> Result<()> {
    writeln!(out, "metric\t{metric}")?;
    writeln!(out, "mean_diff\t{:.6}", result.mean_difference)?;
    writeln!(out, "t\t{:.6}", result.t_statistic)?;
    writeln!(out, "df\t{}", result.degrees_of_freedom)?;
    writeln!(out, "p\t{:.6}", result.p_value)?;
    writeln!(out, "marker\t{}\t{}", result.marker, result.marker.arrow())?;
    out.flush()?;
    Ok(())
}
