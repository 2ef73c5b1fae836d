//! Labelled training sequences for a sequence-to-sequence re-ranker.

use std::collections::{BTreeMap, HashMap};

use crate::augment::Expansion;
use crate::corpus_io::{Corpus, Label, Query, TrainingExample};
use crate::error::{Error, Result};
use crate::rerank::{build_augmented_input, build_input, RelevanceLabel};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingSet {
    examples: Vec<TrainingExample>,
    positives: usize,
    negatives: usize,
}

impl TrainingSet {
    pub fn new(examples: Vec<TrainingExample>) -> Self {
        let positives = examples.iter().filter(|e| e.label == Label::Relevant).count();
        let negatives = examples.len() - positives;
        TrainingSet {
            examples,
            positives,
            negatives,
        }
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn query_lookup(queries: &[Query]) -> HashMap<&str, &Query> {
    queries.iter().map(|q| (q.id.as_str(), q)).collect()
}

/// Checks that every triple resolves and counts labels.
pub fn make_pairs(triples: &[TrainingExample], corpus: &Corpus, queries: &[Query]) -> Result<TrainingSet> {
    let lookup = query_lookup(queries);
    for t in triples {
        if !lookup.contains_key(t.query_id.as_str()) {
            return Err(Error::Lookup(format!("query {} not found", t.query_id)));
        }
        corpus.require(&t.passage_id)?;
    }
    Ok(TrainingSet::new(triples.to_vec()))
}

/// Duplicates positives round-robin, appended after the original examples,
/// until they match the negatives.
pub fn balance_upsample(set: &TrainingSet) -> Result<TrainingSet> {
    if set.positives == 0 || set.negatives == 0 {
        return Err(Error::Invalid(format!(
            "cannot balance {} positives against {} negatives",
            set.positives, set.negatives
        )));
    }
    if set.positives >= set.negatives {
        return Ok(set.clone());
    }
    let positives: Vec<&TrainingExample> = set
        .examples
        .iter()
        .filter(|e| e.label == Label::Relevant)
        .collect();
    let mut examples = set.examples.clone();
    examples.extend(
        positives
            .iter()
            .cycle()
            .take(set.negatives - set.positives)
            .map(|&e| e.clone()),
    );
    Ok(TrainingSet::new(examples))
}

/// One `... Relevant: true|false` line per example. Queries without an
/// expansion use the plain template.
pub fn render_training_sequences(
    set: &TrainingSet,
    corpus: &Corpus,
    queries: &[Query],
    expansions: Option<&BTreeMap<String, Expansion>>,
) -> Result<Vec<String>> {
    let lookup = query_lookup(queries);
    set.examples
        .iter()
        .map(|e| {
            let query = lookup
                .get(e.query_id.as_str())
                .ok_or_else(|| Error::Lookup(format!("query {} not found", e.query_id)))?;
            let passage = corpus.require(&e.passage_id)?;
            let input = match expansions.and_then(|m| m.get(&e.query_id)) {
                Some(exp) => build_augmented_input(query, exp, passage),
                None => build_input(query, passage),
            };
            let label = match e.label {
                Label::Relevant => RelevanceLabel::True,
                Label::NotRelevant => RelevanceLabel::False,
            };
            Ok(input.training_sequence(label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ExpansionMode;
    use crate::corpus_io::Passage;

    fn ex(q: &str, p: &str, relevant: bool) -> TrainingExample {
        TrainingExample {
            query_id: q.into(),
            passage_id: p.into(),
            label: if relevant { Label::Relevant } else { Label::NotRelevant },
        }
    }

    fn set(pos: usize, neg: usize) -> TrainingSet {
        let mut v: Vec<TrainingExample> = (0..pos).map(|i| ex("q", &format!("p{i}"), true)).collect();
        v.extend((0..neg).map(|i| ex("q", &format!("n{i}"), false)));
        TrainingSet::new(v)
    }

    fn multiplicity(set: &TrainingSet, id: &str) -> usize {
        set.examples().iter().filter(|e| e.passage_id == id).count()
    }

    fn fixture() -> (Corpus, Vec<Query>) {
        let corpus = Corpus::new(vec![Passage::new("d1", "first passage"), Passage::new("d2", "second passage")]).unwrap();
        (corpus, vec![Query::new("q1", "a question")])
    }

    #[test]
    fn make_pairs_counts() {
        let (corpus, queries) = fixture();
        let s = make_pairs(&[ex("q1", "d1", true), ex("q1", "d2", false)], &corpus, &queries).unwrap();
        assert_eq!((s.positives(), s.negatives()), (1, 1));
        assert!(make_pairs(&[], &corpus, &queries).unwrap().is_empty());
    }

    #[test]
    fn make_pairs_ten_records() {
        let (corpus, queries) = fixture();
        let labels = [true, false, false, true, false, false, false, true, false, false];
        let triples: Vec<TrainingExample> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ex("q1", if i % 2 == 0 { "d1" } else { "d2" }, l))
            .collect();
        let s = make_pairs(&triples, &corpus, &queries).unwrap();
        assert_eq!((s.positives(), s.negatives()), (3, 7));
    }

    #[test]
    fn make_pairs_dangling_ids() {
        let (corpus, queries) = fixture();
        assert!(matches!(make_pairs(&[ex("q9", "d1", true)], &corpus, &queries), Err(Error::Lookup(_))));
        assert!(matches!(make_pairs(&[ex("q1", "d9", true)], &corpus, &queries), Err(Error::Lookup(_))));
    }

    #[test]
    fn upsample_exact_division() {
        let out = balance_upsample(&set(2, 6)).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!((multiplicity(&out, "p0"), multiplicity(&out, "p1")), (3, 3));
    }

    #[test]
    fn upsample_round_robin_remainder() {
        let input = set(3, 7);
        let out = balance_upsample(&input).unwrap();
        assert_eq!(out.len(), 14);
        let m: Vec<usize> = ["p0", "p1", "p2"].iter().map(|id| multiplicity(&out, id)).collect();
        assert_eq!(m, [3, 2, 2]);
        assert_eq!(&out.examples()[..input.len()], input.examples());
        assert_eq!(out.positives(), out.negatives());
    }

    #[test]
    fn upsample_balanced_or_invalid() {
        assert_eq!(balance_upsample(&set(5, 5)).unwrap(), set(5, 5));
        assert_eq!(balance_upsample(&set(6, 2)).unwrap(), set(6, 2));
        assert!(balance_upsample(&set(0, 3)).is_err());
        assert!(balance_upsample(&set(3, 0)).is_err());
    }

    #[test]
    fn render_labels_and_description() {
        let (corpus, queries) = fixture();
        let s = TrainingSet::new(vec![ex("q1", "d1", true), ex("q1", "d2", false)]);
        let plain = render_training_sequences(&s, &corpus, &queries, None).unwrap();
        assert_eq!(plain[0], "Query: a question Document: first passage Relevant: true");
        assert_eq!(plain[1], "Query: a question Document: second passage Relevant: false");

        let mut exps = BTreeMap::new();
        exps.insert(
            "q1".to_string(),
            Expansion {
                query_id: "q1".into(),
                mode: ExpansionMode::TopicalTerms,
                text: "extra terms".into(),
                provenance: Vec::new(),
                fallback: false,
            },
        );
        let augmented = render_training_sequences(&s, &corpus, &queries, Some(&exps)).unwrap();
        assert_eq!(augmented.len(), 2);
        assert!(augmented[0].contains(" Description: extra terms Document: "));
        assert!(augmented[0].ends_with("Relevant: true"));
        assert!(augmented[1].ends_with("Relevant: false"));
    }
}
