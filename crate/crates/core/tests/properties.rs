use std::collections::HashMap;

use proptest::prelude::*;

use augrank_core::augment::{filter_snippets, topical_term_weights, RetrieverConfig};
use augrank_core::corpus_io::{
    parse_qrels, parse_run, write_run, Corpus, Passage, Qrels, Query, RankedEntry, RankedList, Snippet, SnippetKind,
    SnippetSource,
};
use augrank_core::eval::{mrr_at_k, ndcg_at_k, success_at_k};
use augrank_core::index::{estimate_corpus_lm, tokenize, InvertedIndex};
use augrank_core::rerank::{rerank_topk, TableScorer};

fn ranked_list(qid: String, quarters: Vec<u8>) -> RankedList {
    let entries = quarters
        .into_iter()
        .enumerate()
        .map(|(i, s)| RankedEntry::new(format!("doc{i}"), f64::from(s) / 4.0))
        .collect();
    RankedList::sorted(qid, "prop", entries).unwrap()
}

fn snippet_strategy() -> impl Strategy<Value = Snippet> {
    (1u32..20, any::<bool>(), "[a-z]{1,6}( [a-z]{1,6}){0,8}").prop_map(|(rank, answer, text)| Snippet {
        query_id: "q".into(),
        rank,
        kind: if answer { SnippetKind::DirectAnswer } else { SnippetKind::Organic },
        text,
        source: SnippetSource::WebSerp,
    })
}

proptest! {
    #[test]
    fn run_file_round_trips(
        lists in prop::collection::vec(("q[0-9]{1,3}", prop::collection::vec(0u8..40, 0..12)), 1..5)
    ) {
        let mut seen = std::collections::HashSet::new();
        let lists: Vec<RankedList> = lists
            .into_iter()
            .filter(|(q, scores)| !scores.is_empty() && seen.insert(q.clone()))
            .map(|(q, s)| ranked_list(q, s))
            .collect();
        let mut buf = Vec::new();
        write_run(&lists, &mut buf).unwrap();
        let back = parse_run(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), lists.len());
        for (a, b) in lists.iter().zip(&back) {
            prop_assert_eq!(&a.query_id, &b.query_id);
            prop_assert_eq!(a.entries(), b.entries());
        }
    }

    #[test]
    fn qrels_ignore_line_order(
        judgments in prop::collection::btree_map(("q[0-3]", "d[0-9]{1,2}"), 0u32..4, 1..30),
        seed in any::<u64>(),
    ) {
        let mut lines: Vec<String> = judgments.iter().map(|((q, d), g)| format!("{q} 0 {d} {g}")).collect();
        let forward = parse_qrels(lines.join("\n").as_bytes()).unwrap();
        let mut state = seed;
        for i in (1..lines.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lines.swap(i, (state >> 33) as usize % (i + 1));
        }
        let shuffled = parse_qrels(lines.join("\n").as_bytes()).unwrap();
        prop_assert_eq!(forward, shuffled);
    }

    #[test]
    fn tokenize_is_idempotent(text in "\\PC{0,80}") {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn filter_is_idempotent(snippets in prop::collection::vec(snippet_strategy(), 0..10), skip in any::<bool>()) {
        let cfg = RetrieverConfig { skip_direct_answers: skip, ..RetrieverConfig::default() };
        let once = filter_snippets(&snippets, &cfg);
        prop_assert_eq!(filter_snippets(&once, &cfg), once.clone());
        prop_assert!(once.iter().all(|s| !skip || s.kind == SnippetKind::Organic));
    }

    #[test]
    fn kl_weights_invariant_to_repeating_the_evidence(
        snippets in prop::collection::vec(snippet_strategy(), 1..6),
        corpus in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,10}", 1..6),
        copies in 2usize..4,
    ) {
        let passages: Vec<Passage> = corpus.iter().enumerate().map(|(i, t)| Passage::new(format!("p{i}"), t.clone())).collect();
        let lm = estimate_corpus_lm(&InvertedIndex::build(&passages).unwrap()).unwrap();
        let once = topical_term_weights(&snippets, &lm).unwrap();
        let repeated: Vec<Snippet> = snippets.iter().cycle().take(snippets.len() * copies).cloned().collect();
        let many = topical_term_weights(&repeated, &lm).unwrap();
        prop_assert_eq!(once.len(), many.len());
        for (a, b) in once.iter().zip(&many) {
            prop_assert_eq!(&a.term, &b.term);
            prop_assert!((a.weight - b.weight).abs() <= 1e-12);
        }
    }

    #[test]
    fn rerank_permutes_and_respects_monotone_maps(
        initial in prop::collection::vec(0u8..20, 1..15),
        scores in prop::collection::vec(0.0f64..1.0, 15),
        k in 0usize..20,
    ) {
        let list = ranked_list("q".into(), initial);
        let corpus = Corpus::new(list.passage_ids().map(|id| Passage::new(id, "text")).collect()).unwrap();
        let query = Query::new("q", "query");
        let table: HashMap<String, f64> = list.passage_ids().zip(&scores).map(|(id, &s)| (id.to_string(), s)).collect();
        let plain = TableScorer { scores: table.clone(), default: 0.0 };
        let squashed = TableScorer {
            scores: table.into_iter().map(|(id, s)| (id, s * s * 0.5 + 0.1)).collect(),
            default: 0.0,
        };
        let a = rerank_topk(&list, &corpus, &query, None, &plain, k).unwrap();
        let b = rerank_topk(&list, &corpus, &query, None, &squashed, k).unwrap();

        let mut before: Vec<&str> = list.passage_ids().collect();
        let mut after: Vec<&str> = a.passage_ids().collect();
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
        prop_assert!(a.passage_ids().eq(b.passage_ids()));
        let k = k.min(list.len());
        prop_assert!(a.passage_ids().skip(k).eq(list.passage_ids().skip(k)));
    }

    #[test]
    fn metrics_do_not_decrease_with_depth(
        grades in prop::collection::vec(0u32..4, 1..20),
        k in 1usize..20,
    ) {
        let mut qrels = Qrels::new();
        for (i, g) in grades.iter().enumerate() {
            qrels.insert("q", &format!("doc{i}"), *g).unwrap();
        }
        let list = RankedList::new(
            "q",
            "r",
            (0..grades.len()).map(|i| RankedEntry::new(format!("doc{i}"), -(i as f64))).collect(),
        )
        .unwrap();
        prop_assert!(success_at_k(&list, &qrels, k, 1).unwrap() <= success_at_k(&list, &qrels, k + 1, 1).unwrap());
        prop_assert!(mrr_at_k(&list, &qrels, k, 1).unwrap() <= mrr_at_k(&list, &qrels, k + 1, 1).unwrap());
        let n = ndcg_at_k(&list, &qrels, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
    }
}
