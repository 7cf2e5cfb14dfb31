//! Candidate scoring: recency decay, lexical relevance, source weighting.
//!
//! `score = w_recency * exp(-(now - ts)/tau) + w_relevance * cosine_tf(query,
//! content) + w_source * source_weight[source]`, always in [0, 1]. Relevance
//! is term-frequency cosine over lowercase words: dependency-free and easy
//! to check against an independent oracle. An embedding scorer can slot in
//! behind the same candidate shape.
//!
//! Scoring a batch is data-parallel; with the `parallel` feature it fans
//! out over rayon, and the sequential path stays available for comparison.

use std::collections::HashMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use serde::Serialize;

use crate::model::MemorySource;

use super::policy::Policy;

/// An unscored retrieval candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub source: MemorySource,
    pub content: String,
    pub ts_ms: i64,
}

impl Candidate {
    pub fn new(source: MemorySource, content: impl Into<String>, ts_ms: i64) -> Candidate {
        Candidate {
            source,
            content: content.into(),
            ts_ms,
        }
    }
}

/// A scored candidate as returned by reactive retrieval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedItem {
    pub source: MemorySource,
    pub content: String,
    pub ts_ms: i64,
    /// Lexical relevance to the query, in [0, 1].
    pub relevance: f64,
    pub score: f64,
}

/// Lowercase word stream; anything non-alphanumeric separates words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

fn tf_vector(text: &str) -> HashMap<String, f64> {
    let mut tf = HashMap::new();
    for word in words(text) {
        *tf.entry(word).or_insert(0.0) += 1.0;
    }
    tf
}

/// Cosine similarity of term-frequency vectors. 1.0 for identical texts,
/// 0.0 when either side is empty or nothing overlaps.
pub fn cosine_tf(a: &str, b: &str) -> f64 {
    let ta = tf_vector(a);
    let tb = tf_vector(b);
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let dot: f64 = ta
        .iter()
        .filter_map(|(word, fa)| tb.get(word).map(|fb| fa * fb))
        .sum();
    let na: f64 = ta.values().map(|f| f * f).sum::<f64>().sqrt();
    let nb: f64 = tb.values().map(|f| f * f).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Most frequent lowercase word of a text, ties broken lexicographically.
/// The default topic tag for interaction stamps.
pub fn top_tf_word(text: &str) -> Option<String> {
    let tf = tf_vector(text);
    tf.into_iter()
        .map(|(w, f)| (f as i64, w))
        .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
        .map(|(_, w)| w)
}

/// Recency factor in (0, 1]: items at or ahead of `now` score 1.
fn recency_factor(ts_ms: i64, now_ms: i64, tau_ms: i64) -> f64 {
    let age_ms = (now_ms - ts_ms).max(0) as f64;
    (-age_ms / tau_ms as f64).exp()
}

/// Scores one candidate under a policy. Returns (relevance, score).
pub fn score_item(
    candidate: &Candidate,
    query_text: &str,
    now_ms: i64,
    policy: &Policy,
) -> (f64, f64) {
    let relevance = cosine_tf(query_text, &candidate.content);
    let score = policy.w_recency * recency_factor(candidate.ts_ms, now_ms, policy.tau_ms)
        + policy.w_relevance * relevance
        + policy.w_source * policy.source_weight(candidate.source);
    (relevance, score)
}

fn to_retrieved(candidate: Candidate, query: &str, now_ms: i64, policy: &Policy) -> RetrievedItem {
    let (relevance, score) = score_item(&candidate, query, now_ms, policy);
    RetrievedItem {
        source: candidate.source,
        content: candidate.content,
        ts_ms: candidate.ts_ms,
        relevance,
        score,
    }
}

/// Scores a batch sequentially. Kept unconditionally for benchmarks and as
/// the fallback when the `parallel` feature is off.
pub fn score_candidates_seq(
    candidates: Vec<Candidate>,
    query_text: &str,
    now_ms: i64,
    policy: &Policy,
) -> Vec<RetrievedItem> {
    candidates
        .into_iter()
        .map(|c| to_retrieved(c, query_text, now_ms, policy))
        .collect()
}

/// Scores a batch, fanning out over rayon when the `parallel` feature is
/// enabled. Output order matches input order either way.
#[cfg(feature = "parallel")]
pub fn score_candidates(
    candidates: Vec<Candidate>,
    query_text: &str,
    now_ms: i64,
    policy: &Policy,
) -> Vec<RetrievedItem> {
    candidates
        .into_par_iter()
        .map(|c| to_retrieved(c, query_text, now_ms, policy))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn score_candidates(
    candidates: Vec<Candidate>,
    query_text: &str,
    now_ms: i64,
    policy: &Policy,
) -> Vec<RetrievedItem> {
    score_candidates_seq(candidates, query_text, now_ms, policy)
}

/// Deterministic ranking: score descending, then earlier timestamp, then
/// lexicographic content.
pub fn rank(items: &mut [RetrievedItem]) {
    items.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.ts_ms.cmp(&b.ts_ms))
            .then_with(|| a.content.cmp(&b.content))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MS_PER_HOUR;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_texts_have_cosine_one() {
        let text = "I water the garden on Sundays";
        assert!((cosine_tf(text, text) - 1.0).abs() < 1e-12);
        assert!((cosine_tf("Hello, World!", "hello world") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_texts_have_cosine_zero() {
        assert_eq!(cosine_tf("alpha beta", "gamma delta"), 0.0);
        assert_eq!(cosine_tf("", "anything"), 0.0);
        assert_eq!(cosine_tf("...", "anything"), 0.0);
    }

    #[test]
    fn fresh_item_with_zero_other_terms_scores_w_recency() {
        let mut policy = Policy::recency_first();
        policy.source_weights.insert(MemorySource::Context, 0.0);
        let candidate = Candidate::new(MemorySource::Context, "zzz unrelated", 1_000);
        let (relevance, score) = score_item(&candidate, "query words only", 1_000, &policy);
        assert_eq!(relevance, 0.0);
        assert!((score - policy.w_recency).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let policies = [
            Policy::recency_first(),
            Policy::user_centric(),
            Policy::task_driven(),
        ];
        for _ in 0..500 {
            let policy = &policies[rng.gen_range(0..3)];
            let source = MemorySource::ALL[rng.gen_range(0..6)];
            // Timestamps both past and future of now.
            let ts = rng.gen_range(-100 * MS_PER_HOUR..100 * MS_PER_HOUR);
            let candidate = Candidate::new(source, "some words here", ts);
            let (_, score) = score_item(&candidate, "words", 0, policy);
            assert!((0.0..=1.0).contains(&score), "score {score}");
        }
    }

    #[test]
    fn ranking_matches_brute_force_formula() {
        // Independent evaluation of the published formula, sharing no code
        // with score_item.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let vocab = ["garden", "rain", "tickets", "piano", "flight", "rome"];
        let policy = Policy::user_centric();
        let now = 48 * MS_PER_HOUR;
        let query = "piano tickets in rome";

        let candidates: Vec<Candidate> = (0..50)
            .map(|_| {
                let n = rng.gen_range(1..6);
                let content = (0..n)
                    .map(|_| vocab[rng.gen_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ");
                Candidate::new(
                    MemorySource::ALL[rng.gen_range(0..6)],
                    content,
                    rng.gen_range(0..now),
                )
            })
            .collect();

        let mut got = score_candidates(candidates.clone(), query, now, &policy);
        rank(&mut got);

        let mut expected: Vec<(f64, i64, String)> = candidates
            .iter()
            .map(|c| {
                let age = (now - c.ts_ms).max(0) as f64;
                let recency = (-age / policy.tau_ms as f64).exp();
                let rel = brute_cosine(query, &c.content);
                let sw = policy.source_weights.get(&c.source).copied().unwrap_or(0.0);
                let score =
                    policy.w_recency * recency + policy.w_relevance * rel + policy.w_source * sw;
                (score, c.ts_ms, c.content.clone())
            })
            .collect();
        expected.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });

        for (item, (score, ts, content)) in got.iter().zip(&expected) {
            assert!((item.score - score).abs() < 1e-12);
            assert_eq!(item.ts_ms, *ts);
            assert_eq!(&item.content, content);
        }
    }

    // Plain nested-loop cosine for the oracle.
    fn brute_cosine(a: &str, b: &str) -> f64 {
        let wa: Vec<String> = words(a).collect();
        let wb: Vec<String> = words(b).collect();
        if wa.is_empty() || wb.is_empty() {
            return 0.0;
        }
        let mut uniq: Vec<&String> = wa.iter().chain(wb.iter()).collect();
        uniq.sort();
        uniq.dedup();
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for word in uniq {
            let fa = wa.iter().filter(|w| w == &word).count() as f64;
            let fb = wb.iter().filter(|w| w == &word).count() as f64;
            dot += fa * fb;
            na += fa * fa;
            nb += fb * fb;
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn positive_rescaling_preserves_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let candidates: Vec<Candidate> = (0..30)
            .map(|i| {
                Candidate::new(
                    MemorySource::ALL[rng.gen_range(0..6)],
                    format!("item number {i} with words {}", rng.gen_range(0..5)),
                    rng.gen_range(0..1_000_000),
                )
            })
            .collect();
        let policy = Policy::recency_first();
        let mut scaled = policy.clone();
        scaled.w_recency *= 3.5;
        scaled.w_relevance *= 3.5;
        scaled.w_source *= 3.5;

        let mut base = score_candidates(candidates.clone(), "words item", 2_000_000, &policy);
        let mut multiplied = score_candidates(candidates, "words item", 2_000_000, &scaled);
        rank(&mut base);
        rank(&mut multiplied);
        let order_a: Vec<&String> = base.iter().map(|i| &i.content).collect();
        let order_b: Vec<&String> = multiplied.iter().map(|i| &i.content).collect();
        assert_eq!(order_a, order_b);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let candidates: Vec<Candidate> = (0..200)
            .map(|i| {
                Candidate::new(
                    MemorySource::Conversational,
                    format!("turn {i} about gardens"),
                    i,
                )
            })
            .collect();
        let policy = Policy::recency_first();
        let par = score_candidates(candidates.clone(), "gardens", 1_000, &policy);
        let seq = score_candidates_seq(candidates, "gardens", 1_000, &policy);
        assert_eq!(par, seq);
    }
}
