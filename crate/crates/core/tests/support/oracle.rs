//! Independent reference implementations for the matching metrics.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thematic_core::domain::normalize_text;

/// (k, n_model, n_ref, precision, recall, jaccard, f1), worked out by hand.
pub const HAND_COMPUTED: &[(usize, usize, usize, f64, f64, f64, f64)] = &[
    (2, 3, 4, 0.666667, 0.5, 0.4, 0.571429),
    (5, 5, 5, 1.0, 1.0, 1.0, 1.0),
    (0, 3, 4, 0.0, 0.0, 0.0, 0.0),
    (0, 0, 0, 0.0, 0.0, 1.0, 0.0),
    (0, 0, 3, 0.0, 0.0, 0.0, 0.0),
    (0, 2, 0, 0.0, 0.0, 0.0, 0.0),
    (1, 1, 1, 1.0, 1.0, 1.0, 1.0),
    (1, 2, 1, 0.5, 1.0, 0.5, 0.666667),
    (1, 1, 2, 1.0, 0.5, 0.5, 0.666667),
    (3, 4, 6, 0.75, 0.5, 0.428571, 0.6),
    (2, 2, 4, 1.0, 0.5, 0.5, 0.666667),
    (4, 5, 5, 0.8, 0.8, 0.666667, 0.8),
    (3, 3, 9, 1.0, 0.333333, 0.333333, 0.5),
    (1, 4, 4, 0.25, 0.25, 0.142857, 0.25),
    (6, 10, 8, 0.6, 0.75, 0.5, 0.666667),
    (2, 5, 3, 0.4, 0.666667, 0.333333, 0.5),
    (7, 7, 10, 1.0, 0.7, 0.7, 0.823529),
    (5, 8, 5, 0.625, 1.0, 0.625, 0.769231),
    (3, 6, 4, 0.5, 0.75, 0.428571, 0.6),
    (10, 12, 15, 0.833333, 0.666667, 0.588235, 0.740741),
    (1, 3, 3, 0.333333, 0.333333, 0.2, 0.333333),
    (4, 4, 4, 1.0, 1.0, 1.0, 1.0),
];

pub fn score(a: &str, b: &str) -> f64 {
    let (na, nb) = (normalize_text(a), normalize_text(b));
    if na.is_empty() || nb.is_empty() {
        return 0.0;
    }
    let ta: HashSet<&str> = na.split(' ').collect();
    let tb: HashSet<&str> = nb.split(' ').collect();
    let shared = ta.iter().filter(|t| tb.contains(*t)).count();
    let j = shared as f64 / (ta.len() + tb.len() - shared) as f64;
    let words_a: Vec<&str> = na.split(' ').collect();
    let words_b: Vec<&str> = nb.split(' ').collect();
    if contains_run(&words_a, &words_b) || contains_run(&words_b, &words_a) {
        j.max(0.9)
    } else {
        j
    }
}

fn contains_run(hay: &[&str], needle: &[&str]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub m: usize,
    pub r: usize,
    pub score: f64,
}

/// Total preference order on edges: higher score, then smaller normalized
/// model quote, smaller normalized reference quote, then smaller indices.
fn better(a: &Edge, b: &Edge, model: &[String], reference: &[String]) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| normalize_text(&model[a.m]).cmp(&normalize_text(&model[b.m])))
        .then_with(|| normalize_text(&reference[a.r]).cmp(&normalize_text(&reference[b.r])))
        .then(a.m.cmp(&b.m))
        .then(a.r.cmp(&b.r))
}

/// Every matching over edges with score >= threshold.
pub fn all_matchings(model: &[String], reference: &[String], threshold: f64) -> Vec<Vec<Edge>> {
    fn go(i: usize, model: &[String], reference: &[String], t: f64, used: &mut Vec<bool>, cur: &mut Vec<Edge>, out: &mut Vec<Vec<Edge>>) {
        if i == model.len() {
            out.push(cur.clone());
            return;
        }
        go(i + 1, model, reference, t, used, cur, out);
        for r in 0..reference.len() {
            let s = score(&model[i], &reference[r]);
            if !used[r] && s >= t {
                used[r] = true;
                cur.push(Edge { m: i, r, score: s });
                go(i + 1, model, reference, t, used, cur, out);
                cur.pop();
                used[r] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, model, reference, threshold, &mut vec![false; reference.len()], &mut Vec::new(), &mut out);
    out
}

/// The matching whose edges, listed best first, form the lexicographically
/// best sequence under the edge order.
pub fn lex_best(model: &[String], reference: &[String], threshold: f64) -> Vec<Edge> {
    let mut best: Option<Vec<Edge>> = None;
    for mut m in all_matchings(model, reference, threshold) {
        m.sort_by(|a, b| better(a, b, model, reference));
        let wins = match &best {
            None => true,
            Some(b) => {
                let mut ord = Ordering::Equal;
                for (x, y) in m.iter().zip(b) {
                    ord = better(x, y, model, reference);
                    if ord != Ordering::Equal {
                        break;
                    }
                }
                ord == Ordering::Less || (ord == Ordering::Equal && m.len() > b.len())
            }
        };
        if wins {
            best = Some(m);
        }
    }
    best.unwrap_or_default()
}

pub fn max_cardinality(model: &[String], reference: &[String], threshold: f64) -> usize {
    all_matchings(model, reference, threshold).iter().map(Vec::len).max().unwrap_or(0)
}

pub fn max_score_sum(model: &[String], reference: &[String], threshold: f64) -> f64 {
    all_matchings(model, reference, threshold)
        .iter()
        .map(|m| m.iter().map(|e| e.score).sum::<f64>())
        .fold(0.0, f64::max)
}

const VOCAB: &[&str] = &["pills", "cost", "tired", "doctor", "many", "the", "Pills!", "money"];

fn random_quote(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=4);
    (0..n).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

/// Seeded random instances with at most six quotes per side.
pub fn instances(count: usize, seed: u64) -> Vec<(Vec<String>, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let nm = rng.gen_range(0..=6);
            let nr = rng.gen_range(0..=6);
            let model = (0..nm).map(|_| random_quote(&mut rng)).collect();
            let reference = (0..nr).map(|_| random_quote(&mut rng)).collect();
            (model, reference)
        })
        .collect()
}

/// Outcome of checking the greedy matcher against the oracles.
#[derive(Debug, Default)]
pub struct OracleSummary {
    pub instances: usize,
    pub lex_mismatches: usize,
    pub below_max_cardinality: usize,
    pub half_bound_violations: usize,
}

pub fn check_greedy(count: usize, seed: u64, threshold: f64) -> OracleSummary {
    let mut summary = OracleSummary::default();
    for (model, reference) in instances(count, seed) {
        summary.instances += 1;
        let greedy = thematic_core::eval::match_clues(&model, &reference, threshold).expect("valid threshold");
        let expected = lex_best(&model, &reference, threshold);
        let got: Vec<(usize, usize)> = greedy.pairs.iter().map(|p| (p.model_index, p.ref_index)).collect();
        let want: Vec<(usize, usize)> = expected.iter().map(|e| (e.m, e.r)).collect();
        let scores_agree = greedy
            .pairs
            .iter()
            .zip(&expected)
            .all(|(p, e)| (p.token_jaccard - e.score).abs() < 1e-12);
        if got != want || !scores_agree {
            summary.lex_mismatches += 1;
        }
        let k = greedy.pairs.len();
        let opt = max_cardinality(&model, &reference, threshold);
        if k < opt {
            summary.below_max_cardinality += 1;
        }
        let sum: f64 = greedy.pairs.iter().map(|p| p.token_jaccard).sum();
        if 2 * k < opt || sum + 1e-12 < 0.5 * max_score_sum(&model, &reference, threshold) {
            summary.half_bound_violations += 1;
        }
    }
    summary
}
