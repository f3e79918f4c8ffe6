#![allow(dead_code)]

use pwguess::corpus::{Corpus, FilterPolicy};
use pwguess::mc_estimator::FiniteModel;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "monkey", "dragon", "shadow", "master", "sunshine", "princess", "football", "baseball", "welcome",
    "flower", "hunter", "ranger", "silver", "orange", "purple", "summer", "winter", "spring", "tiger",
    "lover", "angel", "pepper", "cookie", "banana", "cheese", "soccer", "hockey", "killer", "ginger",
    "coffee", "rabbit", "pirate", "rocket", "castle", "forest", "planet", "garden", "thunder", "falcon",
    "wizard",
];

pub fn corpus(pws: Vec<String>, label: &str) -> Corpus {
    Corpus::from_passwords(pws.into_iter().map(String::into_bytes), label, FilterPolicy::default())
        .expect("non-empty")
        .0
}

/// lowercase word followed by one to four digits
pub fn language_a(rng: &mut ChaCha8Rng) -> String {
    let mut s = WORDS.choose(rng).unwrap().to_string();
    for _ in 0..rng.random_range(1..=4) {
        s.push(char::from(b'0' + rng.random_range(0..10u8)));
    }
    s
}

/// Capitalized word, a symbol, then two digits
pub fn language_b(rng: &mut ChaCha8Rng) -> String {
    let w = WORDS.choose(rng).unwrap();
    let mut s = w[..1].to_uppercase() + &w[1..];
    s.push(*b"!@#$".choose(rng).unwrap() as char);
    for _ in 0..2 {
        s.push(char::from(b'0' + rng.random_range(0..10u8)));
    }
    s
}

pub fn mixture(n: usize, frac_b: f64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random_bool(frac_b) { language_b(&mut rng) } else { language_a(&mut rng) })
        .collect()
}

/// First-order chain over `a..h`: random start and transition weights, and
/// a stop probability that grows with length. Strings have length 1 to 5.
pub fn chain_model(seed: u64) -> FiniteModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 8;
    let weights = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(2) + 0.05).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    };
    let start = weights(&mut rng);
    let trans: Vec<Vec<f64>> = (0..k).map(|_| weights(&mut rng)).collect();
    let stop = [0.05, 0.15, 0.3, 0.5, 1.0];
    let mut entries = Vec::new();
    let mut frontier: Vec<(Vec<u8>, f64)> = (0..k).map(|c| (vec![c as u8], start[c])).collect();
    for &q in &stop {
        let mut next = Vec::new();
        for (s, p) in frontier {
            entries.push((s.iter().map(|c| b'a' + c).collect::<Vec<u8>>(), p * q));
            if q < 1.0 {
                let last = *s.last().unwrap() as usize;
                for c in 0..k {
                    let mut t = s.clone();
                    t.push(c as u8);
                    next.push((t, p * (1.0 - q) * trans[last][c]));
                }
            }
        }
        frontier = next;
    }
    FiniteModel::new(entries).unwrap()
}

/// Number of support strings strictly more probable than each query.
pub fn true_ranks(model: &FiniteModel, queries: &[f64]) -> Vec<f64> {
    let mut probs: Vec<f64> = model.entries().iter().map(|e| e.1).collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    queries
        .iter()
        .map(|&q| probs.partition_point(|&p| p > q) as f64)
        .collect()
}
