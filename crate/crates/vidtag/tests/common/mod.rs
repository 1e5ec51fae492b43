//! Brute-force reference implementations shared by the metric tests and the
//! acceptance suite. They rank by counting predecessors instead of sorting,
//! so they share no code path with the library.

#![allow(dead_code)]

use rand::Rng;
use vidtag_core::Tensor;

/// Position of item `i` in the order "score descending, id ascending".
fn position(scores: &[f64], i: usize) -> usize {
    (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count()
}

pub fn hit_at_k(preds: &Tensor, truths: &[Vec<usize>], k: usize) -> f64 {
    let hits = truths
        .iter()
        .enumerate()
        .filter(|(v, t)| t.iter().any(|&l| position(preds.row(*v), l) < k))
        .count();
    hits as f64 / truths.len() as f64
}

pub fn perr(preds: &Tensor, truths: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (v, t) in truths.iter().enumerate() {
        let hits = t.iter().filter(|&&l| position(preds.row(v), l) < t.len()).count();
        total += hits as f64 / t.len() as f64;
    }
    total / truths.len() as f64
}

/// Pooled average precision over each video's top `top_n` labels.
pub fn gap(preds: &Tensor, truths: &[Vec<usize>], top_n: usize) -> f64 {
    // (score, video, label, correct)
    let mut pool = Vec::new();
    for (v, t) in truths.iter().enumerate() {
        let row = preds.row(v);
        for l in 0..row.len() {
            if position(row, l) < top_n {
                pool.push((row[l], v, l, t.contains(&l)));
            }
        }
    }
    let before = |a: &(f64, usize, usize, bool), b: &(f64, usize, usize, bool)| {
        a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
    };
    let mut positions: Vec<usize> = pool
        .iter()
        .filter(|e| e.3)
        .map(|e| pool.iter().filter(|o| before(o, e)).count())
        .collect();
    if positions.is_empty() {
        return 0.0;
    }
    positions.sort_unstable();
    let mut ap = 0.0;
    for (rank, &pos) in positions.iter().enumerate() {
        ap += (rank + 1) as f64 / (pos + 1) as f64;
    }
    ap / positions.len() as f64
}

/// Small random instance with deliberate score ties.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Tensor, Vec<Vec<usize>>) {
    let videos = rng.random_range(1..=6);
    let vocab = rng.random_range(2..=8);
    let levels = rng.random_range(2..=5);
    let data = (0..videos * vocab).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let truths = (0..videos)
        .map(|_| {
            let mut t: Vec<usize> = (0..vocab).filter(|_| rng.random_bool(0.3)).collect();
            if t.is_empty() {
                t.push(rng.random_range(0..vocab));
            }
            t
        })
        .collect();
    (Tensor::new(&[videos, vocab], data).unwrap(), truths)
}

/// Scores that rank every true label above every false one.
pub fn oracle_scores(truths: &[Vec<usize>], vocab: usize) -> Tensor {
    let mut data = vec![0.0; truths.len() * vocab];
    for (v, t) in truths.iter().enumerate() {
        for &l in t {
            data[v * vocab + l] = 1.0;
        }
    }
    Tensor::new(&[truths.len(), vocab], data).unwrap()
}
