//! Retrieval metrics over per-video score vectors: Hit@k, precision at equal
//! recall rate, and global average precision over pooled top-n predictions.
//!
//! Rankings sort by score descending and break ties by ascending label id.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GAP_TOP_N: usize = 20;

/// Label ids of one score vector, best first.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check(preds: &Tensor, truths: &[Vec<usize>], metric: &'static str) -> Result<usize> {
    if preds.shape().len() != 2 || preds.rows() != truths.len() {
        return Err(Error::Dimension {
            op: metric,
            detail: format!("scores {:?} for {} ground-truth sets", preds.shape(), truths.len()),
        });
    }
    if truths.is_empty() {
        return Err(Error::UndefinedMetric(metric));
    }
    preds.ensure_finite(metric)?;
    let v = preds.cols();
    for t in truths {
        if t.is_empty() {
            return Err(Error::EmptyLabels);
        }
        if let Some(&bad) = t.iter().find(|&&l| l >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
    }
    Ok(v)
}

fn truth_mask(truth: &[usize], v: usize) -> Vec<bool> {
    let mut mask = alloc::vec![false; v];
    for &l in truth {
        mask[l] = true;
    }
    mask
}

/// Fraction of videos with at least one true label among the top `k`.
pub fn hit_at_k(preds: &Tensor, truths: &[Vec<usize>], k: usize) -> Result<f64> {
    let v = check(preds, truths, "hit_at_k")?;
    if k == 0 || k > v {
        return Err(Error::Domain(format!("k = {k} outside 1..={v}")));
    }
    let hits = truths
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            let mask = truth_mask(t, v);
            ranking(preds.row(*i)).iter().take(k).any(|&l| mask[l])
        })
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Mean over videos of the precision within the top `|truth|` predictions.
pub fn perr(preds: &Tensor, truths: &[Vec<usize>]) -> Result<f64> {
    let v = check(preds, truths, "perr")?;
    let mut total = 0.0;
    for (i, t) in truths.iter().enumerate() {
        let mask = truth_mask(t, v);
        let size = mask.iter().filter(|&&m| m).count();
        let hits = ranking(preds.row(i)).iter().take(size).filter(|&&l| mask[l]).count();
        total += hits as f64 / size as f64;
    }
    Ok(total / truths.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolEntry {
    pub score: f64,
    pub video: usize,
    pub label: usize,
    pub correct: bool,
}

/// Pooled top-n predictions of a set of videos. Pools of disjoint shards
/// merge by concatenation; the global sort happens once in [`Pool::gap`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pool {
    pub entries: Vec<PoolEntry>,
}

impl Pool {
    /// Top-`top_n` entries of each video; video indices start at `offset`.
    pub fn collect(preds: &Tensor, truths: &[Vec<usize>], top_n: usize, offset: usize) -> Result<Self> {
        let v = check(preds, truths, "gap")?;
        if top_n == 0 {
            return Err(Error::Domain("top_n must be at least 1".into()));
        }
        let mut entries = Vec::with_capacity(truths.len() * top_n.min(v));
        for (i, t) in truths.iter().enumerate() {
            let mask = truth_mask(t, v);
            let row = preds.row(i);
            for &l in ranking(row).iter().take(top_n) {
                entries.push(PoolEntry { score: row[l], video: offset + i, label: l, correct: mask[l] });
            }
        }
        Ok(Self { entries })
    }

    pub fn merge(mut self, other: Pool) -> Self {
        self.entries.extend(other.entries);
        self
    }

    /// Average precision of the pooled list, with recall measured against
    /// the positives present in the pool. A pool without positives scores 0.
    pub fn gap(&self) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::UndefinedMetric("gap"));
        }
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then(a.video.cmp(&b.video)).then(a.label.cmp(&b.label))
        });
        let positives = sorted.iter().filter(|e| e.correct).count();
        if positives == 0 {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, e) in sorted.iter().enumerate() {
            if e.correct {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        Ok(ap / positives as f64)
    }
}

pub fn gap(preds: &Tensor, truths: &[Vec<usize>], top_n: usize) -> Result<f64> {
    Pool::collect(preds, truths, top_n, 0)?.gap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub hit1: f64,
    pub perr: f64,
    pub gap: f64,
}

impl MetricReport {
    pub fn evaluate(preds: &Tensor, truths: &[Vec<usize>]) -> Result<Self> {
        Ok(Self { hit1: hit_at_k(preds, truths, 1)?, perr: perr(preds, truths)?, gap: gap(preds, truths, GAP_TOP_N)? })
    }

    fn named(&self) -> [(&'static str, f64); 3] {
        [("hit1", self.hit1), ("perr", self.perr), ("gap", self.gap)]
    }

    /// `metric,value` lines with values as percentages to one decimal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.named() {
            let _ = writeln!(out, "{name},{:.1}", 100.0 * v);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in [("Hit@1", self.hit1), ("PERR", self.perr), ("GAP", self.gap)] {
            let _ = writeln!(out, "{name:<6} {:>5.1}%", 100.0 * v);
        }
        out
    }
}
