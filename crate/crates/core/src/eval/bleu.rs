//! Corpus-level BLEU.
//!
//! Modified (clipped) n-gram precisions are pooled over the whole corpus
//! before taking the geometric mean, and the brevity penalty compares total
//! candidate length with total reference length. Single reference per
//! candidate.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero precision makes the score 0.
    None,
    /// `(matches + 1) / (total + 1)` for n ≥ 2; unigram precision unsmoothed.
    #[default]
    AddOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_n: 4,
            smoothing: Smoothing::AddOne,
        }
    }
}

/// Sufficient statistics for corpus BLEU; statistics of disjoint subsets
/// merge by addition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub candidate_len: u64,
    pub reference_len: u64,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            candidate_len: 0,
            reference_len: 0,
        }
    }

    pub fn max_n(&self) -> usize {
        self.matches.len()
    }

    pub fn add<T: Hash + Eq>(&mut self, candidate: &[T], reference: &[T]) {
        for n in 1..=self.max_n() {
            let cand = ngram_counts(candidate, n);
            let refc = ngram_counts(reference, n);
            let clipped: u64 = cand
                .iter()
                .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
                .sum();
            self.matches[n - 1] += clipped;
            self.totals[n - 1] += candidate.len().saturating_sub(n - 1) as u64;
        }
        self.candidate_len += candidate.len() as u64;
        self.reference_len += reference.len() as u64;
    }

    pub fn merge(&mut self, other: &BleuStats) {
        for n in 0..self.max_n().min(other.max_n()) {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.candidate_len == 0 {
            0.0
        } else if self.candidate_len > self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp()
        }
    }

    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.candidate_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..self.max_n() {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            let p = match smoothing {
                Smoothing::AddOne if n > 0 => (m + 1.0) / (t + 1.0),
                _ => {
                    if m == 0.0 {
                        return 0.0;
                    }
                    m / t
                }
            };
            log_sum += p.ln();
        }
        self.brevity_penalty() * (log_sum / self.max_n() as f64).exp()
    }
}

/// Corpus BLEU of `candidates` against one reference each.
pub fn bleu<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>], cfg: &BleuConfig) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Input("BLEU needs at least one candidate".into()));
    }
    if cfg.max_n == 0 {
        return Err(Error::Config("BLEU max_n must be positive".into()));
    }
    let mut stats = BleuStats::new(cfg.max_n);
    for (c, r) in candidates.iter().zip(references) {
        stats.add(c, r);
    }
    Ok(stats.score(cfg.smoothing))
}
