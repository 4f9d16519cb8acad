use std::io::Write;

use serde::{Deserialize, Serialize};

use super::beam::{beam_search, BeamConfig};
use crate::error::{Error, Result};
use crate::eval::{BleuConfig, BleuStats};
use crate::model::{strip_eos, DialoguePair, Seq2SeqModel, SpeakerId, VocabId};

/// Weights of the inverse-model term and the length bonus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankWeights {
    pub lambda: f64,
    pub gamma: f64,
}

/// `fwd_logp + λ·inv_logp + γ·length`.
pub fn rerank_score(fwd_logp: f64, inv_logp: f64, length: usize, w: RerankWeights) -> f64 {
    fwd_logp + w.lambda * inv_logp + w.gamma * length as f64
}

/// ln p(question | response) under a persona-free inverse model. The
/// response is used as the source (EOS appended if missing) and the
/// question plus EOS as the target.
pub fn score_inverse(inverse: &Seq2SeqModel, question: &[VocabId], response: &[VocabId]) -> Result<f64> {
    if inverse.config().persona_enabled {
        return Err(Error::Config("the inverse model must not use persona embeddings".into()));
    }
    let mut source = response.to_vec();
    if source.last() != Some(&VocabId::EOS) {
        source.push(VocabId::EOS);
    }
    let mut target = question.to_vec();
    target.push(VocabId::EOS);
    let pair = DialoguePair::new(source, target, SpeakerId(0))?;
    let (nll, _) = inverse.forward_loss(&pair, false, 0)?;
    Ok(-nll)
}

/// One hypothesis of an N-best list, with both model scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub tokens: Vec<VocabId>,
    pub fwd_logp: f64,
    pub inv_logp: f64,
}

impl NBestEntry {
    pub fn length(&self) -> usize {
        self.tokens.len()
    }

    pub fn score(&self, w: RerankWeights) -> f64 {
        rerank_score(self.fwd_logp, self.inv_logp, self.length(), w)
    }

    /// Tokens with the terminating EOS removed.
    pub fn words(&self) -> &[VocabId] {
        strip_eos(&self.tokens)
    }
}

/// Beam search followed by inverse-model scoring. Without an inverse
/// model every `inv_logp` is 0.
pub fn nbest(
    model: &Seq2SeqModel,
    inverse: Option<&Seq2SeqModel>,
    question: &[VocabId],
    speaker: SpeakerId,
    beam: BeamConfig,
) -> Result<Vec<NBestEntry>> {
    beam_search(model, question, speaker, beam)?
        .into_iter()
        .map(|h| {
            let inv_logp = match inverse {
                Some(inv) => score_inverse(inv, question, &h.tokens)?,
                None => 0.0,
            };
            Ok(NBestEntry {
                tokens: h.tokens,
                fwd_logp: h.logp,
                inv_logp,
            })
        })
        .collect()
}

/// Indices of `entries` ordered by reranked score, best first. Ties keep
/// the original (beam) order.
pub fn rerank_order(entries: &[NBestEntry], w: RerankWeights) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    idx.sort_by(|&a, &b| {
        entries[b]
            .score(w)
            .partial_cmp(&entries[a].score(w))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

pub fn rerank_best(entries: &[NBestEntry], w: RerankWeights) -> Option<&NBestEntry> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        let s = e.score(w);
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| &entries[i])
}

/// One line of the N-best dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub question_id: usize,
    pub rank: usize,
    pub tokens: Vec<VocabId>,
    pub fwd_logp: f64,
    pub inv_logp: f64,
    pub length: usize,
}

/// Writes N-best lists as line-delimited JSON, one record per hypothesis,
/// in beam order.
pub fn write_nbest_jsonl<W: Write>(mut out: W, lists: &[(usize, Vec<NBestEntry>)]) -> Result<()> {
    for (qid, entries) in lists {
        for (rank, e) in entries.iter().enumerate() {
            let rec = NBestRecord {
                question_id: *qid,
                rank,
                tokens: e.tokens.clone(),
                fwd_logp: e.fwd_logp,
                inv_logp: e.inv_logp,
                length: e.length(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Candidate values for grid-search tuning of the reranker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankGrid {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Default for RerankGrid {
    /// λ ∈ [0, 1] and γ ∈ [-0.5, 0.5], both in steps of 0.05.
    fn default() -> Self {
        RerankGrid {
            lambdas: (0..=20).map(|k| k as f64 / 20.0).collect(),
            gammas: (-10..=10).map(|k| k as f64 / 20.0).collect(),
        }
    }
}

impl RerankGrid {
    pub fn single(w: RerankWeights) -> Self {
        RerankGrid {
            lambdas: vec![w.lambda],
            gammas: vec![w.gamma],
        }
    }

    fn sorted(values: &[f64], what: &str) -> Result<Vec<f64>> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("rerank grid {what} must be nonempty and finite")));
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        Ok(v)
    }
}

/// A dev question with its N-best list and reference response words.
#[derive(Clone, Debug)]
pub struct DevInstance {
    pub nbest: Vec<NBestEntry>,
    pub reference: Vec<VocabId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MertOutcome {
    pub weights: RerankWeights,
    pub bleu: f64,
    /// Dev BLEU of the un-reranked (λ = γ = 0) choice.
    pub baseline_bleu: f64,
}

/// Corpus BLEU of the reranked top choice of every instance.
pub fn reranked_bleu(dev: &[DevInstance], w: RerankWeights, bleu: &BleuConfig) -> Result<f64> {
    let mut stats = BleuStats::new(bleu.max_n);
    for inst in dev {
        let best = rerank_best(&inst.nbest, w).ok_or_else(|| Error::Input("empty N-best list".into()))?;
        stats.add(best.words(), &inst.reference);
    }
    Ok(stats.score(bleu.smoothing))
}

/// Grid search for the weights maximising dev-set corpus BLEU. Ties go to
/// the lexicographically smallest `(λ, γ)`.
pub fn mert_tune(dev: &[DevInstance], grid: &RerankGrid, bleu: &BleuConfig) -> Result<MertOutcome> {
    if dev.is_empty() {
        return Err(Error::Input("MERT needs a nonempty dev set".into()));
    }
    let lambdas = RerankGrid::sorted(&grid.lambdas, "lambdas")?;
    let gammas = RerankGrid::sorted(&grid.gammas, "gammas")?;
    let mut best: Option<(RerankWeights, f64)> = None;
    for &lambda in &lambdas {
        for &gamma in &gammas {
            let w = RerankWeights { lambda, gamma };
            let score = reranked_bleu(dev, w, bleu)?;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((w, score));
            }
        }
    }
    let (weights, score) = best.expect("grid is nonempty");
    Ok(MertOutcome {
        weights,
        bleu: score,
        baseline_bleu: reranked_bleu(dev, RerankWeights::default(), bleu)?,
    })
}

/// Builds N-best lists for `dev_pairs` and tunes the reranker on them.
pub fn mert_tune_models(
    dev_pairs: &[DialoguePair],
    model: &Seq2SeqModel,
    inverse: Option<&Seq2SeqModel>,
    beam: BeamConfig,
    grid: &RerankGrid,
    bleu: &BleuConfig,
) -> Result<MertOutcome> {
    use rayon::prelude::*;
    let dev: Vec<DevInstance> = dev_pairs
        .par_iter()
        .map(|p| {
            Ok(DevInstance {
                nbest: nbest(model, inverse, &p.question, p.speaker, beam)?,
                reference: p.response_words().to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    mert_tune(&dev, grid, bleu)
}
