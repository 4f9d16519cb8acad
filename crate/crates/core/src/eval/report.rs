use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bleu::{BleuConfig, BleuStats};
use crate::decoding::{nbest, rerank_best, BeamConfig, RerankWeights};
use crate::error::{Error, Result};
use crate::model::{DialoguePair, Seq2SeqModel, SpeakerId, VocabId};

/// exp(total NLL / total predicted tokens), evaluation mode.
pub fn perplexity(model: &Seq2SeqModel, pairs: &[DialoguePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("perplexity needs at least one pair".into()));
    }
    let per_pair: Vec<(f64, usize)> = pairs
        .par_iter()
        .map(|p| Ok((model.forward_loss(p, false, 0)?.0, p.response.len())))
        .collect::<Result<_>>()?;
    let (nll, tokens) = per_pair
        .iter()
        .fold((0.0, 0usize), |(n, t), &(pn, pt)| (n + pn, t + pt));
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub bleu: f64,
    pub perplexity: f64,
    pub n_examples: usize,
    pub bleu_stats: BleuStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub perplexity: f64,
    pub n_examples: usize,
    pub bleu_stats: BleuStats,
    pub per_speaker: BTreeMap<SpeakerId, SpeakerScore>,
}

/// Output of [`evaluate`]: the report plus the chosen response per pair.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outputs: Vec<Vec<VocabId>>,
}

/// Generates a response for every pair (beam search, then reranking),
/// scores corpus BLEU against the references and teacher-forced perplexity,
/// both overall and per speaker.
pub fn evaluate(
    model: &Seq2SeqModel,
    inverse: Option<&Seq2SeqModel>,
    pairs: &[DialoguePair],
    weights: RerankWeights,
    beam: BeamConfig,
    bleu: &BleuConfig,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Input("evaluation needs at least one pair".into()));
    }
    let outputs: Vec<(Vec<VocabId>, f64)> = pairs
        .par_iter()
        .map(|p| {
            let list = nbest(model, inverse, &p.question, p.speaker, beam)?;
            let best = rerank_best(&list, weights).ok_or_else(|| Error::Internal("empty beam".into()))?;
            let nll = model.forward_loss(p, false, 0)?.0;
            Ok((best.words().to_vec(), nll))
        })
        .collect::<Result<_>>()?;

    let mut total = BleuStats::new(bleu.max_n);
    let mut per: BTreeMap<SpeakerId, (BleuStats, f64, usize, usize)> = BTreeMap::new();
    let (mut nll_sum, mut tok_sum) = (0.0, 0usize);
    for (p, (words, nll)) in pairs.iter().zip(&outputs) {
        total.add(words, p.response_words());
        nll_sum += nll;
        tok_sum += p.response.len();
        let e = per
            .entry(p.speaker)
            .or_insert_with(|| (BleuStats::new(bleu.max_n), 0.0, 0, 0));
        e.0.add(words, p.response_words());
        e.1 += nll;
        e.2 += p.response.len();
        e.3 += 1;
    }
    let per_speaker = per
        .into_iter()
        .map(|(s, (stats, nll, toks, n))| {
            (
                s,
                SpeakerScore {
                    bleu: stats.score(bleu.smoothing),
                    perplexity: (nll / toks as f64).exp(),
                    n_examples: n,
                    bleu_stats: stats,
                },
            )
        })
        .collect();
    let report = EvalReport {
        bleu: total.score(bleu.smoothing),
        perplexity: (nll_sum / tok_sum as f64).exp(),
        n_examples: pairs.len(),
        bleu_stats: total,
        per_speaker,
    };
    Ok(Evaluation {
        report,
        outputs: outputs.into_iter().map(|(w, _)| w).collect(),
    })
}

impl EvalReport {
    /// CSV with a header, one corpus row, then one row per speaker.
    /// `speaker_name` maps ids to display names.
    pub fn to_csv(&self, label: &str, dataset: &str, speaker_name: impl Fn(SpeakerId) -> String) -> String {
        let mut out = String::from("model,dataset,speaker,bleu,perplexity,n_examples\n");
        let _ = writeln!(out, "{label},{dataset},ALL,{:.6},{:.6},{}", self.bleu, self.perplexity, self.n_examples);
        for (s, sc) in &self.per_speaker {
            let _ = writeln!(
                out,
                "{label},{dataset},{},{:.6},{:.6},{}",
                speaker_name(*s),
                sc.bleu,
                sc.perplexity,
                sc.n_examples
            );
        }
        out
    }
}
