use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{LstmState, Seq2SeqModel, SpeakerId, VocabId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 200,
            max_len: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<VocabId>,
    /// Cumulative ln p(tokens | question, speaker); never positive.
    pub logp: f64,
    /// Decoder state ready to consume the last token of `tokens`.
    pub state: LstmState,
    pub finished: bool,
}

/// Tokens the decoder may emit. PAD and BOS are never generated.
pub fn is_generable(t: VocabId) -> bool {
    t != VocabId::PAD && t != VocabId::BOS
}

fn by_score_desc(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logp
        .partial_cmp(&a.logp)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search on raw cumulative log-probability (no length normalisation).
///
/// Each step expands every live hypothesis over all generable tokens and
/// keeps the best `beam_size` candidates. Candidates ending in EOS, or
/// reaching `max_len`, retire into the result pool. The search stops once
/// no live hypothesis can still enter the top `beam_size` finished ones.
/// Returns up to `beam_size` hypotheses, best first, padded with the best
/// unfinished ones if too few finished.
pub fn beam_search(model: &Seq2SeqModel, question: &[VocabId], speaker: SpeakerId, cfg: BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(Error::Param("beam_size and max_len must be at least 1".into()));
    }
    let vocab: Vec<VocabId> = (0..model.config().vocab_size as u32)
        .map(VocabId)
        .filter(|&t| is_generable(t))
        .collect();

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logp: 0.0,
        state: model.encode(question)?,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut next_states = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, VocabId)> = Vec::with_capacity(live.len() * vocab.len());
        for (pi, h) in live.iter().enumerate() {
            let last = h.tokens.last().copied().unwrap_or(VocabId::BOS);
            let (state, lp) = model.decode_step(&h.state, last, speaker)?;
            for &t in &vocab {
                cands.push((h.logp + lp[t.index()], pi, t));
            }
            next_states.push(state);
        }
        // Parents are already in a deterministic order, so (score, parent, token) is a total order.
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(cfg.beam_size);

        let mut next_live = Vec::with_capacity(cands.len());
        for (logp, pi, t) in cands {
            let mut tokens = live[pi].tokens.clone();
            tokens.push(t);
            let done = t == VocabId::EOS || tokens.len() >= cfg.max_len;
            let h = Hypothesis {
                tokens,
                logp,
                state: next_states[pi].clone(),
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next_live.push(h);
            }
        }
        live = next_live;

        if finished.len() >= cfg.beam_size {
            finished.sort_by(by_score_desc);
            let kth = finished[cfg.beam_size - 1].logp;
            // Extending a hypothesis can only lower its score.
            if live.iter().all(|h| h.logp <= kth) {
                break;
            }
        }
    }

    finished.sort_by(by_score_desc);
    finished.truncate(cfg.beam_size);
    if finished.len() < cfg.beam_size {
        live.sort_by(by_score_desc);
        let missing = cfg.beam_size - finished.len();
        finished.extend(live.into_iter().take(missing));
    }
    Ok(finished)
}
