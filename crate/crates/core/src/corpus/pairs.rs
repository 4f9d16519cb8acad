use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::parse::Utterance;
use super::text::tokenize;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::{DialoguePair, SpeakerId, VocabId};
use crate::rng::{derive_seed, seeded};

/// A tokenized (question, response) pair; `speaker` is the responder.
/// This is also the record format of the cached corpus.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPair {
    pub speaker: String,
    pub q_tokens: Vec<String>,
    pub r_tokens: Vec<String>,
}

/// Every adjacent pair of utterances within a conversation. With a
/// filter, only pairs whose responder is in it are kept; the questioner may
/// be anyone. Utterances that tokenize to nothing break adjacency.
pub fn make_pairs(utterances: &[Utterance], speaker_filter: Option<&BTreeSet<String>>) -> Vec<TextPair> {
    let mut out = Vec::new();
    let mut prev: Option<(&Utterance, Vec<String>)> = None;
    for u in utterances {
        let tokens = tokenize(&u.text);
        let adjacent = prev.as_ref().is_some_and(|(p, _)| {
            p.conversation_id == u.conversation_id && p.position + 1 == u.position
        });
        if tokens.is_empty() {
            prev = None;
            continue;
        }
        if adjacent && speaker_filter.is_none_or(|f| f.contains(&u.speaker_name)) {
            let (_, q) = prev.as_ref().expect("adjacent implies previous");
            out.push(TextPair {
                speaker: u.speaker_name.clone(),
                q_tokens: q.clone(),
                r_tokens: tokens.clone(),
            });
        }
        prev = Some((u, tokens));
    }
    out
}

/// Maps text pairs to id pairs. The question keeps its first `max_len`
/// tokens; the response keeps its first `max_len − 1` and gains EOS.
/// Speakers missing from `speakers` map to id 0 when `speakers` is empty
/// (persona-free use) and are an input error otherwise.
pub fn encode_pairs(
    pairs: &[TextPair],
    vocab: &Vocab,
    speakers: &BTreeMap<String, SpeakerId>,
    max_len: usize,
) -> Result<Vec<DialoguePair>> {
    if max_len < 2 {
        return Err(Error::Config("max_len must be at least 2".into()));
    }
    pairs
        .iter()
        .map(|p| {
            let speaker = match speakers.get(&p.speaker) {
                Some(&s) => s,
                None if speakers.is_empty() => SpeakerId(0),
                None => return Err(Error::Input(format!("unknown speaker {:?}", p.speaker))),
            };
            let question = vocab.encode(&p.q_tokens[..p.q_tokens.len().min(max_len)]);
            let mut response = vocab.encode(&p.r_tokens[..p.r_tokens.len().min(max_len - 1)]);
            response.push(VocabId::EOS);
            DialoguePair::new(question, response, speaker)
        })
        .collect()
}

/// Speaker names in sorted order, numbered from 0.
pub fn speaker_ids<'a>(names: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, SpeakerId> {
    let set: BTreeSet<&str> = names.into_iter().collect();
    set.into_iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), SpeakerId(i as u32)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.dev, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.dev, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
    /// Groups too small to split, sent wholly to train.
    pub small_groups: usize,
}

/// Seeded shuffle and contiguous slicing, separately within each group
/// given by `key` so every group lands in train. Groups with fewer than 3
/// items go entirely to train.
pub fn split_pairs<T: Clone, K: Ord>(items: &[T], key: impl Fn(&T) -> K, spec: &SplitSpec) -> Result<Split<T>> {
    spec.validate()?;
    if items.is_empty() {
        return Err(Error::Input("nothing to split".into()));
    }
    let mut groups: BTreeMap<K, Vec<&T>> = BTreeMap::new();
    for it in items {
        groups.entry(key(it)).or_default().push(it);
    }
    let mut out = Split {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        small_groups: 0,
    };
    for (g, mut members) in groups.into_values().enumerate() {
        let n = members.len();
        if n < 3 {
            out.small_groups += 1;
            out.train.extend(members.into_iter().cloned());
            continue;
        }
        members.shuffle(&mut seeded(derive_seed(spec.seed, &[g as u64])));
        let mut n_dev = (n as f64 * spec.dev).round() as usize;
        let mut n_test = (n as f64 * spec.test).round() as usize;
        while n_dev + n_test >= n {
            if n_dev >= n_test { n_dev -= 1 } else { n_test -= 1 }
        }
        let n_train = n - n_dev - n_test;
        out.train.extend(members[..n_train].iter().map(|&t| t.clone()));
        out.dev.extend(members[n_train..n_train + n_dev].iter().map(|&t| t.clone()));
        out.test.extend(members[n_train + n_dev..].iter().map(|&t| t.clone()));
    }
    if out.small_groups > 0 {
        log::warn!("{} speakers have fewer than 3 pairs; all their pairs go to train", out.small_groups);
    }
    Ok(out)
}

pub fn write_pairs_jsonl<W: Write>(mut out: W, pairs: &[TextPair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(input: R) -> Result<Vec<TextPair>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: TextPair = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if p.q_tokens.is_empty() || p.r_tokens.is_empty() {
            return Err(Error::Format(format!("line {}: empty question or response", i + 1)));
        }
        out.push(p);
    }
    Ok(out)
}
