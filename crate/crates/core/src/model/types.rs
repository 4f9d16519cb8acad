use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the vocabulary. Ids 0..4 are reserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VocabId(pub u32);

impl VocabId {
    pub const PAD: VocabId = VocabId(0);
    pub const BOS: VocabId = VocabId(1);
    pub const EOS: VocabId = VocabId(2);
    pub const UNK: VocabId = VocabId(3);
    pub const NUM_RESERVED: usize = 4;

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Row of the persona table; one per simulated client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeakerId(pub u32);

impl SpeakerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A question and the response of `speaker` to it. The response always
/// ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub question: Vec<VocabId>,
    pub response: Vec<VocabId>,
    pub speaker: SpeakerId,
}

impl DialoguePair {
    pub fn new(question: Vec<VocabId>, response: Vec<VocabId>, speaker: SpeakerId) -> Result<Self> {
        if question.is_empty() {
            return Err(Error::Input("empty question".into()));
        }
        if response.last() != Some(&VocabId::EOS) {
            return Err(Error::Input("response must end with EOS".into()));
        }
        Ok(DialoguePair {
            question,
            response,
            speaker,
        })
    }

    /// The pair as seen by the inverse (response → question) model: the
    /// response, EOS included, becomes the source and the question plus
    /// EOS becomes the target.
    pub fn swapped(&self) -> DialoguePair {
        let mut target = self.question.clone();
        target.push(VocabId::EOS);
        DialoguePair {
            question: self.response.clone(),
            response: target,
            speaker: self.speaker,
        }
    }

    /// Response tokens without the trailing EOS.
    pub fn response_words(&self) -> &[VocabId] {
        strip_eos(&self.response)
    }
}

pub fn strip_eos(tokens: &[VocabId]) -> &[VocabId] {
    match tokens.last() {
        Some(&VocabId::EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Total vocabulary size, reserved ids included.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub persona_dim: usize,
    pub num_layers: usize,
    /// Rows of the persona table.
    pub num_speakers: usize,
    pub persona_enabled: bool,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 30_000 + VocabId::NUM_RESERVED,
            embed_dim: 100,
            hidden_size: 100,
            persona_dim: 128,
            num_layers: 4,
            num_speakers: 1,
            persona_enabled: false,
            max_len: 20,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= VocabId::NUM_RESERVED {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        if self.persona_enabled && (self.persona_dim == 0 || self.num_speakers == 0) {
            return Err(Error::Config(
                "persona_dim and num_speakers must be positive when persona is enabled".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Input width of decoder layer `layer`, excluding the persona block.
    pub(crate) fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_size
        }
    }
}
