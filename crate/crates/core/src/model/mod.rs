//! Persona-conditioned LSTM sequence-to-sequence model.
//!
//! The encoder is a stack of standard LSTM cells over the question. The
//! decoder is a stack of the same depth, initialised from the encoder's
//! final state; its first layer additionally receives the speaker's persona
//! vector at every target step. All tensors are FEDERATED except the
//! persona table, which is PRIVATE.

mod cell;
mod seq2seq;
mod train;
mod types;

pub use cell::{lstm_cell_persona, lstm_cell_standard};
pub use seq2seq::{
    dec_b, dec_w, enc_b, enc_w, log_softmax, param_schema, ForwardCache, LayerState, LstmState, Seq2SeqModel,
    DEC_PERSONA_W, EMBED, PERSONA, PERSONA_INIT_STD, PROJ_B, PROJ_W,
};
pub use train::{total_nll, train_epoch, Proximal, TrainOptions};
pub use types::{strip_eos, DialoguePair, ModelConfig, SpeakerId, VocabId};
