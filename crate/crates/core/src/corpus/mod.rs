//! Corpus ingestion: movie-dialog and script parsers, tokenization,
//! vocabulary construction, pair extraction and seeded splits.

mod pairs;
mod parse;
mod text;
mod vocab;

pub use pairs::{
    encode_pairs, make_pairs, read_pairs_jsonl, speaker_ids, split_pairs, write_pairs_jsonl, Split, SplitSpec, TextPair,
};
pub use parse::{normalize_speaker, parse_cornell, parse_cornell_str, parse_tv_script, parse_tv_script_str, Parsed, Utterance};
pub use text::{detokenize, tokenize};
pub use vocab::{build_vocab, Vocab, RESERVED_TOKENS};
