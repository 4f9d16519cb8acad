//! BLEU, perplexity and the generate-then-score evaluation driver.

mod bleu;
mod report;

pub use bleu::{bleu, BleuConfig, BleuStats, Smoothing};
pub use report::{evaluate, perplexity, EvalReport, Evaluation, SpeakerScore};
