//! Response generation: beam search, N-best reranking with an inverse
//! model and a length bonus, and grid tuning of the reranker weights.

mod beam;
mod rerank;

pub use beam::{beam_search, is_generable, BeamConfig, Hypothesis};
pub use rerank::{
    mert_tune, mert_tune_models, nbest, rerank_best, rerank_order, rerank_score, reranked_bleu, score_inverse,
    write_nbest_jsonl, DevInstance, MertOutcome, NBestEntry, NBestRecord, RerankGrid, RerankWeights,
};
