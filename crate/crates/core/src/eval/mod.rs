//! Retrieval ranking, rerank, Recall@K, caption metrics, decoding and ablations.

mod ablation;
mod decode;
mod model_eval;
mod retrieval;

pub use ablation::{ablation_csv, run_ablation, train_and_score, AblationAxis, AblationCell, AblationGrid, AblationRow};
pub use decode::{beam_decode, exhaustive_decode, greedy_decode, log_softmax, sequence_log_prob, Decoded, Scorer};
pub use model_eval::{
    embed_examples, eval_examples, eval_masks, evaluate, evaluate_retrieval, masked_caption_accuracy, match_scores, mean_r1,
    oracle_retrieval, DecodeSample, Embeddings, EvalReport, MaskedAccuracy, ModelScorer,
};
pub use retrieval::{
    rank_of, rank_scores, recall_at, rerank_top_k, retrieval_rank, retrieval_report, Direction, Recall, RetrievalReport,
};
