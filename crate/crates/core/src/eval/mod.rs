//! Retrieval and commenting metrics plus report emission.

mod metrics;
mod report;

pub use metrics::{
    bleu, exact_match, recall_at_k, rouge_n, rouge_n_pair, token_f1, token_f1_pair, CommentPair, RetrievalResult,
    BLEU_EPSILON,
};
pub use report::{
    commenting_row, emit_report, read_report, CommentingRow, OrderingFlag, Report, RetrievalRow, COMMENTING_MODES,
    REPORT_JSONL, REPORT_TXT, RETRIEVAL_MODES,
};
