//! Corpora, synthetic tasks, training loops, decoding, distillation and
//! evaluation.

mod data;
mod decode;
mod metrics;
mod train;

pub use data::{
    build_length_table, gen_synthetic_task, load_parallel_corpus, ParallelCorpus, TaskKind, Vocab,
    ECHO_PROBABILITY,
};
pub use decode::{
    decode, decode_corpus, dedup_consecutive, distill_corpus, evaluate, mean_gleu, strip_markers, DecodeConfig,
    DecodeMode, DistillReport, EvalReport, LengthBucket, SentenceEval, BUCKET_WIDTH,
};
pub use metrics::{fmt_sig, read_metrics, MetricRow, MetricsLog, METRICS_HEADER};
pub use train::{ce_loss, corpus_nll, finetune_rl, train_ce, training_target, Adam, TrainConfig, TrainSummary};
