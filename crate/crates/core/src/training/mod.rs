//! Masked-language-model pretraining: corpus ingestion, full-sentences
//! packing, masking, Adam and the training loop.

pub mod corpus;
pub mod masking;
pub mod optim;
pub mod packing;
pub mod synthetic;
pub mod train;
pub mod vocab;

pub use corpus::Corpus;
pub use masking::{MaskStats, MaskingPolicy};
pub use optim::{AdamState, LrSchedule};
pub use packing::{pack_sequences, Packed, PackedBatch, PackedRow};
pub use train::{
    clip_gradients, evaluate_mlm, train, worker_pool, MetricsWriter, PretrainData, StepRecord, TrainConfig,
    TrainReport, TrainStatus, CONVERGENCE_WINDOW, METRICS_HEADER,
};
pub use vocab::{tokenize, Vocab, CLS, MASK, PAD, SPECIAL_TOKENS, UNK};
pub use synthetic::{walk_corpus, WalkCorpusSpec};
