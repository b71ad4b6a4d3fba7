//! Training, decoding, evaluation, hyperparameter search and synthetic data.

mod eval;
mod generate;
pub mod metrics;
mod search;
pub mod synth;
mod train;

pub use eval::{detokenize, evaluate, DevMetric, EvalOptions, EvalRecord, EvalReport};
pub use generate::{argmax, generate, output_modality, GenerateOptions, Generation};
pub use metrics::{bleu4, cer, wer, BleuOptions, BleuScore, BleuStats};
pub use search::{lambda_search, SearchReport, SearchSpec, TrialRow, BASELINE_EQUAL, BASELINE_MASKED};
pub use train::{
    load_data, read_log, train, train_on, write_jsonl, EpochRecord, LogRecord, MixEntry, MixSampler,
    MixSource, ModalityLosses, TrainConfig, TrainOutcome,
};
