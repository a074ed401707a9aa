//! Training, inference, evaluation and gradient checks over page datasets.

mod config;
mod dataset;
mod eval;
mod gradcheck;
mod segment;
mod train;

pub use config::{OptimizerConfig, TrainConfig};
pub use dataset::{map_sentences, Batch, Dataset, Sample};
pub use eval::{evaluate, EvalOptions, EvalReport, NonTextIou};
pub use gradcheck::{loss_suite, model_check, run_gradcheck, tiny_model, CheckLine, GradcheckReport, ModelCheck, MAX_SKIPPED, MODEL_TOLERANCE};
pub use segment::{
    check_distinct, load_model, load_probabilities, save_probabilities, segment_dataset, SegmentOptions, Segmentation,
    Segmenter,
};
pub use train::{
    accuracy, batch_indices, dataset_confusion, read_metrics, schedule, BatchKind, RunManifest, StepRecord, Trainer, LATEST, MANIFEST,
    METRICS,
};
