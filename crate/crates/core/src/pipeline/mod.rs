//! Two-stage training orchestration, synthetic data and run artifacts.

mod dataset;
mod sampling;
mod train;

pub use dataset::{synth_dataset, Dataset, Split, Subset, SynthConfig};
pub use sampling::{part_erasing, sample_pk_batch};
pub use train::{
    adapt_target, adapt_target_observed, diagnose, pretrain_source, retrieval_split, run_eval, run_uda, AdaptEvent, EpochRecord,
    MetricsReport, PretrainReport, TrainConfig,
};
