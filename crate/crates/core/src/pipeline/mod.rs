//! Experiment plumbing: configs, synthetic data, training, and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiments;
pub mod generate;
pub mod ledger;
pub mod train;

pub use config::{DatasetKind, QuantizerKind, RunConfig};
pub use data::{build_dataset, Dataset, Split};
pub use ledger::ExperimentLedger;
pub use train::{evaluate, evaluate_full, train_tokenizer, Evaluation, Tokenizer, TrainOutcome};
