//! Optimizer, training loop, evaluation and rank sweeps.

mod eval;
mod optim;
mod run;
mod sweep;

pub use eval::{evaluate, evaluate_masks, predict_masks, EvalReport, SampleMetrics, Summary};
pub use optim::AdamW;
pub use run::{collate, train, train_model, EpochRecord, History, TrainOutcome};
pub use sweep::{rank_sweep, sweep_csv, SweepRow};
