//! Training, evaluation and visualization for the two-stream detector.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod metrics;
pub mod samples;
pub mod train;

pub use config::{TrainConfig, TrainMethod};
pub use error::{Result, TrainError};
pub use eval::{cross_eval, evaluate, Checkpoint, EvalReport, RunMeta, Splits};
pub use gradcam::{gradcam, Heatmap};
pub use metrics::{accuracy, auc};
pub use train::{train, train_on, EpochLog, TrainOutcome};
