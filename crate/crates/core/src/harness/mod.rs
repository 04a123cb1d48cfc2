//! Training, evaluation, ablation and visualization on top of the model and
//! data modules.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradsuite;
pub mod train;
pub mod visualize;

pub use ablate::{ablate, run_protocol, AblationTable, ProtocolOutcome, SweepParam};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use evaluate::{evaluate, predict, MetricReport, ModelPredictor, Prediction, QualityPredictor};
pub use train::{train, TrainOutcome};
pub use visualize::{visualize, PatchMaps};
