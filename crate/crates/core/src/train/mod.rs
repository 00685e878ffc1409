//! Full model, combined cost, optimiser, experiment runners and reports.

pub mod ablate;
pub mod adam;
pub mod config;
pub mod model;
pub mod plot;
pub mod report;
pub mod run;

pub use ablate::{ablate, AblationMode, AblationTable};
pub use config::{LossFlags, LossTerm, TrainConfig};
pub use model::Model;
pub use run::{
    evaluate, prepare_data, run_experiment, train_model, EpochStats, EvalResult, ExperimentResult,
    MetricsRow,
};
