//! Experiment drivers: sweeps, uneven mixtures, checkpoint transfer, retrieval transfer,
//! feature learning, plus metric files and plots.

pub mod cache;
pub mod config;
pub mod featurelearn;
pub mod io;
pub mod plot;
pub mod sweep;
pub mod transfer;

pub use cache::{RunCache, RunInit, RunSummary};
pub use config::{
    feature_grid, Experiment, ExperimentConfig, FeatureCell, FeatureLearningConfig, RetrievalTransferConfig,
    SingleRunConfig, SweepConfig, TrainTemplate, TransferConfig, UnevenConfig, SWEEP_TASKS,
};
pub use featurelearn::{run_feature_learning, FeatureRow};
pub use io::{write_metrics, EscapeRow};
pub use plot::{emit_plot, render_svg, PlotMetric, PlotOptions};
pub use sweep::{aggregate, run_sweep, run_uneven, subsets, AggregateRow, SweepResult, SweepRow, UnevenRow};
pub use transfer::{run_retrieval_transfer, run_transfer, RetrievalRow, TransferCell};
