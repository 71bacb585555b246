//! End-to-end driver: datasets, the tracking/mapping loop, metrics and file formats.

pub mod config;
pub mod dataset;
pub mod io;
pub mod metrics;
pub mod run;
pub mod synthetic;

pub use config::{DatasetKind, PipelineConfig, ThreadMode};
pub use dataset::{load_dataset, load_tum_rgbd, Sequence};
pub use metrics::{ate_rmse, psnr, Stamped};
pub use run::{render_maps, run_sequence, run_slam, write_artifacts, EvalReport, RunOutput};
pub use synthetic::{generate_synthetic_sequence, SceneSpec, SyntheticScene, SyntheticSequence};
