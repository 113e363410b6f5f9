//! Batch driver for the tapercast pipeline: synthetic archive generation,
//! weight tuning, marginal and covariance fitting, sampling, scoring and
//! reporting. Each stage is a set of files under the run directory.

pub mod artifacts;
pub mod error;
pub mod pipeline;

pub use error::{CliError, CliResult};
pub use pipeline::{PipelineRun, Stage, StageStatus};
