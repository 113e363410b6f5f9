//! Statistical postprocessing of gridded ensemble forecasts.
//!
//! Marginal bias and variance correction by weighted moving averages or
//! non-homogeneous Gaussian regression, a tapered and PCA-truncated spatial
//! covariance for the standardized residuals, sampling of multivariate
//! forecast fields, copula and geostatistical reference methods, and the
//! scoring and calibration diagnostics used to compare them.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar for the common case.

pub mod copula;
pub mod covmodel;
pub mod error;
pub mod geostat;
pub mod grid;
pub mod io;
pub mod marginal;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use grid::Grid;
pub use real::Real;

pub type FieldArchiveF64 = io::FieldArchive<f64>;
pub type FieldArchiveF32 = io::FieldArchive<f32>;
pub type MarginalModelF64 = marginal::MarginalModel<f64>;
pub type MarginalModelF32 = marginal::MarginalModel<f32>;
pub type TaperedPcaModelF64 = covmodel::TaperedPcaModel<f64>;
pub type TaperedPcaModelF32 = covmodel::TaperedPcaModel<f32>;
pub type ExpNuggetModelF64 = geostat::ExpNuggetModel<f64>;
pub type ExpNuggetModelF32 = geostat::ExpNuggetModel<f32>;
pub type ForecastSampleF64 = sampler::ForecastSample<f64>;
pub type ForecastSampleF32 = sampler::ForecastSample<f32>;
pub type ResidualPanelF64 = covmodel::ResidualPanel<f64>;
pub type ResidualPanelF32 = covmodel::ResidualPanel<f32>;
