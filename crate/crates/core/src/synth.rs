//! Synthetic archives with known generating parameters.
//!
//! A predictable signal (seasonal climatology plus a stationary anomaly
//! field) is tracked by every ensemble member, which adds a bias and
//! independent per-member noise. Observations add to the signal a forecast
//! error drawn from the error covariance recipe and a little measurement
//! noise, so the error is independent of the forecast.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geostat::cholesky_with_jitter;
use crate::grid::Grid;
use crate::io::{FieldArchive, OBSERVATION_FLOOR};
use crate::real::Real;
use crate::rng::{substream, StreamRng};

/// Covariance of the forecast error: the part of the observation that the
/// ensemble does not track, so it is independent of the forecast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceRecipe {
    /// `sd² exp(−d / range)`.
    Exponential { sd: f64, range_km: f64 },
    /// Exponential background plus a latent factor loading `+1` on `block_a`
    /// and `−1` on `block_b` (sea indices), which anti-correlates the blocks.
    NegativeBlock {
        sd: f64,
        range_km: f64,
        block_a: Vec<usize>,
        block_b: Vec<usize>,
        factor_sd: f64,
    },
}

impl CovarianceRecipe {
    pub fn covariance(&self, distances: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let s = distances.nrows();
        let exp_part = |sd: f64, range: f64| -> Result<DMatrix<f64>> {
            if sd < 0.0 || !(range > 0.0) {
                return Err(Error::invalid(
                    "covariance recipe needs sd >= 0 and range > 0",
                ));
            }
            Ok(distances.map(|d| sd * sd * (-d / range).exp()))
        };
        match self {
            CovarianceRecipe::Exponential { sd, range_km } => exp_part(*sd, *range_km),
            CovarianceRecipe::NegativeBlock {
                sd,
                range_km,
                block_a,
                block_b,
                factor_sd,
            } => {
                let mut cov = exp_part(*sd, *range_km)?;
                let mut load = vec![0.0; s];
                for &i in block_a {
                    *load
                        .get_mut(i)
                        .ok_or_else(|| Error::invalid(format!("block cell {i} out of range")))? =
                        1.0;
                }
                for &i in block_b {
                    let slot = load
                        .get_mut(i)
                        .ok_or_else(|| Error::invalid(format!("block cell {i} out of range")))?;
                    if *slot != 0.0 {
                        return Err(Error::invalid(format!("cell {i} is in both blocks")));
                    }
                    *slot = -1.0;
                }
                let f2 = factor_sd * factor_sd;
                for j in 0..s {
                    for i in 0..s {
                        cov[(i, j)] += f2 * load[i] * load[j];
                    }
                }
                Ok(cov)
            }
        }
    }
}

/// Additive forecast bias
/// `constant + trend·(year − first) + seasonal·cos(2π(m−1)/12 + ψ_s) + location·ℓ_s`,
/// with per-cell phase `ψ_s` and pattern `ℓ_s ∈ [−1, 1]` drawn from the seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasRecipe {
    pub constant: f64,
    pub trend_per_year: f64,
    pub seasonal_amplitude: f64,
    pub location_amplitude: f64,
}

impl BiasRecipe {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            ..Self::default()
        }
    }

    pub fn linear_trend(constant: f64, per_year: f64) -> Self {
        Self {
            constant,
            trend_per_year: per_year,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_lon: usize,
    pub n_lat: usize,
    pub lon_start: f64,
    pub lat_start: f64,
    pub spacing_deg: f64,
    pub first_year: i32,
    pub years: usize,
    pub months: Vec<u32>,
    pub members: usize,
    pub error_covariance: CovarianceRecipe,
    pub bias: BiasRecipe,
    /// Standard deviation of the predictable anomaly field that members track.
    pub truth_sd: f64,
    pub truth_range_km: f64,
    /// Independent per-member spread.
    pub member_sd: f64,
    /// Independent observation noise.
    pub obs_noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_lon: 10,
            n_lat: 10,
            lon_start: -40.0,
            lat_start: 30.0,
            spacing_deg: 2.0,
            first_year: 1985,
            years: 30,
            months: (1..=12).collect(),
            members: 9,
            error_covariance: CovarianceRecipe::Exponential {
                sd: 0.5,
                range_km: 800.0,
            },
            bias: BiasRecipe {
                constant: 0.3,
                trend_per_year: 0.03,
                seasonal_amplitude: 0.4,
                location_amplitude: 0.8,
            },
            truth_sd: 1.0,
            truth_range_km: 1500.0,
            member_sd: 0.3,
            obs_noise_sd: 0.05,
            seed: 11,
        }
    }
}

/// Generating parameters kept for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub error_covariance: DMatrix<f64>,
    pub bias_phase: Vec<f64>,
    pub bias_pattern: Vec<f64>,
    pub bias: BiasRecipe,
    pub first_year: i32,
}

impl SynthTruth {
    pub fn bias(&self, year: i32, month: u32, cell: usize) -> f64 {
        let r = &self.bias;
        let season = 2.0 * std::f64::consts::PI * (month as f64 - 1.0) / 12.0;
        r.constant
            + r.trend_per_year * (year - self.first_year) as f64
            + r.seasonal_amplitude * (season + self.bias_phase[cell]).cos()
            + r.location_amplitude * self.bias_pattern[cell]
    }
}

#[derive(Clone, Debug)]
pub struct SynthArchive<T> {
    pub archive: FieldArchive<T>,
    pub truth: SynthTruth,
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_field(chol: &Option<DMatrix<f64>>, s: usize, rng: &mut StreamRng) -> DVector<f64> {
    match chol {
        Some(l) => {
            let z = DVector::from_fn(s, |_, _| normal(rng));
            l * z
        }
        None => DVector::zeros(s),
    }
}

fn factor(cov: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if cov.amax() == 0.0 {
        return Ok(None);
    }
    cholesky_with_jitter(cov).map(Some)
}

impl SynthSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::regular(
            self.lon_start,
            self.spacing_deg,
            self.n_lon,
            self.lat_start,
            self.spacing_deg,
            self.n_lat,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lon == 0 || self.n_lat == 0 || self.years == 0 || self.months.is_empty() {
            return Err(Error::invalid("synthetic spec sizes must be positive"));
        }
        if self.members < 2 {
            return Err(Error::invalid(
                "synthetic ensembles need at least two members",
            ));
        }
        if self.truth_sd < 0.0 || self.member_sd < 0.0 || self.obs_noise_sd < 0.0 {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if !(self.truth_range_km > 0.0) {
            return Err(Error::invalid("truth_range_km must be positive"));
        }
        Ok(())
    }
}

/// Generates an archive; deterministic given `spec.seed`.
pub fn generate<T: Real>(spec: &SynthSpec) -> Result<SynthArchive<T>> {
    spec.validate()?;
    let grid = spec.grid()?;
    let s = grid.sea_count();
    let dist: DMatrix<f64> = grid.sea_distances();
    let err_cov = spec.error_covariance.covariance(&dist)?;
    let err_chol = factor(&err_cov)?;
    let truth_cov = dist.map(|d| spec.truth_sd * spec.truth_sd * (-d / spec.truth_range_km).exp());
    let truth_chol = factor(&truth_cov)?;

    let mut fixed = substream(spec.seed, u64::MAX);
    let bias_phase: Vec<f64> = (0..s)
        .map(|_| fixed.random::<f64>() * 2.0 * std::f64::consts::PI)
        .collect();
    let bias_pattern: Vec<f64> = (0..s).map(|_| fixed.random::<f64>() * 2.0 - 1.0).collect();
    let truth = SynthTruth {
        error_covariance: err_cov,
        bias_phase,
        bias_pattern,
        bias: spec.bias.clone(),
        first_year: spec.first_year,
    };

    let mut months = spec.months.clone();
    months.sort_unstable();
    months.dedup();
    let n = spec.members;
    let mut observations = Vec::new();
    let mut forecasts = Vec::new();
    for (yi, year) in (spec.first_year..).take(spec.years).enumerate() {
        for (mi, &month) in months.iter().enumerate() {
            let mut rng = substream(spec.seed, (yi * months.len() + mi) as u64);
            let anomaly = gaussian_field(&truth_chol, s, &mut rng);
            let error = gaussian_field(&err_chol, s, &mut rng);
            let season = 2.0 * std::f64::consts::PI * (month as f64 - 1.0) / 12.0;
            let mut signal = vec![0.0; s];
            let mut obs = Vec::with_capacity(s);
            for c in 0..s {
                let (_, lat) = grid.coords(c).expect("sea index");
                let clim = 12.0 + 10.0 * lat.to_radians().cos() + 3.0 * season.cos();
                signal[c] = clim + anomaly[c];
                let noise: f64 = if spec.obs_noise_sd > 0.0 {
                    spec.obs_noise_sd * normal(&mut rng)
                } else {
                    0.0
                };
                obs.push(T::lit(
                    (signal[c] + error[c] + noise).max(OBSERVATION_FLOOR),
                ));
            }
            let mut fc = Vec::with_capacity(n * s);
            for _ in 0..n {
                for c in 0..s {
                    let spread: f64 = if spec.member_sd > 0.0 {
                        spec.member_sd * normal(&mut rng)
                    } else {
                        0.0
                    };
                    fc.push(T::lit(signal[c] + truth.bias(year, month, c) + spread));
                }
            }
            observations.push(obs);
            forecasts.push(fc);
        }
    }
    let archive = FieldArchive::new(grid, spec.first_year, months, n, observations, forecasts)?;
    Ok(SynthArchive { archive, truth })
}
