//! Stationary reference model: isotropic exponential correlation with a
//! nugget, fitted to the empirical variogram of standardised residuals.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::covmodel::ResidualPanel;
use crate::error::{Error, Result};
use crate::optim::golden_section;
use crate::real::Real;
use crate::sampler::{draw_rows, ForecastSample};

pub const DEFAULT_BIN_COUNT: usize = 30;
pub const DEFAULT_DISTANCE_QUANTILE: f64 = 0.9;

/// Fitted correlation at the shortest lag below which the fit is reported as pure nugget.
const PURE_NUGGET_CORRELATION: f64 = 0.01;

/// Equal-width distance bins on `[0, max_distance]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariogramBins {
    pub count: usize,
    pub max_distance: f64,
}

impl VariogramBins {
    /// 30 bins up to the 0.9 quantile of the off-diagonal pair distances.
    pub fn from_distances<T: Real>(distances: &DMatrix<T>) -> Result<Self> {
        let n = distances.nrows();
        let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for j in 0..n {
            for i in 0..j {
                d.push(distances[(i, j)].as_f64());
            }
        }
        if d.is_empty() {
            return Err(Error::invalid("variogram needs at least two cells"));
        }
        d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let idx = ((d.len() - 1) as f64 * DEFAULT_DISTANCE_QUANTILE).round() as usize;
        Ok(Self {
            count: DEFAULT_BIN_COUNT,
            max_distance: d[idx],
        })
    }

    fn bin_of(&self, h: f64) -> Option<usize> {
        if !(h > 0.0) || h > self.max_distance {
            return None;
        }
        let width = self.max_distance / self.count as f64;
        Some(((h / width) as usize).min(self.count - 1))
    }
}

/// Binned semivariances with their mean lag and pair counts; empty bins dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalVariogram {
    /// Mean pair distance in each non-empty bin, km.
    pub lags: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Pair-year counts per bin.
    pub counts: Vec<u64>,
    pub max_distance: f64,
}

/// `γ̂(h_b) = mean over pairs in bin b and years of ½(res_i − res_j)²`.
/// The panel should already be standardised to unit marginal variance.
pub fn empirical_variogram<T: Real>(
    panel: &ResidualPanel<T>,
    distances: &DMatrix<T>,
    bins: &VariogramBins,
) -> Result<EmpiricalVariogram> {
    let s = panel.sea_count();
    if distances.shape() != (s, s) {
        return Err(Error::Dimension {
            expected: s,
            found: distances.nrows(),
        });
    }
    if bins.count == 0 || !(bins.max_distance > 0.0) {
        return Err(Error::invalid("variogram bins must be non-empty"));
    }
    let years = panel.year_count();
    let mut sum_g = vec![0.0; bins.count];
    let mut sum_h = vec![0.0; bins.count];
    let mut count = vec![0u64; bins.count];
    for j in 0..s {
        for i in 0..j {
            let h = distances[(i, j)].as_f64();
            let Some(b) = bins.bin_of(h) else { continue };
            for y in 0..years {
                let d = (panel.data[(y, i)] - panel.data[(y, j)]).as_f64();
                sum_g[b] += 0.5 * d * d;
            }
            sum_h[b] += h * years as f64;
            count[b] += years as u64;
        }
    }
    let mut out = EmpiricalVariogram {
        lags: Vec::new(),
        gamma: Vec::new(),
        counts: Vec::new(),
        max_distance: bins.max_distance,
    };
    for b in 0..bins.count {
        if count[b] > 0 {
            out.lags.push(sum_h[b] / count[b] as f64);
            out.gamma.push(sum_g[b] / count[b] as f64);
            out.counts.push(count[b]);
        }
    }
    if out.lags.is_empty() {
        return Err(Error::invalid("all variogram bins are empty"));
    }
    Ok(out)
}

/// `γ(h) = θ + (1 − θ)(1 − exp(−h/r))` for `h > 0`, `γ(0) = 0`.
pub fn exp_nugget_variogram(theta: f64, range_km: f64, h: f64) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    theta + (1.0 - theta) * (1.0 - (-h / range_km).exp())
}

/// `C(h) = (1 − θ) exp(−h/r) + θ·1{same cell}`.
pub fn exp_nugget_correlation(theta: f64, range_km: f64, h: f64, same_cell: bool) -> f64 {
    if same_cell {
        return 1.0;
    }
    (1.0 - theta) * (-h / range_km).exp()
}

/// Fitted `(θ, r)` of the exponential-with-nugget variogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpNuggetFit {
    pub theta: f64,
    pub range_km: f64,
    /// Pair-count weighted squared error at the optimum.
    pub sse: f64,
    /// Set when the optimum sits on the upper range bound or refinement failed.
    pub warning: Option<String>,
}

fn weighted_sse(v: &EmpiricalVariogram, theta: f64, r: f64) -> f64 {
    v.lags
        .iter()
        .zip(&v.gamma)
        .zip(&v.counts)
        .map(|((&h, &g), &n)| {
            let d = g - exp_nugget_variogram(theta, r, h);
            n as f64 * d * d
        })
        .sum()
}

/// For fixed `r` the model is linear in `θ`; returns the clipped weighted
/// least-squares `θ`.
fn best_theta(v: &EmpiricalVariogram, r: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&h, &g), &n) in v.lags.iter().zip(&v.gamma).zip(&v.counts) {
        let base = 1.0 - (-h / r).exp();
        let lever = 1.0 - base;
        num += n as f64 * (g - base) * lever;
        den += n as f64 * lever * lever;
    }
    if den <= 0.0 {
        return 0.0;
    }
    (num / den).clamp(0.0, 1.0)
}

/// Minimises `Σ_b n_b (γ̂_b − γ_{θ,r}(h_b))²` over `θ ∈ [0, 1]`,
/// `r ∈ (0, 2·max bin]`: a log-spaced grid over `r` (with `θ` profiled out in
/// closed form) followed by golden-section refinement of `log r`.
pub fn fit_exp_nugget(v: &EmpiricalVariogram) -> Result<ExpNuggetFit> {
    if v.lags.len() < 3 {
        return Err(Error::invalid(format!(
            "variogram fit needs at least 3 non-empty bins, got {}",
            v.lags.len()
        )));
    }
    let r_hi = 2.0 * v.max_distance;
    let r_lo = r_hi * 1e-4;
    let profile = |log_r: f64| {
        let r = log_r.exp();
        weighted_sse(v, best_theta(v, r), r)
    };
    let grid_n = 81;
    let (lo, hi) = (r_lo.ln(), r_hi.ln());
    let step = (hi - lo) / (grid_n - 1) as f64;
    let mut best_k: usize = 0;
    let mut best_val = f64::INFINITY;
    for k in 0..grid_n {
        let val = profile(lo + step * k as f64);
        if val < best_val {
            best_val = val;
            best_k = k;
        }
    }
    let a = lo + step * best_k.saturating_sub(1) as f64;
    let b = (lo + step * (best_k + 1) as f64).min(hi);
    let refined = golden_section(&profile, a, b, 1e-10);
    let refined_val = profile(refined);
    let mut warning = None;
    let log_r = if refined_val <= best_val * (1.0 + 1e-8) + 1e-300 {
        refined
    } else {
        warning = Some("refinement did not improve on the grid optimum".to_string());
        lo + step * best_k as f64
    };
    let r = log_r.exp().min(r_hi);
    let mut theta = best_theta(v, r);
    // A range far below the shortest lag leaves θ unidentified; report the
    // equivalent pure nugget.
    let h_min = v.lags.iter().copied().fold(f64::INFINITY, f64::min);
    if (1.0 - theta) * (-h_min / r).exp() < PURE_NUGGET_CORRELATION {
        theta = 1.0;
    }
    if (r_hi - r) <= 1e-6 * r_hi {
        warning = Some(format!("range parameter at its upper bound {r_hi:.1} km"));
    }
    if let Some(w) = &warning {
        log::warn!("exponential-nugget fit: {w}");
    }
    Ok(ExpNuggetFit {
        theta,
        range_km: r,
        sse: weighted_sse(v, theta, r),
        warning,
    })
}

/// Exponential-with-nugget correlation plus marginal standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpNuggetModel<T> {
    pub year: i32,
    pub month: u32,
    pub trained_through: i32,
    pub theta: f64,
    pub range_km: f64,
    pub sigma: Vec<T>,
}

impl<T: Real> ExpNuggetModel<T> {
    pub fn new(
        year: i32,
        month: u32,
        trained_through: i32,
        theta: f64,
        range_km: f64,
        sigma: Vec<T>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::invalid(format!(
                "nugget weight {theta} outside [0, 1]"
            )));
        }
        if !(range_km > 0.0) {
            return Err(Error::invalid("range must be positive"));
        }
        if sigma.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::invalid("sigma must be positive"));
        }
        Ok(Self {
            year,
            month,
            trained_through,
            theta,
            range_km,
            sigma,
        })
    }

    /// Standardises the panel, fits the variogram and attaches `sigma`.
    pub fn fit(
        panel: &ResidualPanel<T>,
        sigma: Vec<T>,
        distances: &DMatrix<T>,
    ) -> Result<(Self, ExpNuggetFit)> {
        let standardized = panel.standardized(&sigma)?;
        let bins = VariogramBins::from_distances(distances)?;
        let vario = empirical_variogram(&standardized, distances, &bins)?;
        let fit = fit_exp_nugget(&vario)?;
        let model = Self::new(
            panel.target_year,
            panel.month,
            *panel.years.iter().max().expect("panel has rows"),
            fit.theta,
            fit.range_km,
            sigma,
        )?;
        Ok((model, fit))
    }

    pub fn correlation(&self, distances: &DMatrix<T>) -> DMatrix<T> {
        let s = distances.nrows();
        DMatrix::from_fn(s, s, |i, j| {
            T::lit(exp_nugget_correlation(
                self.theta,
                self.range_km,
                distances[(i, j)].as_f64(),
                i == j,
            ))
        })
    }

    /// `D C D` with `D = diag(sigma)`.
    pub fn covariance(&self, distances: &DMatrix<T>) -> DMatrix<T> {
        let mut c = self.correlation(distances);
        for j in 0..c.ncols() {
            for i in 0..c.nrows() {
                c[(i, j)] *= self.sigma[i] * self.sigma[j];
            }
        }
        c
    }
}

/// Lower Cholesky factor, retrying once with `1e-10 · mean diag` jitter.
pub fn cholesky_with_jitter<T: Real>(cov: &DMatrix<T>) -> Result<DMatrix<T>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch.l());
    }
    let n = cov.nrows();
    let mean_diag = (0..n).fold(T::zero(), |a, i| a + cov[(i, i)]) / T::from_usize_lossy(n.max(1));
    let mut jittered = cov.clone();
    for i in 0..n {
        jittered[(i, i)] += T::lit(1e-10) * mean_diag;
    }
    Cholesky::new(jittered)
        .map(|ch| ch.l())
        .ok_or_else(|| Error::Numerical("covariance not positive definite after jitter".into()))
}

/// Draws from `N(μ, D C D)` through a dense Cholesky factor.
pub fn sample_geostat<T: Real>(
    model: &ExpNuggetModel<T>,
    mu: &[T],
    distances: &DMatrix<T>,
    m: usize,
    seed: u64,
    floor: Option<T>,
) -> Result<ForecastSample<T>> {
    let s = model.sigma.len();
    if mu.len() != s || distances.shape() != (s, s) {
        return Err(Error::Dimension {
            expected: s,
            found: mu.len(),
        });
    }
    if m == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let l = cholesky_with_jitter(&model.covariance(distances))?;
    let mu = DVector::from_column_slice(mu);
    let draws = draw_rows(m, s, seed, floor, |rng| {
        let z = DVector::from_fn(s, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        });
        &mu + &l * z
    });
    Ok(ForecastSample {
        year: model.year,
        month: model.month,
        draws,
    })
}
