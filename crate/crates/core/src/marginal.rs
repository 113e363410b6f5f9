//! Univariate postprocessing: moving-average bias and variance estimates,
//! the NGR reference variants, weight tuning, and the Gaussian predictive
//! marginal built from either.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::FieldSource;
use crate::optim::minimize_box_2d;
use crate::real::{mean, Real};
use crate::verify::crps_gaussian;

/// Smallest predictive standard deviation, °C.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Relative tolerance under which two tuning objectives count as tied.
const TIE_TOLERANCE: f64 = 1e-12;
/// Absolute tie tolerance, °C²; absorbs rounding when every candidate is exact.
const TIE_ABSOLUTE: f64 = 1e-20;

/// Weighting of past years: `k` counts years back from the target year.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// `w_k ∝ 1{k ≤ window}`.
    Sma { window: usize },
    /// `w_k ∝ exp(−scale · k)`.
    Ema { scale: f64 },
}

impl WeightScheme {
    fn raw(&self, k: usize) -> f64 {
        match *self {
            WeightScheme::Sma { window } => {
                if k <= window {
                    1.0
                } else {
                    0.0
                }
            }
            WeightScheme::Ema { scale } => (-scale * k as f64).exp(),
        }
    }

    /// Normalised weights for `k = 1..=available`.
    pub fn weights<T: Real>(&self, available: usize) -> Vec<T> {
        let raw: Vec<f64> = (1..=available).map(|k| self.raw(k)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| T::lit(w / total)).collect()
    }

    /// Years of memory; smaller means the scheme forgets faster.
    pub fn effective_memory(&self) -> f64 {
        match *self {
            WeightScheme::Sma { window } => window as f64,
            WeightScheme::Ema { scale } => 1.0 / scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::Sma { window } if window == 0 => {
                Err(Error::invalid("SMA window must be positive"))
            }
            WeightScheme::Ema { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::invalid("EMA scale must be positive"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightScheme::Sma { window } => write!(f, "sma:{window}"),
            WeightScheme::Ema { scale } => write!(f, "ema:{scale}"),
        }
    }
}

impl FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("bad weight scheme {s:?}")))?;
        let scheme = match kind {
            "sma" => WeightScheme::Sma {
                window: param
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad window {param:?}")))?,
            },
            "ema" => WeightScheme::Ema {
                scale: param
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad scale {param:?}")))?,
            },
            _ => return Err(Error::invalid(format!("bad weight scheme {s:?}"))),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Candidate parameters for [`tune_weights`].
#[derive(Clone, Debug, PartialEq)]
pub enum SearchGrid {
    Sma(Vec<usize>),
    Ema(Vec<f64>),
}

impl SearchGrid {
    pub fn schemes(&self) -> Vec<WeightScheme> {
        match self {
            SearchGrid::Sma(ls) => ls
                .iter()
                .map(|&window| WeightScheme::Sma { window })
                .collect(),
            SearchGrid::Ema(as_) => as_
                .iter()
                .map(|&scale| WeightScheme::Ema { scale })
                .collect(),
        }
    }

    pub fn default_sma() -> Self {
        SearchGrid::Sma((1..=30).collect())
    }

    pub fn default_ema() -> Self {
        SearchGrid::Ema((1..=50).map(|i| i as f64 / 100.0).collect())
    }
}

/// Which estimator produced a marginal model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MarginalMethod {
    Sma,
    Ema,
    NgrM,
    NgrS,
    NgrMs,
    NgrLa,
}

impl MarginalMethod {
    pub const ALL: [MarginalMethod; 6] = [
        MarginalMethod::NgrM,
        MarginalMethod::NgrS,
        MarginalMethod::NgrMs,
        MarginalMethod::NgrLa,
        MarginalMethod::Sma,
        MarginalMethod::Ema,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MarginalMethod::Sma => "SMA",
            MarginalMethod::Ema => "EMA",
            MarginalMethod::NgrM => "NGR_m",
            MarginalMethod::NgrS => "NGR_s",
            MarginalMethod::NgrMs => "NGR_ms",
            MarginalMethod::NgrLa => "NGR_la",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.code() == code)
    }

    pub fn ngr_grouping(self) -> Option<NgrGrouping> {
        match self {
            MarginalMethod::NgrM => Some(NgrGrouping::ByMonth),
            MarginalMethod::NgrS => Some(NgrGrouping::ByLocation),
            MarginalMethod::NgrMs => Some(NgrGrouping::ByMonthLocation),
            MarginalMethod::NgrLa => Some(NgrGrouping::LocallyAdaptive),
            _ => None,
        }
    }
}

impl fmt::Display for MarginalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MarginalMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown marginal method {s:?}")))
    }
}

/// Gaussian predictive marginals `N(mu_s, sigma_s²)` for one `(year, month)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalModel<T> {
    pub year: i32,
    pub month: u32,
    pub method: MarginalMethod,
    /// Last year whose observations entered the fit.
    pub trained_through: i32,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> MarginalModel<T> {
    pub fn new(
        year: i32,
        month: u32,
        method: MarginalMethod,
        trained_through: i32,
        mu: Vec<T>,
        sigma: Vec<T>,
    ) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Dimension {
                expected: mu.len(),
                found: sigma.len(),
            });
        }
        if let Some(i) = sigma
            .iter()
            .position(|&s| !(s > T::zero()) || !s.is_finite())
        {
            return Err(Error::invalid(format!("sigma at cell {i} is not positive")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("non-finite predictive mean"));
        }
        Ok(Self {
            year,
            month,
            method,
            trained_through,
            mu,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

fn history_error(year: i32, month: u32, reason: impl Into<String>) -> Error {
    Error::InsufficientHistory {
        year,
        month,
        reason: reason.into(),
    }
}

/// Per-year forecast errors `f̄_j − t_j` for one month, years strictly before `until`.
struct ErrorHistory<T> {
    first_year: i32,
    errors: Vec<Vec<T>>,
}

impl<T: Real> ErrorHistory<T> {
    fn collect<S: FieldSource<T> + ?Sized>(src: &S, month: u32, until: i32) -> Self {
        let first_year = src.first_year();
        let last = (until - 1).min(src.last_year());
        let errors = (first_year..=last)
            .map_while(|j| {
                let fbar = src.forecast_mean(j, month)?;
                let obs = src.observation(j, month)?;
                Some(fbar.iter().zip(obs).map(|(&f, &t)| f - t).collect())
            })
            .collect();
        Self { first_year, errors }
    }

    fn len(&self) -> usize {
        self.errors.len()
    }

    /// `b̂` for the year at position `pos` (uses positions `< pos` only).
    fn bias_at(&self, scheme: &WeightScheme, pos: usize) -> Option<Vec<T>> {
        if pos == 0 {
            return None;
        }
        let pos = pos.min(self.len());
        if pos == 0 {
            return None;
        }
        let w: Vec<T> = scheme.weights(pos);
        let s = self.errors[0].len();
        let mut out = vec![T::zero(); s];
        for (k, &wk) in w.iter().enumerate() {
            let e = &self.errors[pos - 1 - k];
            for (o, &v) in out.iter_mut().zip(e) {
                *o += wk * v;
            }
        }
        Some(out)
    }

    /// `b̂_j` for every stored year (None for the first).
    fn bias_series(&self, scheme: &WeightScheme) -> Vec<Option<Vec<T>>> {
        (0..self.len()).map(|p| self.bias_at(scheme, p)).collect()
    }

    /// `σ̂²` for the year at position `pos` given the out-of-sample bias series.
    fn variance_at(
        &self,
        scheme: &WeightScheme,
        biases: &[Option<Vec<T>>],
        pos: usize,
    ) -> Option<Vec<T>> {
        let pos = pos.min(self.len());
        // residual years are positions 1..pos (position 0 has no bias estimate)
        if pos < 2 {
            return None;
        }
        let available = pos - 1;
        let w: Vec<T> = scheme.weights(available);
        let s = self.errors[0].len();
        let mut out = vec![T::zero(); s];
        for (k, &wk) in w.iter().enumerate() {
            let j = pos - 1 - k;
            let b = biases[j].as_ref().expect("bias defined after first year");
            for ((o, &e), &bj) in out.iter_mut().zip(&self.errors[j]).zip(b) {
                // t − (f̄ − b̂) = b̂ − e
                let r = bj - e;
                *o += wk * r * r;
            }
        }
        let floor = T::lit(SIGMA_FLOOR * SIGMA_FLOOR);
        out.iter_mut().for_each(|v| *v = v.max(floor));
        Some(out)
    }

    fn position(&self, year: i32) -> usize {
        (year - self.first_year).max(0) as usize
    }
}

/// Moving-average bias estimate `b̂_{y,s} = Σ_{j<y} w_{y−j} (f̄_{j,s} − t_{j,s})`,
/// weights renormalised over the years actually available.
pub fn ma_bias<T: Real, S: FieldSource<T> + ?Sized>(
    src: &S,
    scheme: &WeightScheme,
    year: i32,
    month: u32,
) -> Result<Vec<T>> {
    scheme.validate()?;
    let hist = ErrorHistory::collect(src, month, year);
    hist.bias_at(scheme, hist.position(year))
        .ok_or_else(|| history_error(year, month, "no prior year with forecast and observation"))
}

/// Moving-average variance estimate
/// `σ̂²_{y,s} = Σ_{j<y} w_{y−j} (t_{j,s} − (f̄_{j,s} − b̂_{j,s}))²`,
/// where each `b̂_{j,s}` is the out-of-sample estimate available in year `j`.
/// Floored at `SIGMA_FLOOR²`.
pub fn ma_variance<T: Real, S: FieldSource<T> + ?Sized>(
    src: &S,
    scheme: &WeightScheme,
    bias_scheme: &WeightScheme,
    year: i32,
    month: u32,
) -> Result<Vec<T>> {
    scheme.validate()?;
    bias_scheme.validate()?;
    let hist = ErrorHistory::collect(src, month, year);
    let biases = hist.bias_series(bias_scheme);
    hist.variance_at(scheme, &biases, hist.position(year))
        .ok_or_else(|| history_error(year, month, "variance needs at least two prior years"))
}

/// What [`tune_weights`] minimises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// MSE of the bias-corrected ensemble mean; tunes the bias weights.
    Mse,
    /// Gaussian CRPS with the bias corrected by `bias`; tunes the variance weights.
    Crps { bias: WeightScheme },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub scheme: WeightScheme,
    pub objective: f64,
    /// Objective value for every candidate, in search order.
    pub profile: Vec<(WeightScheme, f64)>,
}

/// Picks the grid parameter with the lowest out-of-sample objective, pooled
/// over all locations, the given months and every year before `target_year`
/// for which the estimator is defined. Ties go to the shorter memory.
pub fn tune_weights<T: Real, S: FieldSource<T> + ?Sized>(
    src: &S,
    objective: Objective,
    grid: &SearchGrid,
    target_year: i32,
    months: &[u32],
) -> Result<TuneResult> {
    let candidates = grid.schemes();
    if candidates.is_empty() {
        return Err(Error::invalid("empty search grid"));
    }
    for c in &candidates {
        c.validate()?;
    }
    let histories: Vec<ErrorHistory<T>> = months
        .iter()
        .map(|&m| ErrorHistory::collect(src, m, target_year))
        .collect();
    let fbars: Vec<Vec<&[T]>> = months
        .iter()
        .zip(&histories)
        .map(|(&m, h)| {
            (0..h.len())
                .map(|p| {
                    src.forecast_mean(h.first_year + p as i32, m)
                        .expect("collected")
                })
                .collect()
        })
        .collect();
    let min_pos = match objective {
        Objective::Mse => 1,
        Objective::Crps { .. } => 2,
    };
    if histories.iter().all(|h| h.len() <= min_pos) {
        return Err(history_error(
            target_year,
            months.first().copied().unwrap_or(0),
            "no tuning years before the target year",
        ));
    }
    let bias_cache: Option<Vec<Vec<Option<Vec<T>>>>> = match objective {
        Objective::Crps { bias } => {
            bias.validate()?;
            Some(histories.iter().map(|h| h.bias_series(&bias)).collect())
        }
        Objective::Mse => None,
    };

    let profile: Vec<(WeightScheme, f64)> = candidates
        .par_iter()
        .map(|scheme| {
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (mi, hist) in histories.iter().enumerate() {
                for pos in min_pos..hist.len() {
                    let err = &hist.errors[pos];
                    match objective {
                        Objective::Mse => {
                            let b = hist.bias_at(scheme, pos).expect("pos >= 1");
                            for (&e, &bv) in err.iter().zip(&b) {
                                let d = (e - bv).as_f64();
                                total += d * d;
                            }
                            count += err.len();
                        }
                        Objective::Crps { .. } => {
                            let biases = &bias_cache.as_ref().expect("crps cache")[mi];
                            let var = hist.variance_at(scheme, biases, pos).expect("pos >= 2");
                            let b = biases[pos].as_ref().expect("pos >= 1");
                            let fbar = fbars[mi][pos];
                            for s in 0..err.len() {
                                let t = fbar[s] - err[s];
                                let mu = fbar[s] - b[s];
                                let sd = var[s].sqrt();
                                total += crps_gaussian(mu, sd, t).expect("sd > 0").as_f64();
                            }
                            count += err.len();
                        }
                    }
                }
            }
            (*scheme, total / count as f64)
        })
        .collect();

    let mut best = profile[0];
    for &(scheme, value) in &profile[1..] {
        let tol = TIE_TOLERANCE * value.abs().max(best.1.abs()) + TIE_ABSOLUTE;
        let tied = (value - best.1).abs() <= tol;
        if (!tied && value < best.1)
            || (tied && scheme.effective_memory() < best.0.effective_memory())
        {
            best = (scheme, value);
        }
    }
    Ok(TuneResult {
        scheme: best.0,
        objective: best.1,
        profile,
    })
}

/// Grouping of NGR coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NgrGrouping {
    ByMonth,
    ByLocation,
    ByMonthLocation,
    /// One `(a, b)` per month fitted on anomalies pooled over locations.
    LocallyAdaptive,
}

impl NgrGrouping {
    pub fn method(self) -> MarginalMethod {
        match self {
            NgrGrouping::ByMonth => MarginalMethod::NgrM,
            NgrGrouping::ByLocation => MarginalMethod::NgrS,
            NgrGrouping::ByMonthLocation => MarginalMethod::NgrMs,
            NgrGrouping::LocallyAdaptive => MarginalMethod::NgrLa,
        }
    }
}

/// Coefficients of `μ = a + b·f̄`, `σ² = c² + d²·S²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NgrFit<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    /// The regression predictor was constant; `b = 0` and `a` is the mean observation.
    pub singular: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    month: Option<u32>,
    location: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgrCoefficients<T> {
    pub grouping: NgrGrouping,
    pub train_first: i32,
    pub train_last: i32,
    groups: BTreeMap<GroupKey, NgrFit<T>>,
}

impl<T: Real> NgrCoefficients<T> {
    fn key(&self, month: u32, location: usize) -> GroupKey {
        match self.grouping {
            NgrGrouping::ByMonth | NgrGrouping::LocallyAdaptive => GroupKey {
                month: Some(month),
                location: None,
            },
            NgrGrouping::ByLocation => GroupKey {
                month: None,
                location: Some(location),
            },
            NgrGrouping::ByMonthLocation => GroupKey {
                month: Some(month),
                location: Some(location),
            },
        }
    }

    pub fn get(&self, month: u32, location: usize) -> Option<&NgrFit<T>> {
        self.groups.get(&self.key(month, location))
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// True when any group fell back to the constant-predictor fit.
    pub fn any_singular(&self) -> bool {
        self.groups.values().any(|g| g.singular)
    }
}

#[derive(Clone, Copy)]
struct Sample<T> {
    x: T,
    spread: T,
    t: T,
}

/// Mean over years `from..to` of a per-year field, or None when the range is empty.
fn climatology<T: Real>(fields: &[&[T]]) -> Option<Vec<T>> {
    if fields.is_empty() {
        return None;
    }
    let s = fields[0].len();
    let mut out = vec![T::zero(); s];
    for f in fields {
        for (o, &v) in out.iter_mut().zip(f.iter()) {
            *o += v;
        }
    }
    let n = T::from_usize_lossy(fields.len());
    out.iter_mut().for_each(|o| *o /= n);
    Some(out)
}

/// Anomalies of forecast mean and observation at `year` against the mean of
/// years `train_first..year`.
fn anomalies<T: Real, S: FieldSource<T> + ?Sized>(
    src: &S,
    train_first: i32,
    year: i32,
    month: u32,
) -> Option<(Vec<T>, Vec<T>)> {
    let fc: Vec<&[T]> = (train_first..year)
        .map(|j| src.forecast_mean(j, month))
        .collect::<Option<_>>()?;
    let ob: Vec<&[T]> = (train_first..year)
        .map(|j| src.observation(j, month))
        .collect::<Option<_>>()?;
    Some((climatology(&fc)?, climatology(&ob)?))
}

/// Fits NGR coefficients on `train_years` for the given months.
///
/// `a, b` come from ordinary least squares of the observation on the ensemble
/// mean within each group; `c, d ≥ 0` minimise the mean Gaussian CRPS.
pub fn fit_ngr<T: Real, S: FieldSource<T> + ?Sized>(
    src: &S,
    grouping: NgrGrouping,
    train_years: std::ops::RangeInclusive<i32>,
    months: &[u32],
) -> Result<NgrCoefficients<T>> {
    let (first, last) = (*train_years.start(), *train_years.end());
    if months.is_empty() {
        return Err(Error::invalid("fit_ngr needs at least one month"));
    }
    let s_count = src.sea_count();
    let mut buckets: BTreeMap<GroupKey, Vec<Sample<T>>> = BTreeMap::new();
    for &month in months {
        for year in first..=last {
            let (Some(fbar), Some(spread), Some(obs)) = (
                src.forecast_mean(year, month),
                src.forecast_variance(year, month),
                src.observation(year, month),
            ) else {
                return Err(history_error(
                    year,
                    month,
                    "training year missing from archive",
                ));
            };
            let clim = if grouping == NgrGrouping::LocallyAdaptive {
                match anomalies(src, first, year, month) {
                    Some(c) => Some(c),
                    None => continue,
                }
            } else {
                None
            };
            for s in 0..s_count {
                let key = match grouping {
                    NgrGrouping::ByMonth | NgrGrouping::LocallyAdaptive => GroupKey {
                        month: Some(month),
                        location: None,
                    },
                    NgrGrouping::ByLocation => GroupKey {
                        month: None,
                        location: Some(s),
                    },
                    NgrGrouping::ByMonthLocation => GroupKey {
                        month: Some(month),
                        location: Some(s),
                    },
                };
                let (x, t) = match &clim {
                    Some((fc, ob)) => (fbar[s] - fc[s], obs[s] - ob[s]),
                    None => (fbar[s], obs[s]),
                };
                buckets.entry(key).or_default().push(Sample {
                    x,
                    spread: spread[s],
                    t,
                });
            }
        }
    }
    if let Some((key, v)) = buckets.iter().find(|(_, v)| v.len() < 3) {
        return Err(history_error(
            last,
            key.month.unwrap_or(months[0]),
            format!("NGR group has {} training samples, need 3", v.len()),
        ));
    }
    if buckets.is_empty() {
        return Err(history_error(last, months[0], "no NGR training samples"));
    }
    let groups: BTreeMap<GroupKey, NgrFit<T>> = buckets
        .into_par_iter()
        .map(|(key, samples)| (key, fit_group(&samples)))
        .collect();
    if groups.values().any(|g| g.singular) {
        log::warn!("NGR fit: constant predictor in at least one group, fell back to b = 0");
    }
    Ok(NgrCoefficients {
        grouping,
        train_first: first,
        train_last: last,
        groups,
    })
}

/// Ordinary least squares of `t` on `x`. Returns `(a, b, singular)`.
pub(crate) fn ols<T: Real>(x: &[T], t: &[T]) -> (T, T, bool) {
    let mx = mean(x);
    let mt = mean(t);
    let mut sxx = T::zero();
    let mut sxt = T::zero();
    for (&xi, &ti) in x.iter().zip(t) {
        sxx += (xi - mx) * (xi - mx);
        sxt += (xi - mx) * (ti - mt);
    }
    let scale = T::one() + mx * mx;
    if sxx <= T::lit(1e-12) * scale * T::from_usize_lossy(x.len()) {
        return (mt, T::zero(), true);
    }
    let b = sxt / sxx;
    (mt - b * mx, b, false)
}

fn ngr_sigma<T: Real>(c: T, d: T, spread: T) -> T {
    (c * c + d * d * spread).sqrt().max(T::lit(SIGMA_FLOOR))
}

fn fit_group<T: Real>(samples: &[Sample<T>]) -> NgrFit<T> {
    let x: Vec<T> = samples.iter().map(|s| s.x).collect();
    let t: Vec<T> = samples.iter().map(|s| s.t).collect();
    let (a, b, singular) = ols(&x, &t);
    let mu: Vec<f64> = x.iter().map(|&xi| (a + b * xi).as_f64()).collect();
    let obs: Vec<f64> = t.iter().map(|v| v.as_f64()).collect();
    let spread: Vec<f64> = samples.iter().map(|s| s.spread.as_f64()).collect();
    let n = samples.len() as f64;
    let rmse = (mu
        .iter()
        .zip(&obs)
        .map(|(m, o)| (m - o) * (m - o))
        .sum::<f64>()
        / n)
        .sqrt();
    let mean_spread = spread.iter().sum::<f64>() / n;
    let c_hi = 4.0 * rmse + 10.0 * SIGMA_FLOOR;
    let d_hi = if mean_spread > 0.0 {
        4.0 * rmse / mean_spread.sqrt()
    } else {
        0.0
    };
    let objective = |c: f64, d: f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..mu.len() {
            let sd = ngr_sigma(c, d, spread[i]);
            acc += crps_gaussian(mu[i], sd, obs[i]).expect("sd > 0");
        }
        acc / n
    };
    let (c, d) = minimize_box_2d(&objective, (SIGMA_FLOOR, c_hi), (0.0, d_hi), 1e-6);
    NgrFit {
        a,
        b,
        c: T::lit(c),
        d: T::lit(d),
        singular,
    }
}

/// How to build a predictive marginal.
#[derive(Clone, Debug, PartialEq)]
pub enum MarginalRecipe<T> {
    MovingAverage {
        bias: WeightScheme,
        variance: WeightScheme,
    },
    Ngr(NgrCoefficients<T>),
}

/// Builds `N(μ, σ²)` at every sea cell for `(year, month)`. No truncation
/// is applied here.
pub fn predictive_marginal<T: Real, S: FieldSource<T> + ?Sized>(
    recipe: &MarginalRecipe<T>,
    src: &S,
    year: i32,
    month: u32,
) -> Result<MarginalModel<T>> {
    let fbar = src
        .forecast_mean(year, month)
        .ok_or_else(|| history_error(year, month, "no forecast for target year"))?;
    match recipe {
        MarginalRecipe::MovingAverage { bias, variance } => {
            let b = ma_bias(src, bias, year, month)?;
            let var = ma_variance(src, variance, bias, year, month)?;
            let mu = fbar.iter().zip(&b).map(|(&f, &bv)| f - bv).collect();
            let sigma = var
                .iter()
                .map(|v| v.sqrt().max(T::lit(SIGMA_FLOOR)))
                .collect();
            let method = match bias {
                WeightScheme::Sma { .. } => MarginalMethod::Sma,
                WeightScheme::Ema { .. } => MarginalMethod::Ema,
            };
            MarginalModel::new(year, month, method, year - 1, mu, sigma)
        }
        MarginalRecipe::Ngr(coef) => {
            if coef.train_last >= year {
                return Err(Error::invalid(format!(
                    "NGR coefficients trained through {} cannot forecast {year}",
                    coef.train_last
                )));
            }
            let spread = src
                .forecast_variance(year, month)
                .ok_or_else(|| history_error(year, month, "no forecast for target year"))?;
            let clim = if coef.grouping == NgrGrouping::LocallyAdaptive {
                Some(
                    anomalies(src, coef.train_first, year, month)
                        .ok_or_else(|| history_error(year, month, "no climatology years"))?,
                )
            } else {
                None
            };
            let n = fbar.len();
            let mut mu = Vec::with_capacity(n);
            let mut sigma = Vec::with_capacity(n);
            for s in 0..n {
                let fit = coef.get(month, s).ok_or_else(|| {
                    Error::invalid(format!("no NGR group for month {month}, cell {s}"))
                })?;
                let m = match &clim {
                    Some((fc, ob)) => fit.a + fit.b * (fbar[s] - fc[s]) + ob[s],
                    None => fit.a + fit.b * fbar[s],
                };
                mu.push(m);
                sigma.push(ngr_sigma(fit.c, fit.d, spread[s]));
            }
            let through = match &clim {
                Some(_) => year - 1,
                None => coef.train_last,
            };
            MarginalModel::new(year, month, coef.grouping.method(), through, mu, sigma)
        }
    }
}
