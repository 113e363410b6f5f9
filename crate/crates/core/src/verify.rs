//! Scores and calibration diagnostics: MSE, CRPS (Gaussian and ensemble),
//! variogram score, PIT, multivariate rank histograms and the paired
//! permutation test.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{std_normal_cdf, std_normal_pdf, Real};
use crate::rng::substream;

pub fn mse<T: Real>(mu: T, t: T) -> T {
    (mu - t) * (mu - t)
}

/// Closed-form CRPS of `N(mu, sigma²)` at `t`:
/// `σ [z(2Φ(z) − 1) + 2φ(z) − 1/√π]`, `z = (t − μ)/σ`.
pub fn crps_gaussian<T: Real>(mu: T, sigma: T, t: T) -> Result<T> {
    if !(sigma > T::zero()) {
        return Err(Error::invalid(format!("CRPS needs sigma > 0, got {sigma}")));
    }
    let (mu, sigma, t) = (mu.as_f64(), sigma.as_f64(), t.as_f64());
    let z = (t - mu) / sigma;
    let v = sigma
        * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z)
            - 1.0 / std::f64::consts::PI.sqrt());
    Ok(T::lit(v.max(0.0)))
}

/// Ensemble CRPS `(1/N)Σ|x_k − t| − (1/2N²)ΣΣ|x_k − x_l|`, evaluated in
/// `O(N log N)` through the sorted ensemble.
pub fn crps_ensemble<T: Real>(x: &[T], t: T) -> Result<T> {
    if x.is_empty() {
        return Err(Error::invalid("empty ensemble"));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ensemble"));
    let n = sorted.len();
    let nf = T::from_usize_lossy(n);
    let mut abs_err = T::zero();
    let mut spread = T::zero();
    for (i, &v) in sorted.iter().enumerate() {
        abs_err += (v - t).abs();
        // Σ_k Σ_l |x_k − x_l| = 2 Σ_i (2i − N + 1) x_(i), i zero-based
        spread += T::lit(2.0 * i as f64 + 1.0 - n as f64) * v;
    }
    Ok(abs_err / nf - spread / (nf * nf))
}

/// PIT of `t` under `N(mu, sigma²)` clamped at `floor`. The clamped law has
/// an atom at the floor, so an observation at (or below) the floor gets a
/// uniform draw on `[0, F(floor)]`.
pub fn pit<T: Real, R: Rng + ?Sized>(mu: T, sigma: T, floor: Option<T>, t: T, rng: &mut R) -> T {
    let cdf = |x: T| T::lit(std_normal_cdf(((x - mu) / sigma).as_f64()));
    match floor {
        Some(fl) if t <= fl => cdf(fl) * T::lit(rng.random::<f64>()),
        _ => cdf(t),
    }
}

/// Sample mean and standard deviation of PIT values.
pub fn pit_moments<T: Real>(pits: &[T]) -> (T, T) {
    let n = pits.len();
    if n == 0 {
        return (T::zero(), T::zero());
    }
    let nf = T::from_usize_lossy(n);
    let m = pits.iter().fold(T::zero(), |a, &p| a + p) / nf;
    if n < 2 {
        return (m, T::zero());
    }
    let ss = pits.iter().fold(T::zero(), |a, &p| a + (p - m) * (p - m));
    (m, (ss / T::from_usize_lossy(n - 1)).sqrt())
}

/// Variogram score of order `p` with unit weights, summed over all ordered
/// location pairs. `draws` is `M × S`; expectations are means over draws.
pub fn variogram_score<T: Real>(draws: &DMatrix<T>, t: &[T], p: T) -> Result<T> {
    let (m, s) = draws.shape();
    if m < 2 {
        return Err(Error::invalid("variogram score needs at least two draws"));
    }
    if s != t.len() {
        return Err(Error::Dimension {
            expected: s,
            found: t.len(),
        });
    }
    let mf = T::from_usize_lossy(m);
    let half = p == T::lit(0.5);
    let pow = |x: T| if half { x.sqrt() } else { x.powf(p) };
    let total: T = (0..s)
        .into_par_iter()
        .map(|i| {
            let ci = draws.column(i);
            let mut acc = T::zero();
            for j in (i + 1)..s {
                let cj = draws.column(j);
                let mut e = T::zero();
                for k in 0..m {
                    e += pow((ci[k] - cj[k]).abs());
                }
                let d = pow((t[i] - t[j]).abs()) - e / mf;
                acc += d * d;
            }
            acc
        })
        .collect::<Vec<T>>()
        .into_iter()
        .fold(T::zero(), |a, b| a + b);
    Ok(total * T::lit(2.0))
}

/// Ranks `1..=K` of `values` with ties broken uniformly at random.
fn tie_broken_ranks<T: Real, R: Rng + ?Sized>(values: &[T], rng: &mut R, out: &mut [u64]) {
    let mut order: Vec<(T, u64, usize)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, rng.random::<u64>(), i))
        .collect();
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite values")
            .then(a.1.cmp(&b.1))
    });
    for (pos, &(_, _, i)) in order.iter().enumerate() {
        out[i] = pos as u64 + 1;
    }
}

/// Multivariate pre-rank function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PreRank {
    /// Mean of the per-location univariate ranks.
    Average,
    /// Simplified band depth `mean_s (K − r_s)(r_s − 1)`, `K = M + 1`.
    BandDepth,
}

impl PreRank {
    pub fn as_str(self) -> &'static str {
        match self {
            PreRank::Average => "average",
            PreRank::BandDepth => "band_depth",
        }
    }
}

impl fmt::Display for PreRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Rank in `1..=M+1` of the observation among the pre-ranks of the pooled
/// observation and `M` ensemble members (`ensemble` is `M × S`).
pub fn multivariate_rank<T: Real, R: Rng + ?Sized>(
    kind: PreRank,
    observation: &[T],
    ensemble: &DMatrix<T>,
    rng: &mut R,
) -> Result<usize> {
    let (m, s) = ensemble.shape();
    if m < 2 {
        return Err(Error::invalid("rank histograms need at least two members"));
    }
    if observation.len() != s {
        return Err(Error::Dimension {
            expected: s,
            found: observation.len(),
        });
    }
    let k = m + 1;
    // pre-ranks kept as integer sums over cells; the 1/S factor does not change the order
    let mut pre = vec![0u64; k];
    let mut values = vec![T::zero(); k];
    let mut ranks = vec![0u64; k];
    for cell in 0..s {
        values[0] = observation[cell];
        for member in 0..m {
            values[member + 1] = ensemble[(member, cell)];
        }
        tie_broken_ranks(&values, rng, &mut ranks);
        for (p, &r) in pre.iter_mut().zip(&ranks) {
            *p += match kind {
                PreRank::Average => r,
                PreRank::BandDepth => (k as u64 - r) * (r - 1),
            };
        }
    }
    let below = pre[1..].iter().filter(|&&v| v < pre[0]).count();
    let tied = pre[1..].iter().filter(|&&v| v == pre[0]).count();
    let extra = if tied > 0 {
        rng.random_range(0..=tied)
    } else {
        0
    };
    Ok(1 + below + extra)
}

pub fn average_rank<T: Real, R: Rng + ?Sized>(
    observation: &[T],
    ensemble: &DMatrix<T>,
    rng: &mut R,
) -> Result<usize> {
    multivariate_rank(PreRank::Average, observation, ensemble, rng)
}

pub fn band_depth_rank<T: Real, R: Rng + ?Sized>(
    observation: &[T],
    ensemble: &DMatrix<T>,
    rng: &mut R,
) -> Result<usize> {
    multivariate_rank(PreRank::BandDepth, observation, ensemble, rng)
}

/// Counts of observation ranks, possibly pooled into fewer bins.
#[derive(Clone, Debug, PartialEq)]
pub struct RankHistogram {
    pub kind: PreRank,
    /// Number of possible ranks, `M + 1`.
    pub n_ranks: usize,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl RankHistogram {
    /// Bins ranks `1..=n_ranks` into `n_bins` equal-width bins.
    pub fn new(kind: PreRank, n_ranks: usize, n_bins: usize) -> Result<Self> {
        if n_bins < 2 || n_bins > n_ranks {
            return Err(Error::invalid(format!(
                "need 2 <= bins <= ranks, got {n_bins} bins for {n_ranks} ranks"
            )));
        }
        Ok(Self {
            kind,
            n_ranks,
            counts: vec![0; n_bins],
            total: 0,
        })
    }

    /// Bin count used for scarce data: ranks pooled into
    /// `max(5, ⌊K/2⌋)` bins (never more than `K`) when there are fewer than
    /// `10·K` observations, otherwise one bin per rank.
    pub fn default_bins(n_ranks: usize, n_observations: usize) -> usize {
        if n_observations < 10 * n_ranks {
            (n_ranks / 2).max(5).min(n_ranks)
        } else {
            n_ranks
        }
    }

    pub fn add(&mut self, rank: usize) -> Result<()> {
        if rank == 0 || rank > self.n_ranks {
            return Err(Error::invalid(format!(
                "rank {rank} outside 1..={}",
                self.n_ranks
            )));
        }
        let bin = (rank - 1) * self.counts.len() / self.n_ranks;
        self.counts[bin] += 1;
        self.total += 1;
        Ok(())
    }

    /// Pearson chi-square statistic against the uniform rank law (bins
    /// weighted by how many ranks they hold).
    pub fn chi_square(&self) -> f64 {
        let bins = self.counts.len();
        let total = self.total as f64;
        (0..bins)
            .map(|b| {
                let lo = (b * self.n_ranks).div_ceil(bins);
                let hi = ((b + 1) * self.n_ranks).div_ceil(bins);
                let expected = total * (hi - lo) as f64 / self.n_ranks as f64;
                let d = self.counts[b] as f64 - expected;
                d * d / expected
            })
            .sum()
    }

    /// p-value of the chi-square uniformity test with `bins − 1` degrees of freedom.
    pub fn uniformity_p_value(&self) -> f64 {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let dist = ChiSquared::new((self.counts.len() - 1) as f64).expect("dof >= 1");
        1.0 - dist.cdf(self.chi_square())
    }
}

/// Outcome of [`permutation_test`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermutationResult {
    /// Mean paired difference `s = (1/n) Σ (S₁ − S₂)`.
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided paired permutation test: each resample flips the sign of every
/// paired difference independently with probability ½;
/// `p = (1 + #{|s*| ≥ |s|}) / (n_perm + 1)`.
pub fn permutation_test(
    scores_1: &[f64],
    scores_2: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if scores_1.len() != scores_2.len() {
        return Err(Error::Dimension {
            expected: scores_1.len(),
            found: scores_2.len(),
        });
    }
    if scores_1.is_empty() {
        return Err(Error::invalid("permutation test needs at least one pair"));
    }
    if n_perm == 0 {
        return Err(Error::invalid(
            "permutation test needs at least one resample",
        ));
    }
    let diffs: Vec<f64> = scores_1.iter().zip(scores_2).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / n;
    let threshold = observed.abs() * (1.0 - 1e-12);
    let exceed: usize = (0..n_perm)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, rep as u64);
            let mut acc = 0.0;
            let mut bits = 0u64;
            for (i, &d) in diffs.iter().enumerate() {
                if i % 64 == 0 {
                    bits = rng.random();
                }
                acc += if bits & 1 == 1 { d } else { -d };
                bits >>= 1;
            }
            usize::from((acc / n).abs() >= threshold)
        })
        .sum();
    Ok(PermutationResult {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (n_perm + 1) as f64,
    })
}

/// Score families written to reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreKind {
    Mse,
    Crps,
    VariogramScore,
    /// CRPS of a derived functional such as the minimum along a route.
    FunctionalCrps,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Mse => "MSE",
            ScoreKind::Crps => "CRPS",
            ScoreKind::VariogramScore => "VS",
            ScoreKind::FunctionalCrps => "route_CRPS",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            ScoreKind::Mse,
            ScoreKind::Crps,
            ScoreKind::VariogramScore,
            ScoreKind::FunctionalCrps,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown score kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreEntry {
    pub year: i32,
    pub month: u32,
    pub value: f64,
}

/// Per-`(year, month)` scores of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub method: String,
    pub kind: ScoreKind,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreReport {
    pub fn new(method: impl Into<String>, kind: ScoreKind) -> Self {
        Self {
            method: method.into(),
            kind,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, year: i32, month: u32, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{} {} score for {year}-{month} is not finite",
                self.method, self.kind
            )));
        }
        self.entries.push(ScoreEntry { year, month, value });
        Ok(())
    }

    pub fn sort(&mut self) {
        self.entries.sort_by_key(|e| (e.year, e.month));
    }

    pub fn mean(&self) -> f64 {
        if self.entries.is_empty() {
            return f64::NAN;
        }
        self.entries.iter().map(|e| e.value).sum::<f64>() / self.entries.len() as f64
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    /// Tab-separated lines `method year month kind value`.
    pub fn to_delimited(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.12e}\n",
                self.method, e.year, e.month, self.kind, e.value
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn crps_naive(x: &[f64], t: f64) -> f64 {
        let n = x.len() as f64;
        let a: f64 = x.iter().map(|v| (v - t).abs()).sum::<f64>() / n;
        let mut b = 0.0;
        for xi in x {
            for xj in x {
                b += (xi - xj).abs();
            }
        }
        a - b / (2.0 * n * n)
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(2.0, 2.0), 0.0);
        assert_eq!(mse(1.0, 3.0), 4.0);
    }

    #[test]
    fn crps_gaussian_examples() {
        let v = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        let expect = (2.0 / std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        assert!((v - expect).abs() < 1e-14);
        assert!((v - 0.23370).abs() < 1e-5);
        let v = crps_gaussian(1.0f64, 1e-8, 3.5).unwrap();
        assert!((v - 2.5).abs() < 1e-7);
        let base = crps_gaussian(0.3f64, 1.7, -0.4).unwrap();
        let scaled = crps_gaussian(0.3f64 * 2.5, 1.7 * 2.5, -0.4 * 2.5).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-12);
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
        assert!(crps_gaussian(0.0f32, 1.0, 0.0).unwrap() > 0.2336);
    }

    #[test]
    fn crps_ensemble_examples() {
        assert_eq!(crps_ensemble(&[2.0], 5.0).unwrap(), 3.0);
        assert_eq!(crps_ensemble(&[0.0, 0.0], 1.0).unwrap(), 1.0);
        assert!(crps_ensemble::<f64>(&[], 0.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fast = crps_ensemble(&x, 0.4).unwrap();
        assert!((fast - crps_naive(&x, 0.4)).abs() < 1e-12);
        let gauss = crps_gaussian(0.0, 1.0, 0.4).unwrap();
        assert!((fast - gauss).abs() < 3.0 / 10.0);
        let mut rev = x.clone();
        rev.reverse();
        assert_eq!(crps_ensemble(&rev, 0.4).unwrap(), fast);
    }

    #[test]
    fn pit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(pit(2.0, 1.0, None, 2.0, &mut rng), 0.5);
        assert_eq!(pit(0.0, 1.0, None, 1e3, &mut rng), 1.0);
        let at_floor = pit(0.0, 1.0, Some(-1.0), -1.0, &mut rng);
        assert!(at_floor >= 0.0 && at_floor <= std_normal_cdf(-1.0));
        let (m, s) = pit_moments(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn variogram_score_examples() {
        let draws = DMatrix::from_element(3, 4, 1.5);
        assert_eq!(variogram_score(&draws, &[2.0; 4], 0.5).unwrap(), 0.0);
        // S = 2, draws (0, 1) and (0, 1): E|X1 − X2|^p = 1; obs diff 4 → 2·(2 − 1)²
        let draws = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(variogram_score(&draws, &[0.0, 4.0], 0.5).unwrap(), 2.0);
        assert!(variogram_score(&DMatrix::zeros(1, 2), &[0.0, 0.0], 0.5).is_err());
        assert!(variogram_score(&DMatrix::zeros(2, 2), &[0.0], 0.5).is_err());
    }

    #[test]
    fn extreme_observation_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // No member is extreme at every cell, so only the observation has zero depth.
        let ens = DMatrix::from_fn(5, 3, |i, j| ((i + 2 * j) % 5) as f64);
        let obs = [100.0, 100.0, 100.0];
        assert_eq!(average_rank(&obs, &ens, &mut rng).unwrap(), 6);
        assert_eq!(band_depth_rank(&obs, &ens, &mut rng).unwrap(), 1);
        let low = [-100.0, -100.0, -100.0];
        assert_eq!(average_rank(&low, &ens, &mut rng).unwrap(), 1);
        assert!(average_rank(&[0.0], &ens, &mut rng).is_err());
    }

    #[test]
    fn tied_observation_rank_is_randomised() {
        // every item identical: all pre-ranks tie, final rank uniform on 1..=4
        let ens = DMatrix::from_element(3, 2, 1.0);
        let obs = [1.0, 1.0];
        let mut counts = [0usize; 4];
        for seed in 0..4000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            counts[average_rank(&obs, &ens, &mut rng).unwrap() - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 150.0, "{counts:?}");
        }
    }

    #[test]
    fn histogram_binning() {
        let mut h = RankHistogram::new(PreRank::Average, 10, 5).unwrap();
        for r in 1..=10 {
            h.add(r).unwrap();
        }
        assert_eq!(h.counts, vec![2; 5]);
        assert_eq!(h.total, 10);
        assert!(h.chi_square().abs() < 1e-12);
        assert!(h.add(11).is_err());
        assert!(RankHistogram::new(PreRank::Average, 10, 1).is_err());
        assert_eq!(RankHistogram::default_bins(10, 50), 5);
        assert_eq!(RankHistogram::default_bins(20, 50), 10);
        assert_eq!(RankHistogram::default_bins(10, 1000), 10);
        assert_eq!(RankHistogram::default_bins(3, 5), 3);
    }

    #[test]
    fn permutation_examples() {
        let a = [1.0, 2.0, 3.0];
        let r = permutation_test(&a, &a, 999, 1).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let b: Vec<f64> = (0..30).map(|i| 10.0 + i as f64 * 0.01).collect();
        let c: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
        let r = permutation_test(&b, &c, 999, 1).unwrap();
        assert!(r.p_value <= 2.0 / 1000.0, "{}", r.p_value);
        assert!(permutation_test(&[], &[], 10, 1).is_err());
        assert_eq!(
            permutation_test(&b, &c, 99, 5).unwrap(),
            permutation_test(&b, &c, 99, 5).unwrap()
        );
    }

    #[test]
    fn report_mean_and_text() {
        let mut r = ScoreReport::new("EMA", ScoreKind::Mse);
        r.push(2001, 2, 1.0).unwrap();
        r.push(2001, 1, 3.0).unwrap();
        r.sort();
        assert_eq!(r.entries[0].month, 1);
        assert_eq!(r.mean(), 2.0);
        assert!(r.push(2002, 1, f64::NAN).is_err());
        assert!(r.to_delimited().starts_with("EMA\t2001\t1\tMSE\t"));
    }
}
