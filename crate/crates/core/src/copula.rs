//! Empirical-copula reordering: ensemble copula coupling (raw ensemble as
//! rank template) and the Schaake shuffle (past observations as template).

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::marginal::MarginalModel;
use crate::real::{std_normal_quantile, Real};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateSource {
    RawEnsemble,
    HistoricalObservations,
}

/// Per-location sorting permutations of an `N × S` template.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTemplate {
    pub source: TemplateSource,
    pub members: usize,
    /// `order[s][k]` is the member holding the `k`-th smallest value at `s`.
    order: Vec<Vec<usize>>,
}

impl RankTemplate {
    /// Ties are broken by a seeded random shuffle.
    pub fn from_values<T: Real>(
        values: &DMatrix<T>,
        source: TemplateSource,
        seed: u64,
    ) -> Result<Self> {
        let (n, s) = values.shape();
        if n < 2 {
            return Err(Error::invalid("rank template needs at least two members"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rank template has non-finite values"));
        }
        let order = (0..s)
            .into_par_iter()
            .map(|c| {
                let mut rng = substream(seed, c as u64);
                let mut keyed: Vec<(T, u64, usize)> = (0..n)
                    .map(|i| (values[(i, c)], rng.random::<u64>(), i))
                    .collect();
                keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
                keyed.into_iter().map(|(_, _, i)| i).collect()
            })
            .collect();
        Ok(Self {
            source,
            members: n,
            order,
        })
    }

    pub fn sea_count(&self) -> usize {
        self.order.len()
    }

    /// Sorting permutation at cell `s`.
    pub fn order(&self, s: usize) -> &[usize] {
        &self.order[s]
    }

    /// Zero-based rank of every member at cell `s` (inverse of [`Self::order`]).
    pub fn ranks(&self, s: usize) -> Vec<usize> {
        let mut r = vec![0; self.members];
        for (k, &i) in self.order[s].iter().enumerate() {
            r[i] = k;
        }
        r
    }
}

/// Calibrated quantiles `F_s^{-1}(k/(N+1))`, `k = 1..=N`, reordered so that
/// member `i` at cell `s` takes the quantile of its template rank.
pub fn reorder_quantiles<T: Real>(
    marginal: &MarginalModel<T>,
    template: &RankTemplate,
    floor: Option<T>,
) -> Result<DMatrix<T>> {
    let s = marginal.len();
    if template.sea_count() != s {
        return Err(Error::Dimension {
            expected: s,
            found: template.sea_count(),
        });
    }
    if let Some(i) = marginal.sigma.iter().position(|&v| !(v > T::zero())) {
        return Err(Error::invalid(format!("sigma at cell {i} is not positive")));
    }
    let n = template.members;
    let z: Vec<T> = (1..=n)
        .map(|k| T::lit(std_normal_quantile(k as f64 / (n + 1) as f64)))
        .collect();
    let mut out = DMatrix::zeros(n, s);
    for c in 0..s {
        let (mu, sd) = (marginal.mu[c], marginal.sigma[c]);
        for (k, &member) in template.order(c).iter().enumerate() {
            let mut v = mu + sd * z[k];
            if let Some(fl) = floor {
                v = v.max(fl);
            }
            out[(member, c)] = v;
        }
    }
    Ok(out)
}

/// Ensemble copula coupling: `N` calibrated members carrying the raw
/// ensemble's rank structure (`raw` is `N × S`).
pub fn ecc<T: Real>(
    marginal: &MarginalModel<T>,
    raw: &DMatrix<T>,
    floor: Option<T>,
    seed: u64,
) -> Result<DMatrix<T>> {
    let template = RankTemplate::from_values(raw, TemplateSource::RawEnsemble, seed)?;
    reorder_quantiles(marginal, &template, floor)
}

/// Schaake shuffle: one member per training year, carrying the rank
/// structure of the observed fields (`historical` is `Y × S`).
pub fn schaake<T: Real>(
    marginal: &MarginalModel<T>,
    historical: &DMatrix<T>,
    floor: Option<T>,
    seed: u64,
) -> Result<DMatrix<T>> {
    let template =
        RankTemplate::from_values(historical, TemplateSource::HistoricalObservations, seed)?;
    reorder_quantiles(marginal, &template, floor)
}
