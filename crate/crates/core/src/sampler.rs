//! Draws spatial realisations from the reduced-rank predictive laws, with
//! optional clamping at the physical floor.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::covmodel::{Correction, TaperedPcaModel};
use crate::error::{Error, Result};
use crate::io::archive::{forecast_file, write_f32_file};
use crate::real::Real;
use crate::rng::{substream, StreamRng};

/// `M` joint draws over the `S` sea cells for one `(year, month)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSample<T: Real> {
    pub year: i32,
    pub month: u32,
    /// `M × S`.
    pub draws: DMatrix<T>,
}

impl<T: Real> ForecastSample<T> {
    pub fn draw_count(&self) -> usize {
        self.draws.nrows()
    }

    pub fn sea_count(&self) -> usize {
        self.draws.ncols()
    }

    /// Writes the first `count` draws as forecast field files, member index = draw index.
    pub fn write_members(&self, dir: &Path, count: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for k in 0..count.min(self.draw_count()) {
            let row: Vec<T> = self.draws.row(k).iter().copied().collect();
            write_f32_file(&dir.join(forecast_file(self.year, self.month, k)), &row)?;
        }
        Ok(())
    }
}

fn normals<T: Real>(rng: &mut StreamRng, n: usize) -> DVector<T> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// Generates `m` rows in parallel, one random substream per draw.
pub(crate) fn draw_rows<T: Real>(
    m: usize,
    s: usize,
    seed: u64,
    floor: Option<T>,
    draw: impl Fn(&mut StreamRng) -> DVector<T> + Sync,
) -> DMatrix<T> {
    let rows: Vec<DVector<T>> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, k as u64);
            let mut x = draw(&mut rng);
            if let Some(fl) = floor {
                x.iter_mut().for_each(|v| *v = v.max(fl));
            }
            x
        })
        .collect();
    DMatrix::from_fn(m, s, |i, j| rows[i][j])
}

fn check<T: Real>(model: &TaperedPcaModel<T>, mu: &[T], m: usize) -> Result<()> {
    if mu.len() != model.sea_count() {
        return Err(Error::Dimension {
            expected: model.sea_count(),
            found: mu.len(),
        });
    }
    if m == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    Ok(())
}

/// Draws `μ + Ξ U (Λ)^{1/2} Y`, `Y ~ N_d(0, I)`, from a multiplicative model.
pub fn sample_mc<T: Real>(
    model: &TaperedPcaModel<T>,
    mu: &[T],
    m: usize,
    seed: u64,
    floor: Option<T>,
) -> Result<ForecastSample<T>> {
    check(model, mu, m)?;
    let Correction::Multiplicative { xi } = &model.correction else {
        return Err(Error::invalid("sample_mc needs a multiplicative model"));
    };
    let s = model.sea_count();
    let d = model.rank();
    let roots: DVector<T> = DVector::from_iterator(d, model.eigvals.iter().map(|l| l.sqrt()));
    let mu = DVector::from_column_slice(mu);
    let xi = DVector::from_column_slice(xi);
    let draws = draw_rows(m, s, seed, floor, |rng| {
        let y = normals::<T>(rng, d).component_mul(&roots);
        let x = &model.eigvecs * y;
        &mu + x.component_mul(&xi)
    });
    Ok(ForecastSample {
        year: model.year,
        month: model.month,
        draws,
    })
}

/// Draws `μ + U (Λ)^{1/2} Y + diag(√η) Z` from an additive model.
pub fn sample_ac<T: Real>(
    model: &TaperedPcaModel<T>,
    mu: &[T],
    m: usize,
    seed: u64,
    floor: Option<T>,
) -> Result<ForecastSample<T>> {
    check(model, mu, m)?;
    let Correction::Additive { eta } = &model.correction else {
        return Err(Error::invalid("sample_ac needs an additive model"));
    };
    let s = model.sea_count();
    let d = model.rank();
    let roots: DVector<T> = DVector::from_iterator(d, model.eigvals.iter().map(|l| l.sqrt()));
    let nugget_sd: DVector<T> = DVector::from_iterator(s, eta.iter().map(|e| e.sqrt()));
    let mu = DVector::from_column_slice(mu);
    let draws = draw_rows(m, s, seed, floor, |rng| {
        let y = normals::<T>(rng, d).component_mul(&roots);
        let z = normals::<T>(rng, s).component_mul(&nugget_sd);
        &mu + &model.eigvecs * y + z
    });
    Ok(ForecastSample {
        year: model.year,
        month: model.month,
        draws,
    })
}

/// Dispatches on the model's correction.
pub fn sample_tapered<T: Real>(
    model: &TaperedPcaModel<T>,
    mu: &[T],
    m: usize,
    seed: u64,
    floor: Option<T>,
) -> Result<ForecastSample<T>> {
    match model.correction {
        Correction::Multiplicative { .. } => sample_mc(model, mu, m, seed, floor),
        Correction::Additive { .. } => sample_ac(model, mu, m, seed, floor),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Functional {
    Min,
    Max,
    Mean,
}

/// Per-draw reduction over a set of sea cells (e.g. the minimum along a route).
pub fn derived_functional<T: Real>(
    sample: &ForecastSample<T>,
    functional: Functional,
    cells: &[usize],
) -> Result<Vec<T>> {
    if cells.is_empty() {
        return Err(Error::invalid("derived functional needs at least one cell"));
    }
    if let Some(&c) = cells.iter().find(|&&c| c >= sample.sea_count()) {
        return Err(Error::invalid(format!("cell {c} outside the sample")));
    }
    Ok((0..sample.draw_count())
        .map(|k| {
            let vals = cells.iter().map(|&c| sample.draws[(k, c)]);
            match functional {
                Functional::Min => vals.fold(T::max_value().expect("bounded"), |a, b| a.min(b)),
                Functional::Max => vals.fold(T::min_value().expect("bounded"), |a, b| a.max(b)),
                Functional::Mean => {
                    vals.fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(cells.len())
                }
            }
        })
        .collect())
}
