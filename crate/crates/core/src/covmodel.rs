//! Multivariate residual model: sample covariance, distance tapering, PCA
//! truncation, and the multiplicative or additive correction that restores
//! the marginal variances.
//!
//! Fitted models keep only the truncated eigenpairs and a length-`S`
//! correction vector; the dense `S × S` covariance is never stored.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::io::CorrectionMode;
use crate::io::FieldSource;
use crate::marginal::MarginalModel;
use crate::real::Real;

/// Sample variances below this are treated as degenerate cells.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Eigenvalues below this fraction of the largest are dropped as numerical zeros.
pub const EIGEN_RELATIVE_CUTOFF: f64 = 1e-12;

/// Residuals `t − μ̂` of the training years for one month, `Y × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPanel<T: Real> {
    pub month: u32,
    /// Year the fitted model will forecast; every panel year precedes it.
    pub target_year: i32,
    pub years: Vec<i32>,
    pub data: DMatrix<T>,
}

impl<T: Real> ResidualPanel<T> {
    pub fn new(month: u32, target_year: i32, years: Vec<i32>, data: DMatrix<T>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::invalid(format!(
                "residual panel needs at least two years, got {}",
                data.nrows()
            )));
        }
        if years.len() != data.nrows() {
            return Err(Error::Dimension {
                expected: data.nrows(),
                found: years.len(),
            });
        }
        if let Some(&y) = years.iter().find(|&&y| y >= target_year) {
            return Err(Error::invalid(format!(
                "panel year {y} is not before target year {target_year}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("residual panel has non-finite entries"));
        }
        Ok(Self {
            month,
            target_year,
            years,
            data,
        })
    }

    /// Builds the panel from out-of-sample marginal models of past years:
    /// row `j` is `t_j − μ̂_j`.
    pub fn from_marginals<S: FieldSource<T> + ?Sized>(
        src: &S,
        target_year: i32,
        marginals: &[MarginalModel<T>],
    ) -> Result<Self> {
        let first = marginals
            .first()
            .ok_or_else(|| Error::invalid("no marginal models for residual panel"))?;
        let month = first.month;
        let s = src.sea_count();
        let mut data = DMatrix::zeros(marginals.len(), s);
        let mut years = Vec::with_capacity(marginals.len());
        for (row, m) in marginals.iter().enumerate() {
            if m.month != month {
                return Err(Error::invalid("residual panel mixes months"));
            }
            if m.len() != s {
                return Err(Error::Dimension {
                    expected: s,
                    found: m.len(),
                });
            }
            let obs = src
                .observation(m.year, month)
                .ok_or_else(|| Error::invalid(format!("no observation for {}-{month}", m.year)))?;
            for c in 0..s {
                data[(row, c)] = obs[c] - m.mu[c];
            }
            years.push(m.year);
        }
        Self::new(month, target_year, years, data)
    }

    pub fn sea_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn year_count(&self) -> usize {
        self.data.nrows()
    }

    /// Panel divided column-wise by `sigma`.
    pub fn standardized(&self, sigma: &[T]) -> Result<Self> {
        if sigma.len() != self.sea_count() {
            return Err(Error::Dimension {
                expected: self.sea_count(),
                found: sigma.len(),
            });
        }
        let mut data = self.data.clone();
        for (c, &s) in sigma.iter().enumerate() {
            if !(s > T::zero()) {
                return Err(Error::invalid(format!("sigma at cell {c} is not positive")));
            }
            data.column_mut(c).unscale_mut(s);
        }
        Ok(Self {
            data,
            ..self.clone()
        })
    }
}

/// `𝐒 = resᵀ res / (Y − 1)`; residuals are not re-centred (the model mean is 0).
pub fn sample_cov<T: Real>(panel: &ResidualPanel<T>) -> DMatrix<T> {
    let y = panel.year_count();
    let x = &panel.data;
    let mut s = x.tr_mul(x);
    s.unscale_mut(T::from_usize_lossy(y - 1));
    // blocked products are not exactly symmetric
    let n = s.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = (s[(i, j)] + s[(j, i)]) * T::lit(0.5);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Compactly supported taper
/// `φ(t) = (1 − t) sin(2πt)/(2πt) + (1 − cos 2πt)/(2π² t)` on `[0, 1)`, 0 beyond.
pub fn taper_weight<T: Real>(t: T) -> Result<T> {
    if !(t >= T::zero()) {
        return Err(Error::invalid(format!(
            "taper argument must be >= 0, got {t}"
        )));
    }
    if t == T::zero() {
        return Ok(T::one());
    }
    if t >= T::one() {
        return Ok(T::zero());
    }
    let two_pi_t = T::two_pi() * t;
    let half_sin = (T::pi() * t).sin();
    // 1 − cos x = 2 sin²(x/2), avoids cancellation for small t
    let one_minus_cos = T::lit(2.0) * half_sin * half_sin;
    let pi = T::pi();
    Ok((T::one() - t) * two_pi_t.sin() / two_pi_t + one_minus_cos / (T::lit(2.0) * pi * pi * t))
}

/// Schur product of `cov` with `φ(d_ij / L)`.
pub fn taper<T: Real>(cov: &DMatrix<T>, distances: &DMatrix<T>, range_km: T) -> Result<DMatrix<T>> {
    if !(range_km > T::zero()) {
        return Err(Error::invalid("taper range must be positive"));
    }
    if cov.shape() != distances.shape() || !cov.is_square() {
        return Err(Error::Dimension {
            expected: cov.nrows(),
            found: distances.nrows(),
        });
    }
    let n = cov.nrows();
    let mut out = cov.clone();
    for j in 0..n {
        for i in 0..n {
            if i != j {
                out[(i, j)] *= taper_weight(distances[(i, j)] / range_km)?;
            }
        }
    }
    Ok(out)
}

/// Leading eigenpairs of a symmetric PSD matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaFactors<T: Real> {
    /// `S × d`, orthonormal columns.
    pub eigvecs: DMatrix<T>,
    /// `d` eigenvalues, decreasing and positive.
    pub eigvals: Vec<T>,
    /// Sum of all retained-as-nonzero eigenvalues of the input.
    pub total_variance: T,
}

impl<T: Real> PcaFactors<T> {
    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    /// `Σ̃_ss = Σ_i λ_i u_{is}²`.
    pub fn diagonal(&self) -> Vec<T> {
        let s = self.eigvecs.nrows();
        (0..s)
            .map(|r| {
                self.eigvals
                    .iter()
                    .enumerate()
                    .fold(T::zero(), |acc, (i, &l)| {
                        acc + l * self.eigvecs[(r, i)] * self.eigvecs[(r, i)]
                    })
            })
            .collect()
    }

    /// Dense `U Λ Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut scaled = self.eigvecs.clone();
        for (i, &l) in self.eigvals.iter().enumerate() {
            scaled.column_mut(i).scale_mut(l);
        }
        scaled * self.eigvecs.transpose()
    }
}

/// Eigendecomposition truncated to the smallest `d` whose eigenvalues carry at
/// least `retained_fraction` of the total. Eigenvalues below
/// `EIGEN_RELATIVE_CUTOFF · λ_max` are discarded first. Each eigenvector is
/// signed so its largest-magnitude entry is positive.
pub fn pca_truncate<T: Real>(matrix: &DMatrix<T>, retained_fraction: T) -> Result<PcaFactors<T>> {
    if !matrix.is_square() {
        return Err(Error::invalid("PCA input must be square"));
    }
    if !(retained_fraction > T::zero() && retained_fraction <= T::one()) {
        return Err(Error::invalid("retained fraction must lie in (0, 1]"));
    }
    let n = matrix.nrows();
    let scale = matrix.amax();
    let asym = (matrix - matrix.transpose()).amax();
    let tol = T::lit(1e-10).max(T::default_epsilon() * T::lit(1e3));
    if asym > tol * scale.max(T::lit(f64::MIN_POSITIVE)) {
        return Err(Error::invalid(format!(
            "PCA input is not symmetric (asymmetry {asym})"
        )));
    }
    if n == 0 {
        return Ok(PcaFactors {
            eigvecs: DMatrix::zeros(0, 0),
            eigvals: Vec::new(),
            total_variance: T::zero(),
        });
    }
    let eig = SymmetricEigen::new(matrix.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let lambda_max = eig.eigenvalues[order[0]].max(T::zero());
    let cutoff = T::lit(EIGEN_RELATIVE_CUTOFF) * lambda_max;
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > cutoff && eig.eigenvalues[i] > T::zero())
        .collect();
    let total = kept
        .iter()
        .fold(T::zero(), |acc, &i| acc + eig.eigenvalues[i]);
    let target = retained_fraction * total * (T::one() - T::lit(1e-12));
    let mut d = 0;
    let mut acc = T::zero();
    while d < kept.len() && acc < target {
        acc += eig.eigenvalues[kept[d]];
        d += 1;
    }
    let mut eigvecs = DMatrix::zeros(n, d);
    let mut eigvals = Vec::with_capacity(d);
    for (col, &i) in kept[..d].iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let lead = v.iamax();
        let sign = if v[lead] < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        eigvecs.set_column(col, &(v * sign));
        eigvals.push(eig.eigenvalues[i]);
    }
    Ok(PcaFactors {
        eigvecs,
        eigvals,
        total_variance: total,
    })
}

/// Marginal variance lost by truncation: `full_diag_s − Σ̃_ss`, clipped at 0.
pub fn variance_deficiency<T: Real>(full_diag: &[T], factors: &PcaFactors<T>) -> Result<Vec<T>> {
    let truncated = factors.diagonal();
    if truncated.len() != full_diag.len() {
        return Err(Error::Dimension {
            expected: full_diag.len(),
            found: truncated.len(),
        });
    }
    Ok(full_diag
        .iter()
        .zip(&truncated)
        .map(|(&f, &t)| (f - t).max(T::zero()))
        .collect())
}

/// Marginal variance correction of a tapered-PCA model.
#[derive(Clone, Debug, PartialEq)]
pub enum Correction<T> {
    /// `Σ̂ = Ξ Σ̃ Ξ` with `Ξ = diag(xi)`; PCA was run on the correlation matrix.
    Multiplicative { xi: Vec<T> },
    /// `Σ̂ = Σ̃ + diag(eta)`; PCA was run on the covariance matrix.
    Additive { eta: Vec<T> },
}

impl<T> Correction<T> {
    pub fn mode(&self) -> CorrectionMode {
        match self {
            Correction::Multiplicative { .. } => CorrectionMode::Multiplicative,
            Correction::Additive { .. } => CorrectionMode::Additive,
        }
    }
}

/// Settings shared by both corrections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaperSettings {
    pub taper_range_km: f64,
    pub retained_fraction: f64,
}

impl Default for TaperSettings {
    fn default() -> Self {
        Self {
            taper_range_km: 2500.0,
            retained_fraction: 0.9,
        }
    }
}

/// Reduced-rank predictive covariance for one `(year, month)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaperedPcaModel<T: Real> {
    pub year: i32,
    pub month: u32,
    /// Last training year in the residual panel.
    pub trained_through: i32,
    pub eigvecs: DMatrix<T>,
    pub eigvals: Vec<T>,
    pub correction: Correction<T>,
    pub taper_range_km: f64,
    pub retained_fraction: f64,
    /// Cells whose sample variance was degenerate and were decoupled before PCA.
    pub degenerate_cells: Vec<usize>,
}

impl<T: Real> TaperedPcaModel<T> {
    pub fn sea_count(&self) -> usize {
        self.eigvecs.nrows()
    }

    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    pub(crate) fn factors(&self) -> PcaFactors<T> {
        PcaFactors {
            eigvecs: self.eigvecs.clone(),
            eigvals: self.eigvals.clone(),
            total_variance: self.eigvals.iter().fold(T::zero(), |a, &b| a + b),
        }
    }

    /// Diagonal of the implied covariance.
    pub fn implied_diagonal(&self) -> Vec<T> {
        let base = self.factors().diagonal();
        match &self.correction {
            Correction::Multiplicative { xi } => {
                base.iter().zip(xi).map(|(&b, &x)| b * x * x).collect()
            }
            Correction::Additive { eta } => base.iter().zip(eta).map(|(&b, &e)| b + e).collect(),
        }
    }

    /// Dense implied covariance. `O(S²)` memory; meant for checks at small `S`.
    pub fn implied_covariance(&self) -> DMatrix<T> {
        let mut cov = self.factors().reconstruct();
        match &self.correction {
            Correction::Multiplicative { xi } => {
                let xi = DVector::from_column_slice(xi);
                for j in 0..cov.ncols() {
                    for i in 0..cov.nrows() {
                        cov[(i, j)] *= xi[i] * xi[j];
                    }
                }
            }
            Correction::Additive { eta } => {
                for (i, &e) in eta.iter().enumerate() {
                    cov[(i, i)] += e;
                }
            }
        }
        cov
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sea_count();
        if self.eigvecs.ncols() != self.eigvals.len() {
            return Err(Error::Dimension {
                expected: self.eigvecs.ncols(),
                found: self.eigvals.len(),
            });
        }
        let corr_len = match &self.correction {
            Correction::Multiplicative { xi } => xi.len(),
            Correction::Additive { eta } => eta.len(),
        };
        if corr_len != s {
            return Err(Error::Dimension {
                expected: s,
                found: corr_len,
            });
        }
        if self.eigvals.iter().any(|&l| !(l > T::zero())) {
            return Err(Error::invalid("eigenvalues must be positive"));
        }
        if self.eigvals.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("eigenvalues must be in decreasing order"));
        }
        Ok(())
    }
}

fn check_inputs<T: Real>(
    panel: &ResidualPanel<T>,
    sigmas: &[T],
    distances: &DMatrix<T>,
) -> Result<()> {
    let s = panel.sea_count();
    if sigmas.len() != s {
        return Err(Error::Dimension {
            expected: s,
            found: sigmas.len(),
        });
    }
    if distances.shape() != (s, s) {
        return Err(Error::Dimension {
            expected: s,
            found: distances.nrows(),
        });
    }
    if let Some(i) = sigmas.iter().position(|&v| !(v > T::zero())) {
        return Err(Error::invalid(format!(
            "marginal sigma at cell {i} is not positive"
        )));
    }
    Ok(())
}

/// Sample covariance → correlation → taper → PCA, then `Ξ_s = σ̂_s / √Σ̃_ss`
/// so the implied diagonal equals `σ̂²` exactly.
pub fn correct_multiplicative<T: Real>(
    panel: &ResidualPanel<T>,
    sigmas: &[T],
    distances: &DMatrix<T>,
    settings: &TaperSettings,
) -> Result<TaperedPcaModel<T>> {
    check_inputs(panel, sigmas, distances)?;
    let cov = sample_cov(panel);
    let s = cov.nrows();
    let eps = T::lit(DEGENERATE_VARIANCE);
    let degenerate: Vec<usize> = (0..s).filter(|&i| cov[(i, i)] < eps).collect();
    if !degenerate.is_empty() {
        log::warn!("cells with degenerate sample variance decoupled: {degenerate:?}");
    }
    let inv_sd: Vec<T> = (0..s)
        .map(|i| {
            if cov[(i, i)] < eps {
                T::zero()
            } else {
                T::one() / cov[(i, i)].sqrt()
            }
        })
        .collect();
    let mut corr = DMatrix::from_fn(s, s, |i, j| cov[(i, j)] * inv_sd[i] * inv_sd[j]);
    for i in 0..s {
        corr[(i, i)] = T::one();
    }
    let tapered = taper(&corr, distances, T::lit(settings.taper_range_km))?;
    let factors = pca_truncate(&tapered, T::lit(settings.retained_fraction))?;
    let diag = factors.diagonal();
    let tiny = T::lit(1e-14);
    let mut xi = Vec::with_capacity(s);
    for (i, (&d, &sig)) in diag.iter().zip(sigmas).enumerate() {
        if !(d > tiny) {
            return Err(Error::Numerical(format!(
                "truncated variance vanishes at sea cell {i}; raise the retained fraction"
            )));
        }
        xi.push(sig / d.sqrt());
    }
    Ok(TaperedPcaModel {
        year: panel.target_year,
        month: panel.month,
        trained_through: *panel.years.iter().max().expect("panel has rows"),
        eigvecs: factors.eigvecs,
        eigvals: factors.eigvals,
        correction: Correction::Multiplicative { xi },
        taper_range_km: settings.taper_range_km,
        retained_fraction: settings.retained_fraction,
        degenerate_cells: degenerate,
    })
}

/// Sample covariance → taper → PCA, then the nugget
/// `η_s = max(σ̂²_s − Σ̃_ss, 0)` on the diagonal.
pub fn correct_additive<T: Real>(
    panel: &ResidualPanel<T>,
    sigmas: &[T],
    distances: &DMatrix<T>,
    settings: &TaperSettings,
) -> Result<TaperedPcaModel<T>> {
    check_inputs(panel, sigmas, distances)?;
    let cov = sample_cov(panel);
    let tapered = taper(&cov, distances, T::lit(settings.taper_range_km))?;
    let factors = pca_truncate(&tapered, T::lit(settings.retained_fraction))?;
    let diag = factors.diagonal();
    let eta = diag
        .iter()
        .zip(sigmas)
        .map(|(&d, &sig)| (sig * sig - d).max(T::zero()))
        .collect();
    Ok(TaperedPcaModel {
        year: panel.target_year,
        month: panel.month,
        trained_through: *panel.years.iter().max().expect("panel has rows"),
        eigvecs: factors.eigvecs,
        eigvals: factors.eigvals,
        correction: Correction::Additive { eta },
        taper_range_km: settings.taper_range_km,
        retained_fraction: settings.retained_fraction,
        degenerate_cells: Vec::new(),
    })
}

/// Fits either correction.
pub fn fit_tapered_pca<T: Real>(
    mode: CorrectionMode,
    panel: &ResidualPanel<T>,
    sigmas: &[T],
    distances: &DMatrix<T>,
    settings: &TaperSettings,
) -> Result<TaperedPcaModel<T>> {
    match mode {
        CorrectionMode::Multiplicative => {
            correct_multiplicative(panel, sigmas, distances, settings)
        }
        CorrectionMode::Additive => correct_additive(panel, sigmas, distances, settings),
    }
}
