use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::real::Real;

/// Freezing point of sea water used as the physical floor, °C.
pub const OBSERVATION_FLOOR: f64 = -1.79;

const MANIFEST_FORMAT: &str = "tapercast-archive";
const MANIFEST_VERSION: u32 = 1;
const MASK_FILE: &str = "mask.u8";

/// Read access to observed fields and ensemble forecasts.
///
/// Estimators take `&impl FieldSource` rather than a concrete archive so
/// that tests can wrap an archive and audit which years are touched.
pub trait FieldSource<T: Real>: Sync {
    fn grid(&self) -> &Grid;
    fn first_year(&self) -> i32;
    fn last_year(&self) -> i32;
    fn months(&self) -> &[u32];
    /// Ensemble size `N`.
    fn members(&self) -> usize;
    fn observation(&self, year: i32, month: u32) -> Option<&[T]>;
    /// Raw ensemble, `N × S` row-major.
    fn forecast(&self, year: i32, month: u32) -> Option<&[T]>;
    fn forecast_mean(&self, year: i32, month: u32) -> Option<&[T]>;
    /// Ensemble sample variance (divisor `N − 1`).
    fn forecast_variance(&self, year: i32, month: u32) -> Option<&[T]>;

    fn sea_count(&self) -> usize {
        self.grid().sea_count()
    }
}

/// Observations and ensemble forecasts over a rectangular `(year, month)` range.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldArchive<T> {
    grid: Grid,
    first_year: i32,
    last_year: i32,
    months: Vec<u32>,
    members: usize,
    observations: Vec<Vec<T>>,
    forecasts: Vec<Vec<T>>,
    means: Vec<Vec<T>>,
    variances: Vec<Vec<T>>,
}

impl<T: Real> FieldArchive<T> {
    /// Builds and validates an archive. `observations` and `forecasts` are
    /// indexed year-major: slot `(year − first_year) · months.len() + k` for
    /// the `k`-th month. Forecast slots hold `N × S` values row-major.
    pub fn new(
        grid: Grid,
        first_year: i32,
        months: Vec<u32>,
        members: usize,
        observations: Vec<Vec<T>>,
        forecasts: Vec<Vec<T>>,
    ) -> Result<Self> {
        if months.is_empty() {
            return Err(Error::invalid("archive needs at least one month"));
        }
        if months.iter().any(|m| !(1..=12).contains(m)) {
            return Err(Error::invalid("months must lie in 1..=12"));
        }
        if months.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("months must be strictly increasing"));
        }
        if members < 2 {
            return Err(Error::invalid("ensembles need at least two members"));
        }
        if observations.is_empty() || observations.len() % months.len() != 0 {
            return Err(Error::invalid(
                "observation slots must cover whole years for every month",
            ));
        }
        if forecasts.len() != observations.len() {
            return Err(Error::Dimension {
                expected: observations.len(),
                found: forecasts.len(),
            });
        }
        let n_years = observations.len() / months.len();
        let last_year = first_year + n_years as i32 - 1;
        let s = grid.sea_count();
        let floor = T::lit(OBSERVATION_FLOOR);
        for (slot, (obs, fc)) in observations.iter().zip(&forecasts).enumerate() {
            let year = first_year + (slot / months.len()) as i32;
            let month = months[slot % months.len()];
            if obs.len() != s {
                return Err(Error::Load(format!(
                    "observation for year {year}, month {month} has {} values, expected {s}",
                    obs.len()
                )));
            }
            if fc.len() != s * members {
                return Err(Error::Load(format!(
                    "forecast for year {year}, month {month} has {} values, expected {}",
                    fc.len(),
                    s * members
                )));
            }
            if let Some(i) = obs.iter().position(|v| !v.is_finite()) {
                return Err(Error::Load(format!(
                    "non-finite observation at sea cell {i}, year {year}, month {month}"
                )));
            }
            if let Some(i) = obs.iter().position(|&v| v < floor) {
                return Err(Error::Load(format!(
                    "observation {} below floor {OBSERVATION_FLOOR} at sea cell {i}, year {year}, month {month}",
                    obs[i]
                )));
            }
            if let Some(i) = fc.iter().position(|v| !v.is_finite()) {
                return Err(Error::Load(format!(
                    "non-finite forecast at member {}, sea cell {}, year {year}, month {month}",
                    i / s,
                    i % s
                )));
            }
        }
        let (means, variances) = forecasts
            .iter()
            .map(|fc| ensemble_moments(fc, members, s))
            .unzip();
        Ok(Self {
            grid,
            first_year,
            last_year,
            months,
            members,
            observations,
            forecasts,
            means,
            variances,
        })
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_year..=self.last_year
    }

    fn slot(&self, year: i32, month: u32) -> Option<usize> {
        if year < self.first_year || year > self.last_year {
            return None;
        }
        let k = self.months.iter().position(|&m| m == month)?;
        Some((year - self.first_year) as usize * self.months.len() + k)
    }

    /// Converts the stored values to another scalar type.
    pub fn cast<U: Real>(&self) -> FieldArchive<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        FieldArchive::new(
            self.grid.clone(),
            self.first_year,
            self.months.clone(),
            self.members,
            self.observations.iter().map(conv).collect(),
            self.forecasts.iter().map(conv).collect(),
        )
        .expect("cast of a valid archive stays valid")
    }
}

fn ensemble_moments<T: Real>(fc: &[T], n: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let nf = T::from_usize_lossy(n);
    let mut mean = vec![T::zero(); s];
    for member in fc.chunks_exact(s) {
        for (m, &v) in mean.iter_mut().zip(member) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![T::zero(); s];
    for member in fc.chunks_exact(s) {
        for ((acc, &v), &m) in var.iter_mut().zip(member).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let denom = T::from_usize_lossy(n - 1);
    var.iter_mut().for_each(|v| *v /= denom);
    (mean, var)
}

impl<T: Real> FieldSource<T> for FieldArchive<T> {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn first_year(&self) -> i32 {
        self.first_year
    }
    fn last_year(&self) -> i32 {
        self.last_year
    }
    fn months(&self) -> &[u32] {
        &self.months
    }
    fn members(&self) -> usize {
        self.members
    }
    fn observation(&self, year: i32, month: u32) -> Option<&[T]> {
        self.slot(year, month)
            .map(|i| self.observations[i].as_slice())
    }
    fn forecast(&self, year: i32, month: u32) -> Option<&[T]> {
        self.slot(year, month).map(|i| self.forecasts[i].as_slice())
    }
    fn forecast_mean(&self, year: i32, month: u32) -> Option<&[T]> {
        self.slot(year, month).map(|i| self.means[i].as_slice())
    }
    fn forecast_variance(&self, year: i32, month: u32) -> Option<&[T]> {
        self.slot(year, month).map(|i| self.variances[i].as_slice())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    lon: Vec<f64>,
    lat: Vec<f64>,
    #[serde(default)]
    mask: Option<String>,
    first_year: i32,
    last_year: i32,
    months: Vec<u32>,
    members: usize,
}

/// Name of an observation field file.
pub fn observation_file(year: i32, month: u32) -> String {
    format!("obs_{year}_{month}.f32")
}

/// Name of a forecast member field file.
pub fn forecast_file(year: i32, month: u32, member: usize) -> String {
    format!("fcst_{year}_{month}_{member}.f32")
}

/// Reads a raw little-endian `f32` field file.
pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Load(format!(
            "{} has {} bytes, not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes values as a raw little-endian `f32` field file.
pub fn write_f32_file<T: Real>(path: &Path, values: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and validates the archive described by a manifest.
pub fn load_archive<T: Real>(manifest_path: &Path) -> Result<FieldArchive<T>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Load(format!(
            "unknown manifest format {:?}",
            manifest.format
        )));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Load(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    if manifest.last_year < manifest.first_year {
        return Err(Error::Load("last_year precedes first_year".into()));
    }
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let n_cells = manifest.lon.len() * manifest.lat.len();
    let mask = match &manifest.mask {
        Some(name) => {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != n_cells {
                return Err(Error::Load(format!(
                    "mask has {} cells, grid has {n_cells}",
                    bytes.len()
                )));
            }
            bytes.iter().map(|&b| b != 0).collect()
        }
        None => vec![true; n_cells],
    };
    let grid = Grid::new(manifest.lon, manifest.lat, mask)
        .map_err(|e| Error::Load(format!("grid: {e}")))?;
    let s = grid.sea_count();
    let mut observations = Vec::new();
    let mut forecasts = Vec::new();
    for year in manifest.first_year..=manifest.last_year {
        for &month in &manifest.months {
            let path = dir.join(observation_file(year, month));
            if !path.exists() {
                return Err(Error::Load(format!(
                    "missing observation file for year {year}, month {month}: {}",
                    path.display()
                )));
            }
            observations.push(read_field(&path, s)?);
            let mut fc = Vec::with_capacity(s * manifest.members);
            for member in 0..manifest.members {
                let path = dir.join(forecast_file(year, month, member));
                if !path.exists() {
                    return Err(Error::Load(format!(
                        "missing forecast file for year {year}, month {month}, member {member}: {}",
                        path.display()
                    )));
                }
                fc.extend(read_field::<T>(&path, s)?);
            }
            forecasts.push(fc);
        }
    }
    FieldArchive::new(
        grid,
        manifest.first_year,
        manifest.months,
        manifest.members,
        observations,
        forecasts,
    )
}

fn read_field<T: Real>(path: &Path, s: usize) -> Result<Vec<T>> {
    let raw = read_f32_file(path)?;
    if raw.len() != s {
        return Err(Error::Load(format!(
            "{} holds {} values, expected {s}",
            path.display(),
            raw.len()
        )));
    }
    Ok(raw.into_iter().map(|v| T::lit(v as f64)).collect())
}

/// Writes an archive as a manifest plus field files into `dir`.
/// Returns the manifest path. Values are stored at `f32` precision.
pub fn save_archive<T: Real>(archive: &FieldArchive<T>, dir: &Path) -> Result<PathBuf> {
    if archive.months.is_empty() {
        return Err(Error::invalid("cannot save an archive without months"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = &archive.grid;
    let mask = if grid.sea_mask().iter().all(|&b| b) {
        None
    } else {
        let bytes: Vec<u8> = grid.sea_mask().iter().map(|&b| b as u8).collect();
        let path = dir.join(MASK_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Some(MASK_FILE.to_string())
    };
    let s = grid.sea_count();
    for year in archive.years() {
        for &month in &archive.months {
            let obs = archive.observation(year, month).expect("slot in range");
            write_f32_file(&dir.join(observation_file(year, month)), obs)?;
            let fc = archive.forecast(year, month).expect("slot in range");
            for (member, values) in fc.chunks_exact(s).enumerate() {
                write_f32_file(&dir.join(forecast_file(year, month, member)), values)?;
            }
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        lon: grid.lon().to_vec(),
        lat: grid.lat().to_vec(),
        mask,
        first_year: archive.first_year,
        last_year: archive.last_year,
        months: archive.months.clone(),
        members: archive.members,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Load(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
