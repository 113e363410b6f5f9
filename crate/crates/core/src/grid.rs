//! Regular longitude/latitude grids with a sea mask, and great-circle geometry.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::real::Real;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A longitude/latitude grid. Cells are identified with their centre
/// coordinates and stored row-major: row = latitude index, column =
/// longitude index. Only cells flagged in the sea mask take part in any
/// computation; they are numbered `0..S` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    lon: Vec<f64>,
    lat: Vec<f64>,
    sea_mask: Vec<bool>,
    sea_cells: Vec<usize>,
    cell_to_sea: Vec<Option<usize>>,
}

impl Grid {
    pub fn new(lon: Vec<f64>, lat: Vec<f64>, sea_mask: Vec<bool>) -> Result<Self> {
        if lon.is_empty() || lat.is_empty() {
            return Err(Error::invalid("grid needs at least one row and column"));
        }
        check_axis(&lon, "lon", -180.0, 180.0, false)?;
        check_axis(&lat, "lat", -90.0, 90.0, true)?;
        if sea_mask.len() != lon.len() * lat.len() {
            return Err(Error::Dimension {
                expected: lon.len() * lat.len(),
                found: sea_mask.len(),
            });
        }
        let mut sea_cells = Vec::new();
        let mut cell_to_sea = vec![None; sea_mask.len()];
        for (cell, &sea) in sea_mask.iter().enumerate() {
            if sea {
                cell_to_sea[cell] = Some(sea_cells.len());
                sea_cells.push(cell);
            }
        }
        if sea_cells.is_empty() {
            return Err(Error::invalid("sea mask selects no cells"));
        }
        Ok(Self {
            lon,
            lat,
            sea_mask,
            sea_cells,
            cell_to_sea,
        })
    }

    /// Grid with every cell flagged as sea.
    pub fn all_sea(lon: Vec<f64>, lat: Vec<f64>) -> Result<Self> {
        let n = lon.len() * lat.len();
        Self::new(lon, lat, vec![true; n])
    }

    /// Evenly spaced grid of `n_lon × n_lat` cell centres.
    pub fn regular(
        lon_start: f64,
        lon_step: f64,
        n_lon: usize,
        lat_start: f64,
        lat_step: f64,
        n_lat: usize,
    ) -> Result<Self> {
        let lon = (0..n_lon)
            .map(|i| lon_start + lon_step * i as f64)
            .collect();
        let lat = (0..n_lat)
            .map(|j| lat_start + lat_step * j as f64)
            .collect();
        Self::all_sea(lon, lat)
    }

    pub fn n_lon(&self) -> usize {
        self.lon.len()
    }

    pub fn n_lat(&self) -> usize {
        self.lat.len()
    }

    pub fn lon(&self) -> &[f64] {
        &self.lon
    }

    pub fn lat(&self) -> &[f64] {
        &self.lat
    }

    pub fn sea_mask(&self) -> &[bool] {
        &self.sea_mask
    }

    /// Number of sea cells, `S`.
    pub fn sea_count(&self) -> usize {
        self.sea_cells.len()
    }

    /// Row-major cell index of a sea index.
    pub fn cell_of(&self, sea: usize) -> Option<usize> {
        self.sea_cells.get(sea).copied()
    }

    pub fn sea_index_of(&self, cell: usize) -> Option<usize> {
        self.cell_to_sea.get(cell).copied().flatten()
    }

    /// `(lon, lat)` in degrees of a sea cell.
    pub fn coords(&self, sea: usize) -> Option<(f64, f64)> {
        let cell = self.cell_of(sea)?;
        let n_lon = self.lon.len();
        Some((self.lon[cell % n_lon], self.lat[cell / n_lon]))
    }

    /// Great-circle distance matrix between the given sea cells.
    pub fn pairwise_distances<T: Real>(&self, subset: &[usize]) -> Result<DMatrix<T>> {
        let coords = subset
            .iter()
            .map(|&i| {
                self.coords(i)
                    .map(|(lo, la)| (T::lit(lo), T::lit(la)))
                    .ok_or_else(|| Error::invalid(format!("sea index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = coords.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = great_circle_distance(coords[i], coords[j])?;
                out[(i, j)] = d;
                out[(j, i)] = d;
            }
        }
        Ok(out)
    }

    /// Distances between all sea cells.
    pub fn sea_distances<T: Real>(&self) -> DMatrix<T> {
        let all: Vec<usize> = (0..self.sea_count()).collect();
        self.pairwise_distances(&all)
            .expect("sea indices are valid by construction")
    }
}

fn check_axis(values: &[f64], name: &str, lo: f64, hi: f64, hi_inclusive: bool) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        let in_range = v >= lo && if hi_inclusive { v <= hi } else { v < hi };
        if !v.is_finite() || !in_range {
            return Err(Error::invalid(format!(
                "{name}[{i}] = {v} outside valid range"
            )));
        }
        if i > 0 && v <= values[i - 1] {
            return Err(Error::invalid(format!(
                "{name} must be strictly increasing"
            )));
        }
    }
    Ok(())
}

/// Haversine distance in km between two `(lon, lat)` points in degrees.
pub fn great_circle_distance<T: Real>(a: (T, T), b: (T, T)) -> Result<T> {
    for &(lon, lat) in &[a, b] {
        let lon_ok = lon >= T::lit(-180.0) && lon <= T::lit(180.0);
        let lat_ok = lat >= T::lit(-90.0) && lat <= T::lit(90.0);
        if !lon_ok || !lat_ok {
            return Err(Error::invalid(format!(
                "coordinate ({lon}, {lat}) out of range"
            )));
        }
    }
    let to_rad = T::pi() / T::lit(180.0);
    let (lon1, lat1) = (a.0 * to_rad, a.1 * to_rad);
    let (lon2, lat2) = (b.0 * to_rad, b.1 * to_rad);
    let half = T::lit(0.5);
    let s_lat = ((lat2 - lat1) * half).sin();
    let s_lon = ((lon2 - lon1) * half).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    let h = h.min(T::one()).max(T::zero());
    Ok(T::lit(2.0 * EARTH_RADIUS_KM) * h.sqrt().asin())
}
