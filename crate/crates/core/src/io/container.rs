//! Versioned binary container for fitted models.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes  "TPCM"
//! version    u32      1
//! kind       u8       1 marginal, 2 tapered PCA, 3 exponential-with-nugget
//! year       i32
//! month      u32
//! trained    i32      last training year
//! payload    kind specific, see below
//! ```
//!
//! Marginal: `method u8, S u64, mu f64×S, sigma f64×S`.
//!
//! Tapered PCA: `S u64, d u64, eigvecs f64×(S·d) column-major, eigvals f64×d,
//! correction u8 (1 multiplicative, 2 additive), correction f64×S,
//! taper_range_km f64, retained_fraction f64, n_degenerate u64, degenerate u64×n`.
//!
//! Exponential-with-nugget: `theta f64, range_km f64, S u64, sigma f64×S`.
//!
//! Values are stored as f64 regardless of the in-memory scalar, so f32 and
//! f64 models both round-trip bit-exactly.

use std::path::Path;

use nalgebra::DMatrix;

use crate::covmodel::{Correction, TaperedPcaModel};
use crate::error::{Error, Result};
use crate::geostat::ExpNuggetModel;
use crate::marginal::{MarginalMethod, MarginalModel};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"TPCM";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredModel<T: Real> {
    Marginal(MarginalModel<T>),
    TaperedPca(TaperedPcaModel<T>),
    ExpNugget(ExpNuggetModel<T>),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn reals<T: Real>(&mut self, v: &[T]) {
        for x in v {
            self.f64(x.as_f64());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Container("truncated model container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        // Every length prefixes at least one byte per element.
        if v > self.buf.len() as u64 {
            return Err(Error::Container(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn reals<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        (0..n).map(|_| self.f64().map(T::lit)).collect()
    }
}

impl<T: Real> StoredModel<T> {
    fn kind(&self) -> u8 {
        match self {
            StoredModel::Marginal(_) => 1,
            StoredModel::TaperedPca(_) => 2,
            StoredModel::ExpNugget(_) => 3,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CONTAINER_VERSION);
        w.u8(self.kind());
        match self {
            StoredModel::Marginal(m) => {
                w.i32(m.year);
                w.u32(m.month);
                w.i32(m.trained_through);
                w.u8(m.method.code());
                w.u64(m.mu.len());
                w.reals(&m.mu);
                w.reals(&m.sigma);
            }
            StoredModel::TaperedPca(m) => {
                w.i32(m.year);
                w.u32(m.month);
                w.i32(m.trained_through);
                w.u64(m.eigvecs.nrows());
                w.u64(m.eigvecs.ncols());
                w.reals(m.eigvecs.as_slice());
                w.reals(&m.eigvals);
                match &m.correction {
                    Correction::Multiplicative { xi } => {
                        w.u8(1);
                        w.reals(xi);
                    }
                    Correction::Additive { eta } => {
                        w.u8(2);
                        w.reals(eta);
                    }
                }
                w.f64(m.taper_range_km);
                w.f64(m.retained_fraction);
                w.u64(m.degenerate_cells.len());
                for &c in &m.degenerate_cells {
                    w.u64(c);
                }
            }
            StoredModel::ExpNugget(m) => {
                w.i32(m.year);
                w.u32(m.month);
                w.i32(m.trained_through);
                w.f64(m.theta);
                w.f64(m.range_km);
                w.u64(m.sigma.len());
                w.reals(&m.sigma);
            }
        }
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Container("not a model container".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Container(format!(
                "container version {version}, expected {CONTAINER_VERSION}"
            )));
        }
        let kind = r.u8()?;
        let year = r.i32()?;
        let month = r.u32()?;
        let trained_through = r.i32()?;
        let model = match kind {
            1 => {
                let code = r.u8()?;
                let method = MarginalMethod::from_code(code)
                    .ok_or_else(|| Error::Container(format!("unknown marginal method {code}")))?;
                let s = r.len()?;
                let mu = r.reals(s)?;
                let sigma = r.reals(s)?;
                StoredModel::Marginal(MarginalModel::new(
                    year,
                    month,
                    method,
                    trained_through,
                    mu,
                    sigma,
                )?)
            }
            2 => {
                let s = r.len()?;
                let d = r.len()?;
                let vecs = r.reals::<T>(
                    s.checked_mul(d)
                        .ok_or_else(|| Error::Container("size overflow".into()))?,
                )?;
                let eigvecs = DMatrix::from_column_slice(s, d, &vecs);
                let eigvals = r.reals(d)?;
                let correction = match r.u8()? {
                    1 => Correction::Multiplicative { xi: r.reals(s)? },
                    2 => Correction::Additive { eta: r.reals(s)? },
                    c => return Err(Error::Container(format!("unknown correction tag {c}"))),
                };
                let taper_range_km = r.f64()?;
                let retained_fraction = r.f64()?;
                let n = r.len()?;
                let degenerate_cells = (0..n).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
                let m = TaperedPcaModel {
                    year,
                    month,
                    trained_through,
                    eigvecs,
                    eigvals,
                    correction,
                    taper_range_km,
                    retained_fraction,
                    degenerate_cells,
                };
                m.validate()?;
                StoredModel::TaperedPca(m)
            }
            3 => {
                let theta = r.f64()?;
                let range_km = r.f64()?;
                let s = r.len()?;
                let sigma = r.reals(s)?;
                StoredModel::ExpNugget(ExpNuggetModel::new(
                    year,
                    month,
                    trained_through,
                    theta,
                    range_km,
                    sigma,
                )?)
            }
            k => return Err(Error::Container(format!("unknown model kind {k}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Container("trailing bytes after model".into()));
        }
        Ok(model)
    }
}

pub fn save_model<T: Real>(model: &StoredModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, model.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Real>(path: &Path) -> Result<StoredModel<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    StoredModel::decode(&buf)
}
