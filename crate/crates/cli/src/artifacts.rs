//! Artifact file formats that only the pipeline uses: stored ensembles of
//! draws and the small tab-separated tables passed between stages.
//!
//! Draw files (`*.draws`), little-endian:
//!
//! ```text
//! magic    4 bytes  "TPCS"
//! version  u32      1
//! year     i32
//! month    u32
//! trained  i32      last year whose observations entered the forecast
//! rows     u64      draws M
//! cols     u64      sea cells S
//! values   f32×(M·S) row-major
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{io_error, CliError, CliResult};

const DRAWS_MAGIC: &[u8; 4] = b"TPCS";
const DRAWS_VERSION: u32 = 1;
const DRAWS_HEADER: usize = 4 + 4 + 4 + 4 + 4 + 8 + 8;

/// A stored `M × S` ensemble with the metadata needed for the expanding-window audit.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDraws {
    pub year: i32,
    pub month: u32,
    pub trained_through: i32,
    pub draws: DMatrix<f64>,
}

pub fn write_draws(path: &Path, d: &StoredDraws) -> CliResult<()> {
    let (m, s) = d.draws.shape();
    let mut buf = Vec::with_capacity(DRAWS_HEADER + 4 * m * s);
    buf.extend_from_slice(DRAWS_MAGIC);
    buf.extend_from_slice(&DRAWS_VERSION.to_le_bytes());
    buf.extend_from_slice(&d.year.to_le_bytes());
    buf.extend_from_slice(&d.month.to_le_bytes());
    buf.extend_from_slice(&d.trained_through.to_le_bytes());
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    buf.extend_from_slice(&(s as u64).to_le_bytes());
    for i in 0..m {
        for j in 0..s {
            buf.extend_from_slice(&(d.draws[(i, j)] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_error(path, e))
}

pub fn read_draws(path: &Path) -> CliResult<StoredDraws> {
    let buf = fs::read(path).map_err(|e| io_error(path, e))?;
    let bad = |msg: &str| CliError::Data(format!("{}: {msg}", path.display()));
    if buf.len() < DRAWS_HEADER || &buf[..4] != DRAWS_MAGIC {
        return Err(bad("not a draws file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != DRAWS_VERSION {
        return Err(bad(&format!("unsupported draws version {version}")));
    }
    let year = u32_at(8) as i32;
    let month = u32_at(12);
    let trained_through = u32_at(16) as i32;
    let (m, s) = (u64_at(20) as usize, u64_at(28) as usize);
    let expected = m
        .checked_mul(s)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(DRAWS_HEADER));
    if expected != Some(buf.len()) {
        return Err(bad("length does not match header"));
    }
    let body = &buf[DRAWS_HEADER..];
    let draws = DMatrix::from_fn(m, s, |i, j| {
        let o = 4 * (i * s + j);
        f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as f64
    });
    Ok(StoredDraws {
        year,
        month,
        trained_through,
        draws,
    })
}

/// Tab-separated table with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.render()).map_err(|e| io_error(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Data(format!("{}: empty table", path.display())))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(CliError::Data(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> CliResult<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("table has no column {name:?}")))
    }
}

pub fn parse_field<T: std::str::FromStr>(value: &str, what: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Data(format!("cannot parse {what} from {value:?}")))
}
