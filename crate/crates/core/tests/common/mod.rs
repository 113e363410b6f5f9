#![allow(dead_code)]

use tapercast::io::FieldArchive;
use tapercast::Grid;

/// Archive on a regular 1°-spaced all-sea grid filled from closures.
pub fn archive_from_fn(
    n_lon: usize,
    n_lat: usize,
    first_year: i32,
    years: usize,
    months: &[u32],
    members: usize,
    obs: impl Fn(i32, u32, usize) -> f64,
    fc: impl Fn(i32, u32, usize, usize) -> f64,
) -> FieldArchive<f64> {
    let grid = Grid::regular(0.0, 1.0, n_lon, 0.0, 1.0, n_lat).unwrap();
    let s = grid.sea_count();
    let mut observations = Vec::new();
    let mut forecasts = Vec::new();
    for y in first_year..first_year + years as i32 {
        for &m in months {
            observations.push((0..s).map(|c| obs(y, m, c)).collect());
            let mut f = Vec::with_capacity(members * s);
            for k in 0..members {
                for c in 0..s {
                    f.push(fc(y, m, k, c));
                }
            }
            forecasts.push(f);
        }
    }
    FieldArchive::new(
        grid,
        first_year,
        months.to_vec(),
        members,
        observations,
        forecasts,
    )
    .unwrap()
}

/// Archive whose ensemble mean minus observation equals `err(year, month, cell)`
/// and whose members spread symmetrically by `spread` around the mean.
pub fn archive_with_errors(
    cells: usize,
    first_year: i32,
    years: usize,
    months: &[u32],
    err: impl Fn(i32, u32, usize) -> f64,
) -> FieldArchive<f64> {
    archive_from_fn(
        cells,
        1,
        first_year,
        years,
        months,
        2,
        |y, m, c| 10.0 + 0.1 * c as f64 + 0.01 * (y - first_year) as f64 + 0.2 * m as f64,
        |y, m, k, c| {
            let t = 10.0 + 0.1 * c as f64 + 0.01 * (y - first_year) as f64 + 0.2 * m as f64;
            t + err(y, m, c) + if k == 0 { 0.5 } else { -0.5 }
        },
    )
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
