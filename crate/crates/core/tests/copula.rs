use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapercast::copula::*;
use tapercast::marginal::{MarginalMethod, MarginalModel};
use tapercast::real::std_normal_quantile;

fn marginal(mu: Vec<f64>, sigma: Vec<f64>) -> MarginalModel<f64> {
    MarginalModel::new(2001, 1, MarginalMethod::Ema, 2000, mu, sigma).unwrap()
}

fn quantiles(mu: f64, sd: f64, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|k| mu + sd * std_normal_quantile(k as f64 / (n + 1) as f64))
        .collect()
}

/// Zero-based ranks by brute-force counting (values assumed distinct).
fn ranks(col: &[f64]) -> Vec<usize> {
    col.iter()
        .map(|v| col.iter().filter(|w| *w < v).count())
        .collect()
}

#[test]
fn ecc_three_members() {
    let m = marginal(vec![10.0], vec![2.0]);
    let raw = DMatrix::from_column_slice(3, 1, &[5.0, 1.0, 9.0]);
    let out = ecc(&m, &raw, None, 1).unwrap();
    let q = quantiles(10.0, 2.0, 3);
    assert_eq!(
        out.column(0).iter().copied().collect::<Vec<_>>(),
        vec![q[1], q[0], q[2]]
    );
    assert_eq!(q[1], 10.0);
}

#[test]
fn sorted_raw_gives_sorted_quantiles() {
    let m = marginal(vec![0.0, 5.0], vec![1.0, 0.5]);
    let raw = DMatrix::from_fn(6, 2, |i, j| (i * (j + 1)) as f64);
    let out = ecc(&m, &raw, None, 3).unwrap();
    for c in 0..2 {
        let want = quantiles(m.mu[c], m.sigma[c], 6);
        assert_eq!(out.column(c).iter().copied().collect::<Vec<_>>(), want);
    }
}

#[test]
fn random_instances_keep_ranks_and_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(2..12);
        let s = rng.random_range(1..8);
        let raw = DMatrix::from_fn(n, s, |_, _| rng.random_range(-5.0..5.0));
        let m = marginal(
            (0..s).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..s).map(|_| rng.random_range(0.1..3.0)).collect(),
        );
        let out = ecc(&m, &raw, None, rng.random()).unwrap();
        for c in 0..s {
            let raw_col: Vec<f64> = raw.column(c).iter().copied().collect();
            let out_col: Vec<f64> = out.column(c).iter().copied().collect();
            assert_eq!(ranks(&raw_col), ranks(&out_col));
            let mut sorted = out_col.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want = quantiles(m.mu[c], m.sigma[c], n);
            for (a, b) in sorted.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn template_matches_sort_and_reindex_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vals = DMatrix::from_fn(9, 5, |_, _| rng.random_range(0.0..1.0));
    let t = RankTemplate::from_values(&vals, TemplateSource::RawEnsemble, 0).unwrap();
    for c in 0..5 {
        let mut idx: Vec<usize> = (0..9).collect();
        idx.sort_by(|&a, &b| vals[(a, c)].partial_cmp(&vals[(b, c)]).unwrap());
        assert_eq!(t.order(c), &idx[..]);
        let r = t.ranks(c);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(r[i], k);
        }
    }
}

#[test]
fn ties_are_broken_at_random_but_reproducibly() {
    let vals = DMatrix::from_element(4, 1, 1.0);
    let a = RankTemplate::from_values(&vals, TemplateSource::RawEnsemble, 5).unwrap();
    let b = RankTemplate::from_values(&vals, TemplateSource::RawEnsemble, 5).unwrap();
    assert_eq!(a, b);
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..200 {
        let t = RankTemplate::from_values(&vals, TemplateSource::RawEnsemble, seed).unwrap();
        seen.insert(t.order(0).to_vec());
        let mut sorted = t.order(0).to_vec();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }
    assert!(
        seen.len() > 12,
        "only {} of 24 permutations seen",
        seen.len()
    );
}

#[test]
fn schaake_two_years() {
    let m = marginal(vec![3.0, -1.0], vec![1.0, 2.0]);
    let hist = DMatrix::from_row_slice(2, 2, &[7.0, 1.0, 4.0, 2.0]);
    let out = schaake(&m, &hist, None, 1).unwrap();
    let q0 = quantiles(3.0, 1.0, 2);
    let q1 = quantiles(-1.0, 2.0, 2);
    assert_eq!(out[(0, 0)], q0[1]);
    assert_eq!(out[(1, 0)], q0[0]);
    assert_eq!(out[(0, 1)], q1[0]);
    assert_eq!(out[(1, 1)], q1[1]);
}

#[test]
fn comonotone_history_gives_comonotone_members() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
    let hist = DMatrix::from_fn(10, 4, |y, c| base[y] * (c + 1) as f64 + c as f64);
    let m = marginal(vec![0.0, 1.0, 2.0, 3.0], vec![1.0; 4]);
    let out = schaake(&m, &hist, None, 2).unwrap();
    let r0 = ranks(&out.column(0).iter().copied().collect::<Vec<_>>());
    for c in 1..4 {
        assert_eq!(
            ranks(&out.column(c).iter().copied().collect::<Vec<_>>()),
            r0
        );
    }
}

#[test]
fn floor_and_errors() {
    let m = marginal(vec![-1.7], vec![1.0]);
    let raw = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let out = ecc(&m, &raw, Some(-1.79), 1).unwrap();
    assert!(out.iter().all(|&v| v >= -1.79));
    assert_eq!(out[(0, 0)], -1.79);
    assert!(ecc(&m, &DMatrix::from_element(1, 1, 0.0), None, 1).is_err());
    assert!(ecc(&m, &DMatrix::from_element(3, 2, 0.0), None, 1).is_err());
}
