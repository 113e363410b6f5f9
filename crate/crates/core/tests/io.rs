use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapercast::covmodel::{correct_multiplicative, ResidualPanel, TaperSettings};
use tapercast::io::*;
use tapercast::synth::SynthSpec;
use tapercast::Grid;

fn random_archive(
    seed: u64,
    n_lon: usize,
    n_lat: usize,
    years: usize,
    months: Vec<u32>,
    members: usize,
) -> FieldArchive<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<bool> = (0..n_lon * n_lat)
        .map(|i| i == 0 || rng.random_bool(0.7))
        .collect();
    let lon = (0..n_lon).map(|i| -10.0 + i as f64).collect();
    let lat = (0..n_lat).map(|i| 50.0 + i as f64).collect();
    let grid = Grid::new(lon, lat, mask).unwrap();
    let s = grid.sea_count();
    let slots = years * months.len();
    let obs = (0..slots)
        .map(|_| (0..s).map(|_| rng.random_range(-1.79f32..30.0)).collect())
        .collect();
    let fc = (0..slots)
        .map(|_| {
            (0..s * members)
                .map(|_| rng.random_range(-5.0f32..35.0))
                .collect()
        })
        .collect();
    FieldArchive::new(grid, 1990, months, members, obs, fc).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn archives_round_trip_bit_exact(seed in any::<u64>(), n_lon in 1usize..5, n_lat in 1usize..4, years in 1usize..4, members in 2usize..4) {
        let a = random_archive(seed, n_lon, n_lat, years, vec![2, 5, 11], members);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_archive(&a, dir.path()).unwrap();
        let b: FieldArchive<f32> = load_archive(&manifest).unwrap();
        prop_assert_eq!(&a, &b);
        // f64 loading widens exactly
        let c: FieldArchive<f64> = load_archive(&manifest).unwrap();
        prop_assert_eq!(c.cast::<f32>(), a);
    }
}

#[test]
fn corrupt_files_are_load_errors() {
    let a = random_archive(1, 2, 2, 2, vec![1], 2);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_archive(&a, dir.path()).unwrap();
    let obs = dir.path().join(archive::observation_file(1991, 1));
    let s = a.sea_count();
    std::fs::write(&obs, vec![0u8; 4 * (s + 1)]).unwrap();
    assert!(load_archive::<f64>(&manifest).is_err());
    let mut bad = vec![0u8; 4 * s];
    bad[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&obs, &bad).unwrap();
    assert!(load_archive::<f64>(&manifest).is_err());
    bad[..4].copy_from_slice(&(-5.0f32).to_le_bytes());
    std::fs::write(&obs, &bad).unwrap();
    assert!(load_archive::<f64>(&manifest)
        .unwrap_err()
        .to_string()
        .contains("floor"));
}

#[test]
fn manifest_with_unknown_key_rejected() {
    let a = random_archive(2, 2, 1, 1, vec![1], 2);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_archive(&a, dir.path()).unwrap();
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("\nbogus = 1\n");
    std::fs::write(&manifest, text).unwrap();
    assert!(load_archive::<f64>(&manifest).is_err());
}

#[test]
fn config_with_synth_section_round_trips() {
    let cfg = RunConfig {
        synth: Some(SynthSpec::default()),
        route: vec![1, 2, 3],
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    save_config(&cfg, &p).unwrap();
    assert_eq!(load_config(&p).unwrap(), cfg);
}

#[test]
fn fitted_model_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = Grid::regular(0.0, 2.0, 4, 0.0, 2.0, 3).unwrap();
    let d = grid.sea_distances::<f64>();
    let data = nalgebra::DMatrix::from_fn(9, 12, |_, _| rng.random_range(-1.0..1.0));
    let panel = ResidualPanel::new(4, 2010, (2001..2010).collect(), data).unwrap();
    let model = correct_multiplicative(&panel, &[0.8; 12], &d, &TaperSettings::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cov.tpcm");
    save_model(&StoredModel::TaperedPca(model.clone()), &p).unwrap();
    let StoredModel::TaperedPca(back) = load_model::<f64>(&p).unwrap() else {
        panic!()
    };
    for (a, b) in model.eigvals.iter().zip(&back.eigvals) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(back, model);
}
