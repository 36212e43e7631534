use csl_core::lattice_noise::*;
use proptest::prelude::*;

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn vacuum_variance_unit_case() {
    let l = LatticeSpec::new(1, 1_000_000, 1.0, 1.0, 1, true).unwrap();
    let w = sample_noise_vacuum(&l, &CollapseParams::single(1.0, 1.0), 7).unwrap();
    let (mean, var) = moments(&w.values);
    assert!(mean.abs() < 5e-3);
    assert!((var - 1.0).abs() < 5e-3, "{var}");
}

#[test]
fn vacuum_variance_scales_with_cell_and_step() {
    // dV = 2 with a 1-D cell of edge 2, dt = 0.5, lambda = 4: variance 4.
    let l = LatticeSpec::new(1, 1000, 2.0, 0.5, 400, true).unwrap();
    let w = sample_noise_vacuum(&l, &CollapseParams::single(4.0, 1.0), 8).unwrap();
    let (_, var) = moments(&w.values);
    assert!((var - 4.0).abs() < 0.03, "{var}");
}

#[test]
fn vacuum_cells_are_uncorrelated() {
    let l = LatticeSpec::new(1, 200_000, 1.0, 1.0, 1, true).unwrap();
    let w = sample_noise_vacuum(&l, &CollapseParams::single(1.0, 1.0), 9).unwrap();
    let v = &w.values;
    let n = v.len() - 1;
    let (mean, var) = moments(v);
    let lag1 = (0..n).map(|i| (v[i] - mean) * (v[i + 1] - mean)).sum::<f64>() / (n as f64 * var);
    assert!(lag1.abs() < 3.0 / (n as f64).sqrt(), "{lag1}");
}

#[test]
fn zero_lambda_is_a_flagged_zero_realization() {
    let l = LatticeSpec::new(1, 10, 1.0, 1.0, 3, true).unwrap();
    let w = sample_noise_vacuum(&l, &CollapseParams::single(0.0, 1.0), 1).unwrap();
    assert!(w.degenerate);
    assert!(w.values.iter().all(|x| *x == 0.0));
    assert!(sample_noise_vacuum(&l, &CollapseParams::single(f64::NAN, 1.0), 1).is_err());
}

#[test]
fn zero_drift_matches_vacuum_exactly() {
    let l = LatticeSpec::new(1, 50, 0.5, 0.1, 20, false).unwrap();
    let p = CollapseParams::single(1.3, 1.0);
    let a = sample_noise_vacuum(&l, &p, 4).unwrap();
    let b = sample_noise_physical(&l, &p, &vec![0.0; 50], 4).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(b.measure, NoiseMeasure::Physical);
}

#[test]
fn constant_drift_shifts_the_mean() {
    let l = LatticeSpec::new(1, 1000, 1.0, 1.0, 200, true).unwrap();
    let a0 = 0.7;
    let w = sample_noise_physical(&l, &CollapseParams::single(1.0, 1.0), &vec![a0; 1000], 5).unwrap();
    let (mean, var) = moments(&w.values);
    let se = (var / w.values.len() as f64).sqrt();
    assert!((mean - 2.0 * a0).abs() < 3.0 * se);
    // The time average in one cell identifies the branch: 2 lambda A0.
    let cell: Vec<f64> = (0..200).map(|k| w.step(k)[17]).collect();
    let (m, _) = moments(&cell);
    assert!((m - 2.0 * a0).abs() < 3.0 / (200f64).sqrt());
}

#[test]
fn drift_must_cover_the_lattice() {
    let l = LatticeSpec::new(1, 5, 1.0, 1.0, 1, true).unwrap();
    let r = sample_noise_physical(&l, &CollapseParams::single(1.0, 1.0), &[0.0; 4], 0);
    assert!(matches!(r, Err(csl_core::Error::DimensionMismatch { .. })));
}

proptest! {
    #[test]
    fn same_seed_same_realization(seed in any::<u64>(), n in 1usize..40, steps in 1usize..5) {
        let l = LatticeSpec::new(1, n, 0.3, 0.05, steps, true).unwrap();
        let p = CollapseParams::single(0.9, 1.0);
        let a = sample_noise_vacuum(&l, &p, seed).unwrap();
        let b = sample_noise_vacuum(&l, &p, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cell_volume_is_a_power_of_dx(dim in prop::sample::select(vec![1usize, 3]), dx in 0.01f64..3.0) {
        let l = LatticeSpec::new(dim, 4, dx, 0.1, 1, true).unwrap();
        prop_assert_eq!(l.cell_volume(), dx.powi(dim as i32));
    }
}
