use csl_core::gravity_collapse::*;
use csl_core::hilbert::Configuration;
use csl_core::{CollapseParams, LatticeSpec};
use num_complex::Complex64 as C64;

fn line() -> LatticeSpec {
    LatticeSpec::new(1, 8, 0.5, 0.01, 1, false).unwrap()
}

fn two_sites(l: &LatticeSpec, coupling: f64, variant: PotentialVariant) -> GravityScenario {
    let cfgs = vec![
        Configuration::points(l, 0, &[[l.axis_coord(2), 0.0, 0.0]]).unwrap(),
        Configuration::points(l, 0, &[[l.axis_coord(5), 0.0, 0.0]]).unwrap(),
    ];
    let c = vec![C64::new(0.6, 0.0), C64::new(0.8, 0.0)];
    GravityScenario::new(l.clone(), CollapseParams::single(1.0, 0.5), cfgs, coupling, variant, c).unwrap()
}

#[test]
fn smeared_point_mass_centre_value() {
    let l = LatticeSpec::new(3, 5, 0.4, 0.01, 1, false).unwrap();
    let cfg = Configuration::points(&l, 0, &[[0.0; 3]]).unwrap();
    let (gm, a) = (0.05, 0.7);
    let phi = gravitational_potential(&l, &cfg, gm, PotentialVariant::Smeared, a).unwrap();
    let centre = l.cell_at([0.0; 3]).unwrap();
    let want = -gm * (2.0 / std::f64::consts::PI).sqrt() / a;
    assert!((phi[centre] - want).abs() < 1e-15);
    // Many widths from the source the smeared potential is Newtonian.
    let narrow = gravitational_potential(&l, &cfg, gm, PotentialVariant::Smeared, 0.2).unwrap();
    let far = l.cell_at([0.8, 0.8, 0.8]).unwrap();
    let r = (3.0f64).sqrt() * 0.8;
    assert!((narrow[far] + gm / r).abs() < 1e-9 * gm / r);
}

#[test]
fn potential_is_linear_in_the_configuration() {
    let l = line();
    let a = Configuration::points(&l, 0, &[[l.axis_coord(1), 0.0, 0.0]]).unwrap();
    let b = Configuration::points(&l, 0, &[[l.axis_coord(6), 0.0, 0.0]]).unwrap();
    let sum: Vec<f64> = a.parts[0].density.iter().zip(&b.parts[0].density).map(|(x, y)| x + y).collect();
    let ab = Configuration::single(0, sum);
    for v in [PotentialVariant::Point, PotentialVariant::Smeared] {
        let pa = gravitational_potential(&l, &a, 0.02, v, 0.5).unwrap();
        let pb = gravitational_potential(&l, &b, 0.02, v, 0.5).unwrap();
        let pab = gravitational_potential(&l, &ab, 0.02, v, 0.5).unwrap();
        for x in 0..8 {
            assert!((pab[x] - pa[x] - pb[x]).abs() < 1e-15);
        }
    }
}

#[test]
fn point_self_cell_uses_cube_average() {
    let l = line();
    let cfg = Configuration::points(&l, 0, &[[0.0; 3]]).unwrap();
    let phi = gravitational_potential(&l, &cfg, 0.01, PotentialVariant::Point, 0.5).unwrap();
    let c = l.cell_at([0.0; 3]).unwrap();
    assert!((phi[c] + 0.01 * self_cell_factor() / l.dx).abs() < 1e-15);
}

/// Geometry with one uniform potential on every branch and cell.
fn uniform(profiles: Vec<Vec<f64>>, lambda: f64, phi: f64, dilate: bool) -> BranchGeometry {
    let drift = profiles
        .iter()
        .map(|p| p.iter().map(|a| 2.0 * lambda * a / if dilate { 1.0 + phi } else { 1.0 }).collect())
        .collect();
    let stretch = profiles.iter().map(|p| vec![1.0 + phi; p.len()]).collect();
    BranchGeometry { lambda, cell_volume: 0.5, profiles, drift, stretch }
}

#[test]
fn uniform_hypersurface_stretch_rescales_rate_exactly() {
    let profiles = vec![vec![1.0, 0.2, 0.0, 0.0], vec![0.0, 0.1, 0.9, 0.3]];
    let flat = -oracle_log_coherence(&uniform(profiles.clone(), 0.8, 0.0, false), 0, 1, 1.0).unwrap();
    for phi in [-0.3, -0.01, 0.2] {
        let g = uniform(profiles.clone(), 0.8, phi, false);
        let rate = -oracle_log_coherence(&g, 0, 1, 1.0).unwrap();
        assert!((rate / flat - (1.0 + phi)).abs() < 1e-14);
    }
}

#[test]
fn dilated_drift_rate_first_order() {
    // With a common potential the exact oracle rate is Gamma_flat / (1 + phi),
    // i.e. 1 - phi at first order. The displayed rate, with the dilation factor
    // squared, expands as 1 - 2 phi.
    let profiles = vec![vec![1.0, 0.2, 0.0, 0.0], vec![0.0, 0.1, 0.9, 0.3]];
    let flat = -oracle_log_coherence(&uniform(profiles.clone(), 0.8, 0.0, true), 0, 1, 1.0).unwrap();
    let phi = -1e-3;
    let g = uniform(profiles, 0.8, phi, true);
    let ratio = -oracle_log_coherence(&g, 0, 1, 1.0).unwrap() / flat;
    assert!((ratio - (1.0 - phi)).abs() < 2.0 * phi * phi);
    assert!((ratio - (1.0 - 2.0 * phi)).abs() > 0.5 * phi.abs());
    let displayed = 1.0 / ((1.0 + phi) * (1.0 + phi));
    assert!((displayed - (1.0 - 2.0 * phi)).abs() < 4.0 * phi * phi);
}

#[test]
fn decay_rate_readings_on_a_lattice_scenario() {
    let l = line();
    let s = two_sites(&l, 0.01, PotentialVariant::Point);
    let r = gravity_decay_rate(&s, GravityMode::DilatedDrift, 0, 1, None).unwrap();
    // Every potential is negative, so both readings exceed the flat rate.
    assert!(r.oracle > r.flat && r.displayed > r.flat && r.symmetric > r.flat);
    assert!(r.simulated.is_none());
    let z = gravity_decay_rate(&two_sites(&l, 0.0, PotentialVariant::Point), GravityMode::DilatedDrift, 0, 1, None)
        .unwrap();
    assert!((z.oracle - z.flat).abs() < 1e-14 * z.flat);
    assert!((z.displayed - z.flat).abs() < 1e-14 * z.flat);
}

#[test]
fn oracle_preserves_diagonals_and_is_symmetric() {
    let l = line();
    let s = two_sites(&l, 0.02, PotentialVariant::Smeared);
    for mode in [GravityMode::DilatedDrift, GravityMode::SmearedSurface] {
        let g = BranchGeometry::new(&s, mode).unwrap();
        assert_eq!(oracle_log_coherence(&g, 0, 0, 3.0).unwrap(), 0.0);
        let a = oracle_log_coherence(&g, 0, 1, 2.0).unwrap();
        let b = oracle_log_coherence(&g, 1, 0, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(a < 0.0);
    }
}

#[test]
fn run_is_thread_count_invariant_and_fits_the_oracle_rate() {
    let l = line();
    let s = two_sites(&l, 0.02, PotentialVariant::Point);
    let base =
        GravityRunOptions { times: vec![0.3, 0.6, 0.9], n_traj: 6000, seed: 11, threads: Some(1), threshold: 0.99 };
    let a = gravity_collapse_run(&s, GravityMode::DilatedDrift, &base).unwrap();
    let b =
        gravity_collapse_run(&s, GravityMode::DilatedDrift, &GravityRunOptions { threads: Some(4), ..base.clone() })
            .unwrap();
    assert_eq!(a, b);
    let rates = gravity_decay_rate(&s, GravityMode::DilatedDrift, 0, 1, Some(&a)).unwrap();
    let (sim, se) = rates.simulated.unwrap();
    assert!((sim - rates.oracle).abs() < 4.0 * se, "{rates:?}");
}

#[test]
fn strong_coupling_is_rejected() {
    let l = line();
    let cfgs = vec![Configuration::points(&l, 0, &[[0.0; 3]]).unwrap()];
    let r = GravityScenario::new(
        l,
        CollapseParams::single(1.0, 0.5),
        cfgs,
        1.0,
        PotentialVariant::Point,
        vec![C64::new(1.0, 0.0)],
    );
    assert!(matches!(r, Err(csl_core::Error::WeakField { .. })));
}
