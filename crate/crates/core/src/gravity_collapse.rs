//! Collapse of superposed static mass configurations where each branch
//! collapses on its own proper-time hypersurface `t' = t (1 + phi_r(x))`.
//!
//! With `H = 0` and diagonal collapse operators, the noise history in a cell
//! enters only through its time average over the segments cut out by the
//! branch hypersurfaces. Trajectories are therefore sampled cell-exactly, one
//! Gaussian draw per cell and segment, with no time stepping.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csl_trajectories::{detect_collapse, pick_index, thread_pool, Outcome};
use crate::error::{invalid, Error, Result};
use crate::hilbert::{CollapseOperators, Configuration};
use crate::lattice_noise::{rng_from_seed, stream_seed, CollapseParams, LatticeSpec};
use crate::stats::{OutcomeBin, WeightedMean};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialVariant {
    /// Newtonian potential of the lattice number density.
    Point,
    /// Potential of the density smeared by a Gaussian of width `a`.
    Smeared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GravityMode {
    /// Drift `2 lambda A_r / (1 + phi_r)`, hypersurface from the scenario potential.
    DilatedDrift,
    /// Drift `2 lambda A_r`, hypersurface from the smeared potential.
    SmearedSurface,
}

/// Mean of `1/|r|` over a cube of side `dx` about its centre, times `dx`.
pub fn self_cell_factor() -> f64 {
    3.0 * (2.0 + 3f64.sqrt()).ln() - 0.5 * PI
}

/// `phi(x) = -GM sum_z dV n(z) g(x - z)`. The point kernel uses the
/// cube-averaged `1/r` on the source cell (cells are cubes of side `dx` in
/// every dimension); the smeared kernel is `erf(r / (sqrt(2) a)) / r`.
/// Periodic lattices use the minimal image only.
pub fn gravitational_potential(
    lattice: &LatticeSpec,
    config: &Configuration,
    coupling: f64,
    variant: PotentialVariant,
    a: f64,
) -> Result<Vec<f64>> {
    if !(coupling >= 0.0 && coupling.is_finite()) {
        return Err(invalid(format!("gravitational coupling must be finite and >= 0, got {coupling}")));
    }
    if variant == PotentialVariant::Smeared && !(a > 0.0) {
        return Err(invalid("smeared potential needs a > 0"));
    }
    let n = lattice.n_cells();
    let dv = lattice.cell_volume();
    let self_term = match variant {
        PotentialVariant::Point => self_cell_factor() / lattice.dx,
        PotentialVariant::Smeared => (2.0 / PI).sqrt() / a,
    };
    let kernel = |r: f64| match variant {
        PotentialVariant::Point => 1.0 / r,
        PotentialVariant::Smeared => libm::erf(r / (2f64.sqrt() * a)) / r,
    };
    let mut phi = vec![0.0; n];
    for part in &config.parts {
        if part.density.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: part.density.len() });
        }
        for (z, &nz) in part.density.iter().enumerate() {
            if !nz.is_finite() {
                return Err(invalid(format!("non-finite occupation at cell {z}")));
            }
            if nz < 0.0 {
                return Err(Error::NegativeOccupation { cell: z, value: nz });
            }
            if nz == 0.0 {
                continue;
            }
            let q = coupling * dv * nz;
            for (x, p) in phi.iter_mut().enumerate() {
                let g = if x == z { self_term } else { kernel(lattice.distance_sq(x, z).sqrt()) };
                *p -= q * g;
            }
        }
    }
    check_weak_field(&phi)?;
    Ok(phi)
}

pub fn check_weak_field(phi: &[f64]) -> Result<()> {
    for (cell, &p) in phi.iter().enumerate() {
        if !p.is_finite() || p.abs() >= 1.0 {
            return Err(Error::WeakField { cell, phi: p });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GravityScenario {
    pub lattice: LatticeSpec,
    pub params: CollapseParams,
    /// Branch configurations `n_r(z)`.
    pub configs: Vec<Configuration>,
    /// `G M`; the potential is dimensionless.
    pub coupling: f64,
    pub variant: PotentialVariant,
    pub amplitudes: Vec<C64>,
}

impl GravityScenario {
    pub fn new(
        lattice: LatticeSpec,
        params: CollapseParams,
        configs: Vec<Configuration>,
        coupling: f64,
        variant: PotentialVariant,
        amplitudes: Vec<C64>,
    ) -> Result<Self> {
        lattice.validate()?;
        params.validate()?;
        if configs.is_empty() {
            return Err(invalid("gravity scenario needs at least one branch"));
        }
        if amplitudes.len() != configs.len() {
            return Err(Error::DimensionMismatch { expected: configs.len(), got: amplitudes.len() });
        }
        let norm: f64 = amplitudes.iter().map(|c| c.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(invalid(format!("branch amplitudes must satisfy sum |c|^2 = 1, got {norm}")));
        }
        let s = GravityScenario { lattice, params, configs, coupling, variant, amplitudes };
        s.potentials(s.variant)?;
        Ok(s)
    }

    pub fn potentials(&self, variant: PotentialVariant) -> Result<Vec<Vec<f64>>> {
        self.configs
            .iter()
            .map(|c| gravitational_potential(&self.lattice, c, self.coupling, variant, self.params.a))
            .collect()
    }

    pub fn operators(&self) -> Result<CollapseOperators> {
        CollapseOperators::for_configurations(&self.lattice, &self.params, &self.configs)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Per-branch drift `u_r(x)` and hypersurface stretch `1 + phi_r(x)`.
#[derive(Debug, Clone)]
pub struct BranchGeometry {
    pub lambda: f64,
    pub cell_volume: f64,
    pub profiles: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    pub stretch: Vec<Vec<f64>>,
}

impl BranchGeometry {
    pub fn new(scenario: &GravityScenario, mode: GravityMode) -> Result<Self> {
        let ops = scenario.operators()?;
        let lambda = scenario.params.lambda;
        let (phi, dilate) = match mode {
            GravityMode::DilatedDrift => (scenario.potentials(scenario.variant)?, true),
            GravityMode::SmearedSurface => (scenario.potentials(PotentialVariant::Smeared)?, false),
        };
        let drift = ops
            .profiles
            .iter()
            .zip(&phi)
            .map(|(a, p)| {
                a.iter()
                    .zip(p)
                    .map(|(ax, px)| if dilate { 2.0 * lambda * ax / (1.0 + px) } else { 2.0 * lambda * ax })
                    .collect()
            })
            .collect();
        let stretch = phi.iter().map(|p| p.iter().map(|v| 1.0 + v).collect()).collect();
        Ok(BranchGeometry { lambda, cell_volume: ops.cell_volume, profiles: ops.profiles, drift, stretch })
    }

    pub fn n_branches(&self) -> usize {
        self.drift.len()
    }

    pub fn n_cells(&self) -> usize {
        self.drift.first().map_or(0, |d| d.len())
    }

    /// `tau_r(x) = t (1 + phi_r(x))`.
    pub fn hypersurface(&self, t: f64) -> Vec<Vec<f64>> {
        self.stretch.iter().map(|s| s.iter().map(|v| t * v).collect()).collect()
    }
}

/// Whether the space-time cell `(x, t')` carries collapse for a branch with
/// hypersurface time `tau` at that cell.
pub fn is_active(tau: f64, t_prime: f64) -> bool {
    t_prime <= tau
}

/// `ln |rho_rs(t) / rho_rs(0)|` by Gaussian integration over the noise of each cell.
pub fn oracle_log_coherence(geom: &BranchGeometry, r: usize, s: usize, t: f64) -> Result<f64> {
    let nb = geom.n_branches();
    if r >= nb || s >= nb {
        return Err(invalid(format!("branch pair ({r}, {s}) out of range for {nb} branches")));
    }
    if geom.lambda == 0.0 || r == s {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for x in 0..geom.n_cells() {
        let (tr, ts) = (t * geom.stretch[r][x], t * geom.stretch[s][x]);
        let (ur, us) = (geom.drift[r][x], geom.drift[s][x]);
        let later = if tr > ts { ur } else { us };
        acc += tr.min(ts) * (ur - us).powi(2) + (tr - ts).abs() * later * later;
    }
    Ok(-geom.cell_volume / (8.0 * geom.lambda) * acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRates {
    /// `-d/dt ln|rho_rs|` from the exact oracle.
    pub oracle: f64,
    /// `(lambda/2) dV sum (A_r - A_s)^2 / (1 + phi_r)^2`: the dilation factor of branch r on both terms.
    pub displayed: f64,
    /// `(lambda/2) dV sum (A_r/(1+phi_r) - A_s/(1+phi_s))^2`.
    pub symmetric: f64,
    /// Rate without gravity.
    pub flat: f64,
    /// Fitted from a run, with its standard error.
    pub simulated: Option<(f64, f64)>,
}

impl DecayRates {
    pub fn relative_difference(&self) -> Option<f64> {
        self.simulated.map(|(v, _)| (v - self.oracle) / self.oracle)
    }
}

pub fn gravity_decay_rate(
    scenario: &GravityScenario,
    mode: GravityMode,
    r: usize,
    s: usize,
    run: Option<&GravityRun>,
) -> Result<DecayRates> {
    let geom = BranchGeometry::new(scenario, mode)?;
    let oracle = -oracle_log_coherence(&geom, r, s, 1.0)?;
    let half = 0.5 * geom.lambda * geom.cell_volume;
    let (ar, as_) = (&geom.profiles[r], &geom.profiles[s]);
    let (sr, ss) = (&geom.stretch[r], &geom.stretch[s]);
    let mut displayed = 0.0;
    let mut symmetric = 0.0;
    let mut flat = 0.0;
    for x in 0..geom.n_cells() {
        let d = ar[x] - as_[x];
        flat += d * d;
        displayed += d * d / (sr[x] * sr[x]);
        symmetric += (ar[x] / sr[x] - as_[x] / ss[x]).powi(2);
    }
    let simulated = run.map(|run| run.fitted_rate(r, s)).transpose()?;
    Ok(DecayRates { oracle, displayed: half * displayed, symmetric: half * symmetric, flat: half * flat, simulated })
}

/// A piece `[s0, s1]` of a cell's time axis between consecutive hypersurfaces.
#[derive(Debug, Clone)]
struct Segment {
    sigma: f64,
    /// `L dV / (4 lambda)`.
    k: f64,
    active: Vec<bool>,
}

fn segments(geom: &BranchGeometry, t: f64) -> Vec<Vec<Segment>> {
    let nb = geom.n_branches();
    let taus = geom.hypersurface(t);
    (0..geom.n_cells())
        .map(|x| {
            let mut bps: Vec<f64> = (0..nb).map(|r| taus[r][x]).collect();
            bps.push(0.0);
            bps.sort_by(f64::total_cmp);
            bps.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * t.abs().max(1.0));
            bps.windows(2)
                .map(|w| {
                    let len = w[1] - w[0];
                    let end = w[1] - 1e-14 * t.abs().max(1.0);
                    Segment {
                        sigma: (geom.lambda / (geom.cell_volume * len)).sqrt(),
                        k: len * geom.cell_volume / (4.0 * geom.lambda),
                        active: (0..nb).map(|r| is_active(taus[r][x], end)).collect(),
                    }
                })
                .collect()
        })
        .collect()
}

/// Normalized branch amplitudes of one trajectory at time `t`, sampled under
/// the physical measure: pick a branch with probability `|c_b|^2`, then draw
/// each segment average from `N(u_b, sigma^2)` where b is active and
/// `N(0, sigma^2)` elsewhere.
fn sample_amplitudes(geom: &BranchGeometry, segs: &[Vec<Segment>], c: &[C64], probs: &[f64], seed: u64) -> Vec<C64> {
    let nb = c.len();
    if geom.lambda == 0.0 || segs.iter().all(|s| s.is_empty()) {
        return c.to_vec();
    }
    let mut rng = rng_from_seed(seed);
    let b = pick_index(&mut rng, probs);
    let mut logs = vec![0.0; nb];
    for (x, cell) in segs.iter().enumerate() {
        for seg in cell {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = if seg.active[b] { geom.drift[b][x] } else { 0.0 };
            let w = mean + seg.sigma * z;
            for r in 0..nb {
                if seg.active[r] {
                    let u = geom.drift[r][x];
                    logs[r] += seg.k * (2.0 * w * u - u * u);
                }
            }
        }
    }
    let lmax = (0..nb).filter(|r| probs[*r] > 0.0).map(|r| logs[r]).fold(f64::NEG_INFINITY, f64::max);
    let mut amps: Vec<C64> = c.iter().zip(&logs).map(|(ci, l)| ci * (l - lmax).exp()).collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    amps.iter_mut().for_each(|a| *a /= norm);
    amps
}

#[derive(Debug, Clone)]
pub struct GravityRunOptions {
    pub times: Vec<f64>,
    pub n_traj: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Collapse threshold for the outcome histogram at the last time.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherencePoint {
    pub t: f64,
    pub r: usize,
    pub s: usize,
    /// `ln|rho_rs(t)|` from the ensemble.
    pub log_abs: f64,
    pub stderr: f64,
    /// `ln|c_r c_s|`.
    pub initial: f64,
    /// Oracle value of `ln|rho_rs(t)|`.
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravityRun {
    pub mode: GravityMode,
    pub n_traj: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    pub diag_mean: Vec<Vec<f64>>,
    pub diag_stderr: Vec<Vec<f64>>,
    pub coherence: Vec<CoherencePoint>,
    pub histogram: Vec<OutcomeBin>,
}

impl GravityRun {
    /// Least-squares slope of `-(ln|rho_rs(t)| - ln|rho_rs(0)|)` through the
    /// origin, weighted by the point standard errors.
    pub fn fitted_rate(&self, r: usize, s: usize) -> Result<(f64, f64)> {
        let pts: Vec<&CoherencePoint> = self.coherence.iter().filter(|p| p.r == r && p.s == s && p.t > 0.0).collect();
        if pts.is_empty() {
            return Err(invalid(format!("no coherence data for pair ({r}, {s})")));
        }
        let (mut num, mut den) = (0.0, 0.0);
        for p in &pts {
            let w = 1.0 / p.stderr.max(1e-300).powi(2);
            num += w * p.t * (p.initial - p.log_abs);
            den += w * p.t * p.t;
        }
        Ok((num / den, den.sqrt().recip()))
    }
}

const CHUNK: usize = 2048;

/// Simulate the ensemble at each requested time. Each time gets its own
/// ensemble because the trajectory law at time t depends on t through the
/// hypersurfaces and is not a restriction of the law at a later time.
pub fn gravity_collapse_run(
    scenario: &GravityScenario,
    mode: GravityMode,
    opts: &GravityRunOptions,
) -> Result<GravityRun> {
    if opts.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(invalid("gravity run times must be finite and >= 0"));
    }
    if !(opts.threshold > 0.5 && opts.threshold < 1.0) {
        return Err(invalid(format!("collapse threshold must lie in (0.5, 1), got {}", opts.threshold)));
    }
    let geom = BranchGeometry::new(scenario, mode)?;
    let pool = thread_pool(opts.threads)?;
    let nb = geom.n_branches();
    let c = &scenario.amplitudes;
    let probs = scenario.probabilities();
    let c0: Vec<f64> = c.iter().map(|v| v.norm()).collect();
    let mut run = GravityRun {
        mode,
        n_traj: opts.n_traj,
        seed: opts.seed,
        times: opts.times.clone(),
        diag_mean: Vec::new(),
        diag_stderr: Vec::new(),
        coherence: Vec::new(),
        histogram: Vec::new(),
    };
    for (ti, &t) in opts.times.iter().enumerate() {
        let segs = segments(&geom, t);
        let time_seed = stream_seed(opts.seed, ti as u64);
        let mut diag = vec![WeightedMean::default(); nb];
        let mut off = vec![[WeightedMean::default(); 2]; nb * nb];
        let mut outcomes = vec![WeightedMean::default(); nb + 1];
        let last = ti + 1 == opts.times.len();
        let mut start = 0;
        while start < opts.n_traj {
            let end = (start + CHUNK).min(opts.n_traj);
            let batch: Vec<Vec<C64>> = pool.install(|| {
                (start..end)
                    .into_par_iter()
                    .map(|i| sample_amplitudes(&geom, &segs, c, &probs, stream_seed(time_seed, i as u64)))
                    .collect()
            });
            for amps in &batch {
                if amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
                    return Err(Error::NonFinite("gravity trajectory amplitudes".into()));
                }
                let w: Vec<f64> = amps.iter().map(|a| a.norm_sqr()).collect();
                for r in 0..nb {
                    diag[r].push(0.0, w[r]);
                    for s in (r + 1)..nb {
                        let v = amps[r] * amps[s].conj();
                        off[r * nb + s][0].push(0.0, v.re);
                        off[r * nb + s][1].push(0.0, v.im);
                    }
                }
                if last {
                    let idx = match detect_collapse(std::slice::from_ref(&w), opts.threshold) {
                        Outcome::Branch(b) => b,
                        Outcome::Undecided => nb,
                    };
                    for (o, acc) in outcomes.iter_mut().enumerate() {
                        acc.push(0.0, if o == idx { 1.0 } else { 0.0 });
                    }
                }
            }
            start = end;
        }
        run.diag_mean.push(diag.iter().map(|d| d.mean()).collect());
        run.diag_stderr.push(diag.iter().map(|d| d.stderr()).collect());
        for r in 0..nb {
            for s in (r + 1)..nb {
                let [re, im] = &off[r * nb + s];
                let (mr, mi) = (re.mean(), im.mean());
                let abs2 = mr * mr + mi * mi;
                let stderr = ((mr * re.stderr()).powi(2) + (mi * im.stderr()).powi(2)).sqrt() / abs2;
                run.coherence.push(CoherencePoint {
                    t,
                    r,
                    s,
                    log_abs: 0.5 * abs2.ln(),
                    stderr,
                    initial: (c0[r] * c0[s]).ln(),
                    oracle: (c0[r] * c0[s]).ln() + oracle_log_coherence(&geom, r, s, t)?,
                });
            }
        }
        if last && opts.n_traj > 0 {
            run.histogram = outcomes
                .iter()
                .enumerate()
                .map(|(o, acc)| {
                    let label = if o == nb { Outcome::Undecided.label() } else { Outcome::Branch(o).label() };
                    let f = acc.mean();
                    OutcomeBin {
                        outcome: label,
                        count: acc.count_nonzero(),
                        frequency: f,
                        stderr: (f * (1.0 - f) / acc.count() as f64).sqrt(),
                    }
                })
                .collect();
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> LatticeSpec {
        LatticeSpec::new(1, n, 0.5, 0.01, 1, false).unwrap()
    }

    fn scenario(coupling: f64, variant: PotentialVariant) -> GravityScenario {
        let l = line(8);
        let cfgs = vec![
            Configuration::points(&l, 0, &[[l.axis_coord(2), 0.0, 0.0]]).unwrap(),
            Configuration::points(&l, 0, &[[l.axis_coord(5), 0.0, 0.0]]).unwrap(),
        ];
        let c = vec![C64::new(0.6, 0.0), C64::new(0.8, 0.0)];
        GravityScenario::new(l, CollapseParams::single(1.0, 0.5), cfgs, coupling, variant, c).unwrap()
    }

    #[test]
    fn self_cell_constant() {
        assert!((self_cell_factor() - 2.380077).abs() < 1e-6);
    }

    #[test]
    fn empty_configuration_has_no_potential() {
        let l = line(6);
        let cfg = Configuration::single(0, vec![0.0; 6]);
        let phi = gravitational_potential(&l, &cfg, 0.3, PotentialVariant::Point, 1.0).unwrap();
        assert!(phi.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn strong_field_is_rejected() {
        let l = line(6);
        let cfg = Configuration::points(&l, 0, &[[0.0, 0.0, 0.0]]).unwrap();
        let r = gravitational_potential(&l, &cfg, 10.0, PotentialVariant::Point, 1.0);
        assert!(matches!(r, Err(Error::WeakField { .. })));
    }

    #[test]
    fn modes_coincide_without_gravity() {
        let s = scenario(0.0, PotentialVariant::Point);
        let a = BranchGeometry::new(&s, GravityMode::DilatedDrift).unwrap();
        let b = BranchGeometry::new(&s, GravityMode::SmearedSurface).unwrap();
        assert_eq!(a.drift, b.drift);
        assert_eq!(a.stretch, b.stretch);
        let r = gravity_decay_rate(&s, GravityMode::DilatedDrift, 0, 1, None).unwrap();
        assert!((r.oracle - r.flat).abs() < 1e-14 * r.flat);
    }

    #[test]
    fn identical_branches_do_not_decohere() {
        let l = line(8);
        let cfg = Configuration::points(&l, 0, &[[0.0, 0.0, 0.0]]).unwrap();
        let c = vec![C64::new(0.5f64.sqrt(), 0.0); 2];
        let s = GravityScenario::new(
            l,
            CollapseParams::single(1.0, 0.5),
            vec![cfg.clone(), cfg],
            0.01,
            PotentialVariant::Point,
            c,
        )
        .unwrap();
        let r = gravity_decay_rate(&s, GravityMode::DilatedDrift, 0, 1, None).unwrap();
        assert_eq!(r.oracle, 0.0);
        assert_eq!(r.displayed, 0.0);
    }

    #[test]
    fn active_region_grows_with_time() {
        let s = scenario(0.05, PotentialVariant::Point);
        let g = BranchGeometry::new(&s, GravityMode::DilatedDrift).unwrap();
        let probes = [0.1, 0.5, 0.9, 1.3];
        for w in [0.5, 1.0, 1.5, 3.0].windows(2) {
            let (a, b) = (g.hypersurface(w[0]), g.hypersurface(w[1]));
            for r in 0..2 {
                for x in 0..g.n_cells() {
                    for tp in probes {
                        assert!(!is_active(a[r][x], tp) || is_active(b[r][x], tp));
                    }
                }
            }
        }
    }

    #[test]
    fn cell_exact_sampler_reproduces_oracle() {
        let s = scenario(0.05, PotentialVariant::Point);
        let opts =
            GravityRunOptions { times: vec![0.0, 0.6], n_traj: 20000, seed: 3, threads: Some(2), threshold: 0.99 };
        let run = gravity_collapse_run(&s, GravityMode::DilatedDrift, &opts).unwrap();
        let p = &run.coherence[1];
        assert!((p.log_abs - p.oracle).abs() < 4.0 * p.stderr, "{p:?}");
        for (r, want) in [0.36, 0.64].iter().enumerate() {
            assert!((run.diag_mean[1][r] - want).abs() < 4.0 * run.diag_stderr[1][r]);
        }
    }
}
