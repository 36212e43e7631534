//! Displaced-oscillator particle creation driven by collapse.
//!
//! Each site carries `H = m xi^dagger xi + g (xi^dagger + xi)`. Collapse damps
//! the coherent amplitude at rate `lambda/2`, so the ensemble mean obeys
//! `d xi/dt = -(i m + lambda/2) xi - i g` and energy flows from the W field
//! into particles.

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::csl_trajectories::{fold_ensemble, TrajectoryModel, TrajectoryOptions};
use crate::error::{invalid, Error, Result};
use crate::hilbert::{build_hamiltonian, propagator, CollapseOperators, HamiltonianSpec, SmearingKernel};
use crate::lattice_noise::{stream_seed, CollapseParams, LatticeSpec, NoiseMeasure};
use crate::ode::{integrate, Rk4Options};
use crate::stats::WeightedMean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CreationParams {
    pub m: f64,
    pub lambda: f64,
}

impl CreationParams {
    pub fn new(m: f64, lambda: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(invalid(format!("oscillator mass must be > 0, got {m}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(CreationParams { m, lambda })
    }

    /// `kappa = i m + lambda/2`
    pub fn kappa(&self) -> C64 {
        C64::new(0.5 * self.lambda, self.m)
    }
}

/// Closed-form ensemble means at one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanFields {
    pub xi: C64,
    pub number_rate: f64,
    pub energy_rate: f64,
    pub number: f64,
    /// Particle energy gained since `t = 0`.
    pub energy: f64,
    /// W-field energy change since `t = 0`, site-integrated.
    pub wfield_energy: f64,
}

/// `J(t) = int_0^t exp(-kappa s) ds = (1 - exp(-kappa t)) / kappa`.
fn j_integral(kappa: C64, t: f64) -> C64 {
    if kappa.norm() * t < 1e-6 {
        // series avoids cancellation for tiny kappa t
        let x = kappa * t;
        return C64::new(t, 0.0) * (C64::new(1.0, 0.0) - x / 2.0 + x * x / 6.0);
    }
    (C64::new(1.0, 0.0) - (-kappa * t).exp()) / kappa
}

/// `int_0^t { m [1 - e^{-lambda s/2} cos ms] - (lambda/2) e^{-lambda s/2} sin ms } ds`
/// `= m (t - Re J) + (lambda/2) Im J`.
pub fn bracket_antiderivative(p: &CreationParams, t: f64) -> f64 {
    let j = j_integral(p.kappa(), t);
    p.m * (t - j.re) + 0.5 * p.lambda * j.im
}

/// The bracket itself, `m [1 - e^{-lambda t/2} cos mt] - (lambda/2) e^{-lambda t/2} sin mt`.
pub fn bracket(p: &CreationParams, t: f64) -> f64 {
    let e = (-0.5 * p.lambda * t).exp();
    p.m * (1.0 - e * (p.m * t).cos()) - 0.5 * p.lambda * e * (p.m * t).sin()
}

pub fn creation_mean_fields(t: f64, p: &CreationParams, g: f64) -> Result<MeanFields> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid(format!("time must be >= 0, got {t}")));
    }
    let kappa = p.kappa();
    let k2 = kappa.norm_sqr();
    let i = C64::new(0.0, 1.0);
    let j = j_integral(kappa, t);
    let xi = -i * g * j;
    let e = (-0.5 * p.lambda * t).exp();
    let (s, c) = (p.m * t).sin_cos();
    let number_rate = 2.0 * g * g / k2 * (0.5 * p.lambda * (1.0 - e * c) + p.m * e * s);
    let energy_rate = g * g * p.lambda / k2 * bracket(p, t);
    // int_0^t xi = -i g (t - J) / kappa
    let xi_int = -i * g * (C64::new(t, 0.0) - j) / kappa;
    let number = -2.0 * g * xi_int.im;
    let energy = g * g * p.lambda / k2 * bracket_antiderivative(p, t);
    if ![xi.re, xi.im, number, energy].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("creation closed form".into()));
    }
    Ok(MeanFields { xi, number_rate, energy_rate, number, energy, wfield_energy: -energy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CreationSample {
    pub t: f64,
    pub xi: C64,
    pub number: f64,
    pub energy: f64,
    pub wfield_energy: f64,
}

/// RK4 on `(xi, N, H, E_w)` with
/// `xi' = -kappa xi - i g`, `N' = -2 g Im xi`, `H' = -lambda g Re xi`, `E_w' = -H'`.
pub fn creation_ode_integrate(
    p: &CreationParams,
    g: f64,
    t_max: f64,
    dt: f64,
    record_every: usize,
) -> Result<Vec<CreationSample>> {
    if !(dt > 0.0) || !(t_max >= 0.0) {
        return Err(invalid("t_max must be >= 0 and dt > 0"));
    }
    let n_steps = (t_max / dt).round() as usize;
    let kappa = p.kappa();
    let lambda = p.lambda;
    let mut out = Vec::new();
    integrate(
        |_, y: &Vec<f64>| {
            let xi = C64::new(y[0], y[1]);
            let d = -kappa * xi - C64::new(0.0, g);
            let h = -lambda * g * xi.re;
            vec![d.re, d.im, -2.0 * g * xi.im, h, -h]
        },
        vec![0.0; 5],
        0.0,
        n_steps,
        Rk4Options { dt, check_every: 64, tolerance: 1e-10 },
        record_every,
        |_| {},
        |_, t, y| {
            out.push(CreationSample { t, xi: C64::new(y[0], y[1]), number: y[2], energy: y[3], wfield_energy: y[4] });
            Ok(())
        },
    )?;
    Ok(out)
}

/// W-field energy density `-(lambda/|kappa|^2) sum_z dV K(x - z)^2 g(z)^2 B(t)`
/// on every cell, where `B` is [`bracket_antiderivative`].
///
/// Its spatial integral is minus the spatial integral of the particle energy
/// gained, because the lattice kernel satisfies `dV sum_x K^2 = 1` exactly.
pub fn creation_wfield_energy(
    lattice: &LatticeSpec,
    a: f64,
    p: &CreationParams,
    g: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let n = lattice.n_cells();
    if g.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: g.len() });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(invalid("coupling profile contains non-finite values"));
    }
    let kernel = SmearingKernel::new(lattice, a)?;
    let c = -p.lambda / p.kappa().norm_sqr() * bracket_antiderivative(p, t) * lattice.cell_volume();
    let mut out = vec![0.0; n];
    for (z, gz) in g.iter().enumerate() {
        if *gz == 0.0 {
            continue;
        }
        for (x, o) in out.iter_mut().enumerate() {
            let k = kernel.value(lattice, x, z);
            *o += c * k * k * gz * gz;
        }
    }
    Ok(out)
}

/// Particle energy density gained by time `t` at every cell.
pub fn creation_particle_energy(lattice: &LatticeSpec, p: &CreationParams, g: &[f64], t: f64) -> Result<Vec<f64>> {
    if g.len() != lattice.n_cells() {
        return Err(Error::DimensionMismatch { expected: lattice.n_cells(), got: g.len() });
    }
    g.iter().map(|gz| creation_mean_fields(t, p, *gz).map(|f| f.energy)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SiteSummary {
    pub g: f64,
    pub times: Vec<f64>,
    pub xi_mean: Vec<C64>,
    pub xi_stderr: Vec<f64>,
    pub number_mean: Vec<f64>,
    pub number_stderr: Vec<f64>,
    /// Largest ensemble-mean weight on the top Fock level over the run.
    pub top_level_weight: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryModeOptions {
    pub n_max: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub record_every: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Cell volume linking the continuum field to the site mode, `a = sqrt(dV) xi`.
    pub cell_volume: f64,
}

/// Trajectory ensemble per site, sites treated as independent oscillators each
/// with one collapse channel `A = n` (so the dissipator is `(lambda/2)[n,[n,rho]]`).
///
/// Reported `xi` and `n` are the site-mode values; divide `xi` by `sqrt(dV)`
/// and `n` by `dV` for densities.
pub fn creation_trajectory_mode(
    p: &CreationParams,
    g: &[f64],
    opts: &TrajectoryModeOptions,
) -> Result<Vec<SiteSummary>> {
    let dim = opts.n_max + 1;
    if g.len() * dim > crate::hilbert::MAX_DENSE_DIM {
        return Err(Error::TooLarge(format!("{} sites x {dim} Fock levels", g.len())));
    }
    if !(opts.cell_volume > 0.0) {
        return Err(invalid("cell volume must be > 0"));
    }
    let ops = CollapseOperators::fock_site(opts.n_max)?;
    let dummy = LatticeSpec::new(1, 1, 1.0, opts.dt, opts.n_steps.max(1), true)?;
    let mut vacuum = vec![C64::new(0.0, 0.0); dim];
    vacuum[0] = C64::new(1.0, 0.0);
    let topts = TrajectoryOptions {
        n_steps: opts.n_steps,
        record_every: opts.record_every,
        measure: NoiseMeasure::Physical,
        threshold: 1.0,
        keep_states: true,
    };
    let mut sites = Vec::with_capacity(g.len());
    for (s, gs) in g.iter().enumerate() {
        let g_eff = gs * opts.cell_volume.sqrt();
        let h = build_hamiltonian(
            &HamiltonianSpec::DisplacedOscillator { omega: p.m, coupling: g_eff, n_max: opts.n_max },
            &dummy,
        )?;
        let u = propagator(&h.matrix, opts.dt);
        let model = TrajectoryModel::new(ops.clone(), p.lambda, opts.dt, Some(u))?;
        let mut times = Vec::new();
        let mut xr: Vec<WeightedMean> = Vec::new();
        let mut xi_im: Vec<WeightedMean> = Vec::new();
        let mut nn: Vec<WeightedMean> = Vec::new();
        let mut top: Vec<WeightedMean> = Vec::new();
        fold_ensemble(&model, &vacuum, &topts, opts.n_traj, stream_seed(opts.seed, s as u64), opts.threads, |rec| {
            if times.is_empty() {
                times = rec.times.clone();
                xr = vec![WeightedMean::default(); times.len()];
                xi_im = xr.clone();
                nn = xr.clone();
                top = xr.clone();
            }
            for (k, st) in rec.states.iter().enumerate() {
                let mut a = C64::new(0.0, 0.0);
                let mut n = 0.0;
                for q in 0..dim {
                    n += q as f64 * st[q].norm_sqr();
                    if q + 1 < dim {
                        a += ((q + 1) as f64).sqrt() * st[q].conj() * st[q + 1];
                    }
                }
                xr[k].push(0.0, a.re);
                xi_im[k].push(0.0, a.im);
                nn[k].push(0.0, n);
                top[k].push(0.0, st[dim - 1].norm_sqr());
            }
        })?;
        sites.push(SiteSummary {
            g: *gs,
            xi_mean: xr.iter().zip(&xi_im).map(|(r, i)| C64::new(r.mean(), i.mean())).collect(),
            xi_stderr: xr.iter().zip(&xi_im).map(|(r, i)| r.stderr().hypot(i.stderr())).collect(),
            number_mean: nn.iter().map(|a| a.mean()).collect(),
            number_stderr: nn.iter().map(|a| a.stderr()).collect(),
            top_level_weight: top.iter().map(|a| a.mean()).fold(0.0, f64::max),
            times,
        });
    }
    Ok(sites)
}

/// Collapse parameters expressed as a creation-model parameter set.
pub fn from_collapse(params: &CollapseParams, m: f64) -> Result<CreationParams> {
    CreationParams::new(m, params.lambda)
}
