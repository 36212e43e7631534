//! Particle mass and energy tensors, the collapse energy-gain law, the
//! ensemble W-field energy density and the energy ledger.

use num_complex::Complex64 as C64;
use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::hilbert::{
    build_hamiltonian, gaussian_packet, CollapseOperators, DensityMatrix, Hamiltonian, HamiltonianSpec, SmearingKernel,
};
use crate::lattice_noise::{CollapseParams, LatticeSpec};
use crate::master_equation::{integrate_master, LindbladGenerator, MasterOptions};
use crate::ode::{integrate, Rk4Options};

// ---------------------------------------------------------------------------
// lattice derivatives

fn shifted(lattice: &LatticeSpec, f: &[C64], cell: usize, axis: usize, step: i64) -> Option<C64> {
    lattice.neighbor(cell, axis, step).map(|c| f[c])
}

/// Central difference along `axis`; zero where a neighbour is missing.
fn central(lattice: &LatticeSpec, f: &[C64], axis: usize) -> Vec<C64> {
    let h = 0.5 / lattice.dx;
    (0..f.len())
        .map(|c| match (shifted(lattice, f, c, axis, 1), shifted(lattice, f, c, axis, -1)) {
            (Some(p), Some(m)) => (p - m) * h,
            _ => C64::new(0.0, 0.0),
        })
        .collect()
}

fn central_real(lattice: &LatticeSpec, f: &[f64], axis: usize) -> Vec<f64> {
    let h = 0.5 / lattice.dx;
    (0..f.len())
        .map(|c| match (lattice.neighbor(c, axis, 1), lattice.neighbor(c, axis, -1)) {
            (Some(p), Some(m)) => (f[p] - f[m]) * h,
            _ => 0.0,
        })
        .collect()
}

/// Second derivative `d_i d_j`: three-point stencil on the diagonal, four-point
/// cross stencil off it.
fn second(lattice: &LatticeSpec, f: &[C64], i: usize, j: usize) -> Vec<C64> {
    if i != j {
        return central(lattice, &central(lattice, f, j), i);
    }
    let h2 = 1.0 / (lattice.dx * lattice.dx);
    (0..f.len())
        .map(|c| match (shifted(lattice, f, c, i, 1), shifted(lattice, f, c, i, -1)) {
            (Some(p), Some(m)) => (p - f[c] * 2.0 + m) * h2,
            _ => C64::new(0.0, 0.0),
        })
        .collect()
}

/// `-(1/2m) laplacian psi + U psi` with the nearest-neighbour stencil.
fn apply_h(lattice: &LatticeSpec, psi: &[C64], mass: f64, potential: Option<&[f64]>) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); psi.len()];
    for axis in 0..lattice.dim {
        let d2 = second(lattice, psi, axis, axis);
        for (o, v) in out.iter_mut().zip(d2) {
            *o -= v / (2.0 * mass);
        }
    }
    if let Some(u) = potential {
        for ((o, p), u) in out.iter_mut().zip(psi).zip(u) {
            *o += p * u;
        }
    }
    out
}

fn interior_mask(lattice: &LatticeSpec, depth: i64) -> Vec<bool> {
    (0..lattice.n_cells())
        .map(|c| {
            lattice.periodic
                || (0..lattice.dim).all(|axis| {
                    lattice.neighbor(c, axis, depth).is_some() && lattice.neighbor(c, axis, -depth).is_some()
                })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// particle tensors

/// Components of one symmetric tensor field; `space[i][j]` holds `T^{ij}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub t00: Vec<f64>,
    pub t0i: Vec<Vec<f64>>,
    pub tij: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleTensors {
    /// Mass density and flux `T_m`.
    pub mass: TensorField,
    /// Kinetic-energy density and flux `T_e`.
    pub energy: TensorField,
    /// Cells where every stencil used stays on the lattice.
    pub interior: Vec<bool>,
}

/// `T_m^{ij}` uses the momentum-flux sign convention
/// `(1/4m)[d_i psi* d_j psi + d_j psi* d_i psi - psi* d_i d_j psi - psi d_i d_j psi*]`,
/// for which `d_t T^{0i} + d_j T^{ij}` equals the force density.
fn mass_tensor(lattice: &LatticeSpec, f: &[C64], m: f64) -> TensorField {
    let d = lattice.dim;
    let grads: Vec<Vec<C64>> = (0..d).map(|i| central(lattice, f, i)).collect();
    let t00 = f.iter().map(|v| m * v.norm_sqr()).collect();
    let t0i = grads.iter().map(|g| f.iter().zip(g).map(|(v, dv)| (v.conj() * dv).im).collect()).collect();
    let mut tij = vec![vec![Vec::new(); d]; d];
    for i in 0..d {
        for j in i..d {
            let dd = second(lattice, f, i, j);
            let comp: Vec<f64> = (0..f.len())
                .map(|c| ((grads[i][c].conj() * grads[j][c]).re - (f[c].conj() * dd[c]).re) / (2.0 * m))
                .collect();
            tij[j][i] = comp.clone();
            tij[i][j] = comp;
        }
    }
    TensorField { t00, t0i, tij }
}

fn add_scaled(acc: &mut TensorField, other: &TensorField, s: f64) {
    let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
    add(&mut acc.t00, &other.t00);
    for (a, b) in acc.t0i.iter_mut().zip(&other.t0i) {
        add(a, b);
    }
    for (ra, rb) in acc.tij.iter_mut().zip(&other.tij) {
        for (a, b) in ra.iter_mut().zip(rb) {
            add(a, b);
        }
    }
}

/// Mass and kinetic-energy tensors of a one-particle wavefunction.
///
/// `psi` is the continuum wavefunction sampled at cell centres, normalized as
/// `dV sum |psi|^2 = 1`. `T_e` is `(1/2m^2) sum_k T_m[d_k psi]`, which gives
/// `T_e^{00} = |grad psi|^2 / 2m`.
pub fn particle_tensor_components(lattice: &LatticeSpec, psi: &[C64], mass: f64) -> Result<ParticleTensors> {
    let n = lattice.n_cells();
    if psi.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: psi.len() });
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(invalid(format!("mass must be > 0, got {mass}")));
    }
    let norm: f64 = psi.iter().map(|v| v.norm_sqr()).sum::<f64>() * lattice.cell_volume();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(invalid(format!("wavefunction must satisfy dV sum |psi|^2 = 1, got {norm}")));
    }
    let mass_t = mass_tensor(lattice, psi, mass);
    let mut energy = TensorField {
        t00: vec![0.0; n],
        t0i: vec![vec![0.0; n]; lattice.dim],
        tij: vec![vec![vec![0.0; n]; lattice.dim]; lattice.dim],
    };
    for k in 0..lattice.dim {
        let dk = central(lattice, psi, k);
        add_scaled(&mut energy, &mass_tensor(lattice, &dk, mass), 1.0 / (2.0 * mass * mass));
    }
    let interior = interior_mask(lattice, 3);
    let zero = |f: &mut Vec<f64>| {
        f.iter_mut().zip(&interior).for_each(|(v, ok)| {
            if !ok {
                *v = 0.0
            }
        })
    };
    let mut out = ParticleTensors { mass: mass_t, energy, interior: interior.clone() };
    for field in [&mut out.mass, &mut out.energy] {
        zero(&mut field.t00);
        field.t0i.iter_mut().for_each(zero);
        field.tij.iter_mut().flatten().for_each(zero);
    }
    Ok(out)
}

/// `d_t T_m^{00} + d_i T_m^{0i}` with `d_t` from `psi' = -i H psi`.
pub fn continuity_residual(
    lattice: &LatticeSpec,
    psi: &[C64],
    mass: f64,
    potential: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let t = particle_tensor_components(lattice, psi, mass)?;
    let dpsi: Vec<C64> = apply_h(lattice, psi, mass, potential).into_iter().map(|v| v * C64::new(0.0, -1.0)).collect();
    let mut r: Vec<f64> = psi.iter().zip(&dpsi).map(|(p, d)| 2.0 * mass * (p.conj() * d).re).collect();
    for i in 0..lattice.dim {
        let flux = mass_tensor(lattice, psi, mass).t0i.swap_remove(i);
        for (rv, dv) in r.iter_mut().zip(central_real(lattice, &flux, i)) {
            *rv += dv;
        }
    }
    for (rv, ok) in r.iter_mut().zip(&t.interior) {
        if !ok {
            *rv = 0.0;
        }
    }
    Ok(r)
}

/// Spatial rows of the mass-tensor divergence and the force density.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBalance {
    /// `d_t T^{0i} + d_j T^{ij}` per axis.
    pub divergence: Vec<Vec<f64>>,
    /// `-n d_i U` per axis.
    pub force: Vec<Vec<f64>>,
    pub interior: Vec<bool>,
}

impl MomentumBalance {
    pub fn max_residual(&self) -> f64 {
        let mut m = 0.0f64;
        for (d, f) in self.divergence.iter().zip(&self.force) {
            for c in 0..d.len() {
                if self.interior[c] {
                    m = m.max((d[c] - f[c]).abs());
                }
            }
        }
        m
    }

    pub fn max_force(&self) -> f64 {
        self.force.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn momentum_balance(
    lattice: &LatticeSpec,
    psi: &[C64],
    mass: f64,
    potential: Option<&[f64]>,
) -> Result<MomentumBalance> {
    let n = lattice.n_cells();
    if let Some(u) = potential {
        if u.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: u.len() });
        }
    }
    let t = particle_tensor_components(lattice, psi, mass)?;
    let dpsi: Vec<C64> = apply_h(lattice, psi, mass, potential).into_iter().map(|v| v * C64::new(0.0, -1.0)).collect();
    let full = mass_tensor(lattice, psi, mass);
    let density: Vec<f64> = psi.iter().map(|v| v.norm_sqr()).collect();
    let mut divergence = Vec::new();
    let mut force = Vec::new();
    for i in 0..lattice.dim {
        let g = central(lattice, psi, i);
        let gd = central(lattice, &dpsi, i);
        // d_t Im(psi* d_i psi) = Im(psi'* d_i psi + psi* d_i psi')
        let mut div: Vec<f64> = (0..n).map(|c| (dpsi[c].conj() * g[c] + psi[c].conj() * gd[c]).im).collect();
        for j in 0..lattice.dim {
            for (dv, v) in div.iter_mut().zip(central_real(lattice, &full.tij[i][j], j)) {
                *dv += v;
            }
        }
        let f = match potential {
            Some(u) => central_real(lattice, u, i).iter().zip(&density).map(|(du, nn)| -nn * du).collect(),
            None => vec![0.0; n],
        };
        divergence.push(div);
        force.push(f);
    }
    Ok(MomentumBalance { divergence, force, interior: t.interior })
}

// ---------------------------------------------------------------------------
// energy gain

#[derive(Debug, Clone, PartialEq)]
pub enum GainState {
    /// Gaussian packet of width `width` and mean momentum `k0` on a 1-D lattice,
    /// evolved with the dense master equation.
    Packet { width: f64, k0: f64, potential: Option<Vec<f64>> },
    /// Translation-invariant mixture with Gaussian momentum spread. Such a state
    /// commutes with `H`, so `rho(z, z') = f(z - z')` and the master equation
    /// reduces to `df/dt = -Gamma(z - z') f`; this is what makes 3-D lattices
    /// of `32^3` cells tractable.
    Homogeneous { momentum_width: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainScenario {
    pub lattice: LatticeSpec,
    /// Inertial mass in the kinetic term.
    pub mass: f64,
    pub species: usize,
    /// Non-interacting particles; the rate is additive.
    pub n_particles: usize,
    pub t_max: f64,
    pub dt: f64,
    pub state: GainState,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub measured: f64,
    pub analytic: f64,
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    /// True when an external or pair potential is present, so the gain no
    /// longer splits into a purely local kinetic term.
    pub flagged_potential: bool,
}

/// `dim lambda (M/M0)^2 N / (4 m a^2)`.
pub fn analytic_gain_rate(dim: usize, params: &CollapseParams, species: usize, mass: f64, n: f64) -> Result<f64> {
    let r = params.mass_ratio(species)?;
    Ok(dim as f64 * params.lambda * r * r * n / (4.0 * mass * params.a * params.a))
}

/// Local particle-energy source density `dim lambda (M/M0)^2 nbar(x) / (4 m a^2)`.
pub fn gain_density_rate(
    lattice: &LatticeSpec,
    params: &CollapseParams,
    species: usize,
    mass: f64,
    nbar: &[f64],
) -> Result<Vec<f64>> {
    if nbar.len() != lattice.n_cells() {
        return Err(Error::DimensionMismatch { expected: lattice.n_cells(), got: nbar.len() });
    }
    let c = analytic_gain_rate(lattice.dim, params, species, mass, 1.0)?;
    Ok(nbar.iter().map(|n| c * n).collect())
}

fn slope(times: &[f64], values: &[f64]) -> f64 {
    let n = times.len() as f64;
    let mt = times.iter().sum::<f64>() / n;
    let mv = values.iter().sum::<f64>() / n;
    let num: f64 = times.iter().zip(values).map(|(t, v)| (t - mt) * (v - mv)).sum();
    let den: f64 = times.iter().map(|t| (t - mt) * (t - mt)).sum();
    num / den
}

fn steps_of(t_max: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && t_max > 0.0) {
        return Err(invalid("t_max and dt must be > 0"));
    }
    let n = (t_max / dt).round() as usize;
    if n == 0 || ((n as f64) * dt - t_max).abs() > 1e-9 * t_max {
        return Err(invalid("t_max must be a whole number of steps"));
    }
    Ok(n)
}

/// Lattice momenta of one axis with Gaussian weights, normalized.
fn momentum_weights(lattice: &LatticeSpec, width: f64) -> Vec<(f64, f64)> {
    let n = lattice.n as i64;
    let ks: Vec<f64> = (0..n)
        .map(|j| {
            let jj = if j > n / 2 { j - n } else { j };
            2.0 * PI * jj as f64 / (n as f64 * lattice.dx)
        })
        .collect();
    let w: Vec<f64> = ks.iter().map(|k| (-k * k / (2.0 * width * width)).exp()).collect();
    let s: f64 = w.iter().sum();
    ks.into_iter().zip(w).map(|(k, w)| (k, w / s)).collect()
}

pub fn energy_gain_rate(scenario: &GainScenario, params: &CollapseParams) -> Result<GainReport> {
    params.validate()?;
    let lat = &scenario.lattice;
    lat.validate()?;
    if scenario.n_particles == 0 {
        return Err(invalid("scenario needs at least one particle"));
    }
    let n_steps = steps_of(scenario.t_max, scenario.dt)?;
    let record = (n_steps / 20).max(1);
    let analytic = analytic_gain_rate(lat.dim, params, scenario.species, scenario.mass, scenario.n_particles as f64)?;
    let np = scenario.n_particles as f64;
    let mut times = Vec::new();
    let mut energies = Vec::new();
    let mut flagged = false;
    match &scenario.state {
        GainState::Packet { width, k0, potential } => {
            flagged = potential.is_some();
            let spec = match potential {
                Some(u) => HamiltonianSpec::ExternalPotential { mass: scenario.mass, potential: u.clone() },
                None => HamiltonianSpec::FreeParticle { mass: scenario.mass },
            };
            let h = build_hamiltonian(&spec, lat)?;
            let ops = CollapseOperators::single_particle(lat, params, scenario.species)?;
            let psi = gaussian_packet(lat, 0.0, *width, *k0)?;
            let gen = LindbladGenerator::new(h.clone(), &ops, params.lambda)?;
            let mut opts = MasterOptions::new(scenario.t_max, scenario.dt, record);
            opts.check_positivity = false;
            let rec = integrate_master(&psi.density_matrix(), &gen, opts)?;
            for (t, rho) in rec.times.iter().zip(&rec.states) {
                times.push(*t);
                energies.push(np * rho.expectation(&h.matrix));
            }
        }
        GainState::Homogeneous { momentum_width } => {
            if !(*momentum_width > 0.0) {
                return Err(invalid("momentum width must be > 0"));
            }
            let kernel = SmearingKernel::new(lat, params.a)?;
            let ratio = params.mass_ratio(scenario.species)?;
            let n = lat.n as i64;
            let axis_gamma: Vec<f64> = (0..n).map(|j| kernel.axis_overlap(lat.axis_offset(j as usize, 0))).collect();
            let mw = momentum_weights(lat, *momentum_width);
            let axis_f: Vec<f64> = (0..n)
                .map(|j| {
                    let r = lat.axis_offset(j as usize, 0) as f64 * lat.dx;
                    mw.iter().map(|(k, w)| w * (k * r).cos()).sum()
                })
                .collect();
            let cells = lat.n_cells();
            let mut gamma = vec![0.0; cells];
            let mut f0 = vec![0.0; cells];
            for c in 0..cells {
                let idx = lat.multi_index(c);
                let mut ov = 1.0;
                let mut fv = 1.0 / cells as f64;
                for axis in 0..lat.dim {
                    ov *= axis_gamma[idx[axis]];
                    fv *= axis_f[idx[axis]];
                }
                // (lambda/2) dV sum_x (A_0 - A_r)^2 = lambda (M/M0)^2 (1 - overlap)
                gamma[c] = params.lambda * ratio * ratio * (1.0 - ov);
                f0[c] = fv;
            }
            let hop = 1.0 / (2.0 * scenario.mass * lat.dx * lat.dx);
            let origin = 0usize;
            let mut neighbours = Vec::new();
            for axis in 0..lat.dim {
                for step in [-1, 1] {
                    if let Some(c) = lat.neighbor(origin, axis, step) {
                        neighbours.push(c);
                    }
                }
            }
            let energy = |f: &Vec<f64>| {
                let mut e = 2.0 * lat.dim as f64 * hop * f[origin];
                for c in &neighbours {
                    e -= hop * f[*c];
                }
                np * cells as f64 * e
            };
            integrate(
                |_, f: &Vec<f64>| f.iter().zip(&gamma).map(|(v, g)| -g * v).collect(),
                f0,
                0.0,
                n_steps,
                Rk4Options::new(scenario.dt),
                record,
                |_| {},
                |_, t, f| {
                    times.push(t);
                    energies.push(energy(f));
                    Ok(())
                },
            )?;
        }
    }
    let measured = slope(&times, &energies);
    if !measured.is_finite() {
        return Err(Error::NonFinite("energy slope".into()));
    }
    Ok(GainReport { measured, analytic, times, energies, flagged_potential: flagged })
}

// ---------------------------------------------------------------------------
// W-field energy density

/// Number density history `nbar(z, t_k)` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistory {
    pub times: Vec<f64>,
    pub densities: Vec<Vec<f64>>,
}

impl DensityHistory {
    /// `nbar(z) = rho_zz / dV` for single-particle lattice density matrices.
    pub fn from_density_matrices(lattice: &LatticeSpec, times: &[f64], states: &[DensityMatrix]) -> Self {
        let dv = lattice.cell_volume();
        DensityHistory {
            times: times.to_vec(),
            densities: states.iter().map(|r| (0..r.dim()).map(|i| r.matrix[(i, i)].re / dv).collect()).collect(),
        }
    }

    /// Time-independent density sampled on the grid.
    pub fn constant(times: &[f64], density: Vec<f64>) -> Self {
        DensityHistory { times: times.to_vec(), densities: vec![density; times.len()] }
    }

    fn validate(&self, n_cells: usize) -> Result<()> {
        if self.times.is_empty() {
            return Err(invalid("density history is empty"));
        }
        if self.densities.len() != self.times.len() {
            return Err(Error::DimensionMismatch { expected: self.times.len(), got: self.densities.len() });
        }
        if let Some(d) = self.densities.iter().find(|d| d.len() != n_cells) {
            return Err(Error::DimensionMismatch { expected: n_cells, got: d.len() });
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("history times must increase"));
        }
        Ok(())
    }

    /// Cumulative trapezoid `int_0^{t_k} nbar(z, t1) dt1` for every record.
    fn cumulative(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.densities[0].len()]];
        for k in 1..self.times.len() {
            let h = self.times[k] - self.times[k - 1];
            let prev = &out[k - 1];
            let row = prev
                .iter()
                .zip(&self.densities[k - 1])
                .zip(&self.densities[k])
                .map(|((p, a), b)| p + 0.5 * h * (a + b))
                .collect();
            out.push(row);
        }
        out
    }
}

/// Prefactor of the kernel form of the W-field energy density in `dim`
/// dimensions: `lambda (M/M0)^2 / (2 m a^4 (pi a^2)^(dim/2))`.
///
/// For a smeared density `A = K * n` with `H = -laplacian/2m`, the rate
/// `(lambda/2) sum_bc (A_b - A_c)^2 H_bc rho_cb` reduces to
/// `-(lambda/2m) int dz |grad K(x - z)|^2 nbar(z)`, and
/// `|grad K|^2 = (pi a^2)^(-dim/2) r^2 a^-4 exp(-r^2/a^2)`.
/// In 3-D this is `lambda / (2 pi^(3/2) m a^7)`.
pub fn wfield_prefactor(dim: usize, params: &CollapseParams, species: usize, mass: f64) -> Result<f64> {
    let r = params.mass_ratio(species)?;
    let a = params.a;
    Ok(params.lambda * r * r / (2.0 * mass * a.powi(4) * (PI * a * a).powf(dim as f64 / 2.0)))
}

/// Ensemble W-field energy density `T_w^{00}(x, t_k)` at every history time,
/// `-C sum_z dV |z - x|^2 exp(-|z - x|^2/a^2) int_0^t nbar(z)`.
pub fn wfield_energy_density(
    lattice: &LatticeSpec,
    params: &CollapseParams,
    species: usize,
    mass: f64,
    history: &DensityHistory,
) -> Result<Vec<Vec<f64>>> {
    let n = lattice.n_cells();
    history.validate(n)?;
    let pref = wfield_prefactor(lattice.dim, params, species, mass)?;
    let dv = lattice.cell_volume();
    let a2 = params.a * params.a;
    let cumulative = history.cumulative();
    let mut out = Vec::with_capacity(cumulative.len());
    for cum in &cumulative {
        let mut row = vec![0.0; n];
        for (z, &m) in cum.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (x, v) in row.iter_mut().enumerate() {
                let r2 = lattice.distance_sq(x, z);
                *v -= pref * dv * r2 * (-r2 / a2).exp() * m;
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// W-field momentum density `(-i lambda/2) int dt1 tr([A(x), d_i A(x)] rho)`
/// per axis and history time. `A(x)` and `d_i A(x)` are both diagonal in the
/// configuration basis, so the commutator and the density vanish identically.
pub fn wfield_momentum_density(
    lattice: &LatticeSpec,
    ops: &CollapseOperators,
    times: &[f64],
    states: &[DensityMatrix],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if states.is_empty() || states.len() != times.len() {
        return Err(invalid("density-matrix history missing or misaligned"));
    }
    let n = lattice.n_cells();
    if ops.n_cells != n {
        return Err(Error::DimensionMismatch { expected: n, got: ops.n_cells });
    }
    if let Some(r) = states.iter().find(|r| r.dim() != ops.n_basis()) {
        return Err(Error::DimensionMismatch { expected: ops.n_basis(), got: r.dim() });
    }
    Ok(vec![vec![vec![0.0; n]; times.len()]; lattice.dim])
}

fn cumulative_trapezoid(times: &[f64], rates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; rates[0].len()]];
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        let row =
            out[k - 1].iter().zip(&rates[k - 1]).zip(&rates[k]).map(|((p, a), b)| p + 0.5 * h * (a + b)).collect();
        out.push(row);
    }
    out
}

/// Lattice form of the W-field energy density,
/// `(lambda/2) int dt1 sum_bc (A_b(x) - A_c(x))^2 H_bc rho_cb(t1)`.
///
/// Its spatial integral is minus the dissipative particle-energy change, so it
/// closes the ledger to the accuracy of the time quadrature.
pub fn wfield_energy_density_lattice(
    ops: &CollapseOperators,
    h: &Hamiltonian,
    lambda: f64,
    times: &[f64],
    states: &[DensityMatrix],
) -> Result<Vec<Vec<f64>>> {
    if states.is_empty() || states.len() != times.len() {
        return Err(invalid("density-matrix history missing or misaligned"));
    }
    let nb = ops.n_basis();
    if h.dim() != nb {
        return Err(Error::DimensionMismatch { expected: nb, got: h.dim() });
    }
    let rates: Vec<Vec<f64>> = states
        .iter()
        .map(|rho| {
            let mut r = vec![0.0; ops.n_cells];
            for &(b, c, hv) in &h.triplets {
                if b == c {
                    continue;
                }
                let w = 0.5 * lambda * (hv * rho.matrix[(c, b)]).re;
                for (x, rv) in r.iter_mut().enumerate() {
                    let d = ops.profiles[b][x] - ops.profiles[c][x];
                    *rv += w * d * d;
                }
            }
            r
        })
        .collect();
    Ok(cumulative_trapezoid(times, &rates))
}

// ---------------------------------------------------------------------------
// ledger

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub times: Vec<f64>,
    pub particle: Vec<f64>,
    pub wfield: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerReport {
    pub max_drift: f64,
    pub step: usize,
    /// Largest particle-energy excursion, the natural scale for the drift.
    pub scale: f64,
}

pub fn ledger_check(particle: &[f64], wfield: &[f64]) -> Result<LedgerReport> {
    if particle.is_empty() {
        return Err(invalid("empty energy series"));
    }
    if particle.len() != wfield.len() {
        return Err(Error::DimensionMismatch { expected: particle.len(), got: wfield.len() });
    }
    let base = particle[0] + wfield[0];
    let mut rep = LedgerReport { max_drift: 0.0, step: 0, scale: 0.0 };
    for (k, (p, w)) in particle.iter().zip(wfield).enumerate() {
        let d = (p + w - base).abs();
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("ledger at step {k}")));
        }
        if d > rep.max_drift {
            rep.max_drift = d;
            rep.step = k;
        }
        rep.scale = rep.scale.max((p - particle[0]).abs()).max(p.abs());
    }
    Ok(rep)
}

/// Particle and W-field energies of a single packet evolved by the master
/// equation, with the W-field side from [`wfield_energy_density_lattice`].
pub fn packet_ledger(
    lattice: &LatticeSpec,
    params: &CollapseParams,
    mass: f64,
    width: f64,
    k0: f64,
    t_max: f64,
    dt: f64,
) -> Result<EnergyLedger> {
    let h = build_hamiltonian(&HamiltonianSpec::FreeParticle { mass }, lattice)?;
    let ops = CollapseOperators::single_particle(lattice, params, 0)?;
    let psi = gaussian_packet(lattice, 0.0, width, k0)?;
    let gen = LindbladGenerator::new(h.clone(), &ops, params.lambda)?;
    let mut opts = MasterOptions::new(t_max, dt, 1);
    opts.check_positivity = false;
    let rec = integrate_master(&psi.density_matrix(), &gen, opts)?;
    let dens = wfield_energy_density_lattice(&ops, &h, params.lambda, &rec.times, &rec.states)?;
    let dv = lattice.cell_volume();
    Ok(EnergyLedger {
        particle: rec.states.iter().map(|r| r.expectation(&h.matrix)).collect(),
        wfield: dens.iter().map(|row| dv * row.iter().sum::<f64>()).collect(),
        times: rec.times,
    })
}
