//! Lindblad evolution `drho/dt = -i[H, rho] - (lambda/2) dV sum_x [A(x), [A(x), rho]]`.
//!
//! With diagonal `A` the double commutator is the Hadamard product `Gamma o rho`.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{invalid, Error, Result};
use crate::hilbert::{CollapseOperators, DensityMatrix, Hamiltonian};
use crate::ode::{integrate, Rk4Options};

#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    pub h: Hamiltonian,
    pub gamma: DMatrix<f64>,
}

impl LindbladGenerator {
    pub fn new(h: Hamiltonian, ops: &CollapseOperators, lambda: f64) -> Result<Self> {
        if h.dim() != ops.n_basis() {
            return Err(Error::DimensionMismatch { expected: ops.n_basis(), got: h.dim() });
        }
        Ok(LindbladGenerator { h, gamma: ops.decoherence_matrix(lambda) })
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    fn commutator(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        if !self.h.is_sparse() {
            return &self.h.matrix * rho - rho * &self.h.matrix;
        }
        let n = rho.nrows();
        let mut out = DMatrix::<C64>::zeros(n, n);
        for &(i, k, v) in &self.h.triplets {
            for j in 0..n {
                out[(i, j)] += v * rho[(k, j)];
            }
        }
        for &(k, j, v) in &self.h.triplets {
            let src = rho.column(k).clone_owned();
            let mut dst = out.column_mut(j);
            for i in 0..n {
                dst[i] -= src[i] * v;
            }
        }
        out
    }

    pub fn apply(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let mut out = self.commutator(rho) * C64::new(0.0, -1.0);
        out.zip_zip_apply(rho, &self.gamma, |o, r, g| *o -= r * g);
        out
    }

    /// Energy change rate `tr(H D(rho))` from the dissipator alone.
    pub fn dissipative_energy_rate(&self, rho: &DMatrix<C64>) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for b in 0..n {
            for c in 0..n {
                s -= (self.h.matrix[(c, b)] * rho[(b, c)]).re * self.gamma[(b, c)];
            }
        }
        s
    }
}

/// `Gamma_bc` between two basis states.
pub fn decoherence_rate(ops: &CollapseOperators, lambda: f64, b: usize, c: usize) -> Result<f64> {
    let n = ops.n_basis();
    if b >= n || c >= n {
        return Err(invalid(format!("basis index out of range ({b}, {c}) for {n} states")));
    }
    let s: f64 = ops.profiles[b].iter().zip(&ops.profiles[c]).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(0.5 * lambda * ops.cell_volume * s)
}

#[derive(Debug, Clone, Copy)]
pub struct MasterOptions {
    pub t_max: f64,
    pub dt: f64,
    pub record_every: usize,
    /// Check trace, hermiticity and positivity at each record.
    pub check_invariants: bool,
    pub check_positivity: bool,
}

impl MasterOptions {
    pub fn new(t_max: f64, dt: f64, record_every: usize) -> Self {
        MasterOptions { t_max, dt, record_every, check_invariants: true, check_positivity: true }
    }
}

#[derive(Debug, Clone)]
pub struct MasterRecord {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

pub fn check_density_matrix(rho: &DensityMatrix, positivity: bool) -> Result<()> {
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
        return Err(Error::InvariantViolation(format!("trace drifted to {tr}")));
    }
    let herm = rho.hermiticity_error();
    if herm > 1e-10 {
        return Err(Error::InvariantViolation(format!("hermiticity error {herm:e}")));
    }
    if positivity {
        let ev = rho.min_eigenvalue();
        if ev < -1e-10 {
            return Err(Error::InvariantViolation(format!("negative eigenvalue {ev:e}")));
        }
    }
    Ok(())
}

pub fn integrate_master(rho0: &DensityMatrix, gen: &LindbladGenerator, opts: MasterOptions) -> Result<MasterRecord> {
    if rho0.dim() != gen.dim() {
        return Err(Error::DimensionMismatch { expected: gen.dim(), got: rho0.dim() });
    }
    if !(opts.dt > 0.0) || !(opts.t_max >= 0.0) {
        return Err(invalid("t_max must be >= 0 and dt > 0"));
    }
    let n_steps = (opts.t_max / opts.dt).round() as usize;
    if ((n_steps as f64) * opts.dt - opts.t_max).abs() > 1e-9 * opts.t_max.max(1.0) {
        return Err(invalid("t_max must be a whole number of steps"));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    integrate(
        |_, r: &DMatrix<C64>| gen.apply(r),
        rho0.matrix.clone(),
        0.0,
        n_steps,
        Rk4Options::new(opts.dt),
        opts.record_every,
        |r| {
            let adj = r.adjoint();
            *r = (&*r + adj) * C64::new(0.5, 0.0);
        },
        |_, t, r| {
            let dm = DensityMatrix { matrix: r.clone() };
            if opts.check_invariants {
                check_density_matrix(&dm, opts.check_positivity)?;
            }
            times.push(t);
            states.push(dm);
            Ok(())
        },
    )?;
    Ok(MasterRecord { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{build_hamiltonian, HamiltonianSpec};
    use crate::lattice_noise::LatticeSpec;

    fn two_branch() -> CollapseOperators {
        CollapseOperators::from_profiles(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap()
    }

    #[test]
    fn off_diagonal_decays_at_gamma() {
        let ops = two_branch();
        let lambda = 0.7;
        let g = decoherence_rate(&ops, lambda, 0, 1).unwrap();
        assert!((g - lambda).abs() < 1e-15);
        let l = LatticeSpec::new(1, 2, 1.0, 0.1, 1, true).unwrap();
        let h = build_hamiltonian(&HamiltonianSpec::Zero { dim: 2 }, &l).unwrap();
        let gen = LindbladGenerator::new(h, &ops, lambda).unwrap();
        let mut rho = DensityMatrix { matrix: DMatrix::from_element(2, 2, C64::new(0.5, 0.0)) };
        rho.matrix[(0, 1)] = C64::new(0.3, 0.2);
        rho.matrix[(1, 0)] = C64::new(0.3, -0.2);
        let rec = integrate_master(&rho, &gen, MasterOptions::new(2.0, 0.01, 100)).unwrap();
        let last = rec.states.last().unwrap();
        let expect = C64::new(0.3, 0.2) * (-g * 2.0).exp();
        assert!((last.matrix[(0, 1)] - expect).norm() < 1e-10);
        assert!((last.matrix[(0, 0)].re - 0.5).abs() < 1e-14);
    }

    #[test]
    fn sparse_and_dense_commutators_agree() {
        let l = LatticeSpec::new(1, 24, 0.5, 0.1, 1, true).unwrap();
        let h = build_hamiltonian(&HamiltonianSpec::FreeParticle { mass: 1.3 }, &l).unwrap();
        assert!(h.is_sparse());
        let ops = CollapseOperators::single_particle(&l, &crate::CollapseParams::single(1.0, 1.0), 0).unwrap();
        let gen = LindbladGenerator::new(h.clone(), &ops, 1.0).unwrap();
        let rho = DMatrix::from_fn(24, 24, |i, j| C64::new((i * j) as f64 * 0.01, i as f64 - j as f64));
        let sparse = gen.commutator(&rho);
        let dense = &h.matrix * &rho - &rho * &h.matrix;
        assert!((sparse - dense).camax() < 1e-12);
    }
}
