//! States, smeared mass densities, collapse operators and Hamiltonians.
//!
//! Every collapse operator used here is diagonal in the working basis
//! (branch configurations, lattice positions or Fock numbers), so it is stored
//! as one profile `A_b(x)` per basis state `b`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::error::{invalid, Error, Result};
use crate::lattice_noise::{CollapseParams, LatticeSpec};

/// Largest dense Hilbert-space dimension accepted.
pub const MAX_DENSE_DIM: usize = 4096;

/// Gaussian smearing kernel on a lattice, normalized per axis so that
/// `dV sum_x K(x - z)^2 = 1` holds exactly.
///
/// The continuum kernel is `(pi a^2)^(-d/4) exp(-(x-z)^2 / 2a^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmearingKernel {
    pub a: f64,
    pub dx: f64,
    pub n: usize,
    pub dim: usize,
    pub periodic: bool,
    axis_norm: f64,
}

impl SmearingKernel {
    pub fn new(lattice: &LatticeSpec, a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(invalid(format!("smearing length must be > 0, got {a}")));
        }
        let mut k = SmearingKernel {
            a,
            dx: lattice.dx,
            n: lattice.n,
            dim: lattice.dim,
            periodic: lattice.periodic,
            axis_norm: 1.0,
        };
        let s = k.raw_overlap(0);
        k.axis_norm = 1.0 / s.sqrt();
        Ok(k)
    }

    /// Continuum per-axis normalization `(pi a^2)^(-1/4)`.
    pub fn continuum_axis_norm(&self) -> f64 {
        (std::f64::consts::PI * self.a * self.a).powf(-0.25)
    }

    pub fn axis_norm(&self) -> f64 {
        self.axis_norm
    }

    fn gauss(&self, j: i64) -> f64 {
        let d = j as f64 * self.dx;
        (-d * d / (2.0 * self.a * self.a)).exp()
    }

    fn wrap(&self, j: i64) -> i64 {
        if !self.periodic {
            return j;
        }
        let n = self.n as i64;
        let mut d = j.rem_euclid(n);
        if d > n / 2 {
            d -= n;
        }
        d
    }

    /// Offsets over which lattice sums run: the box for periodic lattices, the
    /// whole integer line (truncated where the Gaussian underflows) otherwise.
    fn sum_range(&self, shift: i64) -> (i64, i64) {
        if self.periodic {
            let n = self.n as i64;
            (-(n / 2) + if n % 2 == 0 { 1 } else { 0 }, n / 2)
        } else {
            let reach = (40.0 * self.a / self.dx).ceil() as i64 + 1;
            (shift.min(0) - reach, shift.max(0) + reach)
        }
    }

    fn raw_overlap(&self, r: i64) -> f64 {
        let (lo, hi) = self.sum_range(r);
        let mut s = 0.0;
        for j in lo..=hi {
            s += self.gauss(self.wrap(j)) * self.gauss(self.wrap(j - r));
        }
        s * self.dx
    }

    /// Kernel factor along one axis at an index offset.
    pub fn axis_value(&self, offset: i64) -> f64 {
        self.axis_norm * self.gauss(self.wrap(offset))
    }

    /// `K(x_a - x_b)`.
    pub fn value(&self, lattice: &LatticeSpec, a: usize, b: usize) -> f64 {
        let ia = lattice.multi_index(a);
        let ib = lattice.multi_index(b);
        let mut v = 1.0;
        for axis in 0..self.dim {
            v *= self.axis_value(lattice.axis_offset(ia[axis], ib[axis]));
        }
        v
    }

    /// `dx sum_j k(j) k(j - r)` along one axis.
    pub fn axis_overlap(&self, r: i64) -> f64 {
        self.axis_norm * self.axis_norm * self.raw_overlap(r)
    }

    /// `dV sum_x K(x - z) K(x - z')` for an index offset `z' - z`.
    pub fn overlap(&self, r: [i64; 3]) -> f64 {
        (0..self.dim).map(|axis| self.axis_overlap(r[axis])).product()
    }
}

/// Number density of one species on the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesDensity {
    pub species: usize,
    pub density: Vec<f64>,
}

/// A classical mass configuration: one number density per species present.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub parts: Vec<SpeciesDensity>,
}

impl Configuration {
    pub fn single(species: usize, density: Vec<f64>) -> Self {
        Configuration { parts: vec![SpeciesDensity { species, density }] }
    }

    /// Point particles, each contributing `1/dV` to the cell it sits on.
    pub fn points(lattice: &LatticeSpec, species: usize, positions: &[[f64; 3]]) -> Result<Self> {
        let mut density = vec![0.0; lattice.n_cells()];
        let w = 1.0 / lattice.cell_volume();
        for p in positions {
            density[lattice.cell_at(*p)?] += w;
        }
        Ok(Configuration::single(species, density))
    }

    /// Total particle number `dV sum n`.
    pub fn particle_number(&self, lattice: &LatticeSpec) -> f64 {
        let dv = lattice.cell_volume();
        self.parts.iter().map(|p| p.density.iter().sum::<f64>() * dv).sum()
    }
}

/// Smeared mass density `A(x) = sum_z dV K(x - z) (M/M0) n(z)` for one configuration.
pub fn build_mass_density(
    lattice: &LatticeSpec,
    params: &CollapseParams,
    kernel: &SmearingKernel,
    config: &Configuration,
) -> Result<Vec<f64>> {
    let n_cells = lattice.n_cells();
    let dv = lattice.cell_volume();
    let mut out = vec![0.0; n_cells];
    for part in &config.parts {
        if part.density.len() != n_cells {
            return Err(Error::DimensionMismatch { expected: n_cells, got: part.density.len() });
        }
        let ratio = params.mass_ratio(part.species)?;
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
            let c = dv * ratio * nz;
            for (x, ax) in out.iter_mut().enumerate() {
                *ax += c * kernel.value(lattice, x, z);
            }
        }
    }
    Ok(out)
}

/// Diagonal collapse operators: `profiles[b][x] = A_b(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseOperators {
    pub cell_volume: f64,
    pub n_cells: usize,
    pub profiles: Vec<Vec<f64>>,
}

impl CollapseOperators {
    pub fn from_profiles(profiles: Vec<Vec<f64>>, cell_volume: f64) -> Result<Self> {
        let n_cells = profiles.first().map(|p| p.len()).ok_or_else(|| invalid("no basis states"))?;
        if let Some(p) = profiles.iter().find(|p| p.len() != n_cells) {
            return Err(Error::DimensionMismatch { expected: n_cells, got: p.len() });
        }
        if profiles.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("collapse profile contains non-finite values"));
        }
        if !(cell_volume > 0.0) {
            return Err(invalid("cell volume must be positive"));
        }
        Ok(CollapseOperators { cell_volume, n_cells, profiles })
    }

    /// One basis state per classical configuration.
    pub fn for_configurations(
        lattice: &LatticeSpec,
        params: &CollapseParams,
        configs: &[Configuration],
    ) -> Result<Self> {
        let kernel = SmearingKernel::new(lattice, params.a)?;
        let profiles =
            configs.iter().map(|c| build_mass_density(lattice, params, &kernel, c)).collect::<Result<Vec<_>>>()?;
        Self::from_profiles(profiles, lattice.cell_volume())
    }

    /// One particle of `species` in the position basis of the lattice.
    pub fn single_particle(lattice: &LatticeSpec, params: &CollapseParams, species: usize) -> Result<Self> {
        let n = lattice.n_cells();
        if n > MAX_DENSE_DIM {
            return Err(Error::TooLarge(format!("{n} lattice sites exceed {MAX_DENSE_DIM}")));
        }
        let kernel = SmearingKernel::new(lattice, params.a)?;
        let ratio = params.mass_ratio(species)?;
        let profiles = (0..n).map(|b| (0..n).map(|x| ratio * kernel.value(lattice, x, b)).collect()).collect();
        Self::from_profiles(profiles, lattice.cell_volume())
    }

    /// Truncated Fock space of one site with a single collapse channel `A = n`.
    pub fn fock_site(n_max: usize) -> Result<Self> {
        if n_max < 1 {
            return Err(invalid("Fock truncation n_max must be >= 1"));
        }
        let profiles = (0..=n_max).map(|k| vec![k as f64]).collect();
        Self::from_profiles(profiles, 1.0)
    }

    pub fn n_basis(&self) -> usize {
        self.profiles.len()
    }

    /// `Gamma_bc = (lambda/2) dV sum_x (A_b - A_c)^2`; the dissipator is `-Gamma o rho`.
    pub fn decoherence_matrix(&self, lambda: f64) -> DMatrix<f64> {
        let n = self.n_basis();
        let mut g = DMatrix::zeros(n, n);
        for b in 0..n {
            for c in (b + 1)..n {
                let s: f64 = self.profiles[b].iter().zip(&self.profiles[c]).map(|(x, y)| (x - y) * (x - y)).sum();
                let v = 0.5 * lambda * self.cell_volume * s;
                g[(b, c)] = v;
                g[(c, b)] = v;
            }
        }
        g
    }

    /// `<A(x)>` for basis probabilities `p_b`.
    pub fn expectation(&self, probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells];
        for (p, prof) in probs.iter().zip(&self.profiles) {
            if *p == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(prof) {
                *o += p * a;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    Branches(usize),
    LatticeSites(usize),
    Fock { n_max: usize },
}

impl Basis {
    pub fn dim(&self) -> usize {
        match self {
            Basis::Branches(n) | Basis::LatticeSites(n) => *n,
            Basis::Fock { n_max } => n_max + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    pub basis: Basis,
    pub amplitudes: Vec<C64>,
}

impl QuantumState {
    pub fn new(basis: Basis, amplitudes: Vec<C64>) -> Result<Self> {
        if amplitudes.len() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), got: amplitudes.len() });
        }
        let mut s = QuantumState { basis, amplitudes };
        s.normalize()?;
        Ok(s)
    }

    pub fn norm_sq(&self) -> f64 {
        self.amplitudes.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn normalize(&mut self) -> Result<f64> {
        let n2 = self.norm_sq();
        if !(n2 > 0.0 && n2.is_finite()) {
            return Err(Error::NonFinite("state norm".into()));
        }
        let s = 1.0 / n2.sqrt();
        for c in &mut self.amplitudes {
            *c *= s;
        }
        Ok(n2)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn density_matrix(&self) -> DensityMatrix {
        let v = DVector::from_vec(self.amplitudes.clone());
        DensityMatrix { matrix: &v * v.adjoint() }
    }
}

/// Normalized Gaussian wave packet on a 1-D lattice.
pub fn gaussian_packet(lattice: &LatticeSpec, center: f64, width: f64, k0: f64) -> Result<QuantumState> {
    if lattice.dim != 1 {
        return Err(invalid("gaussian_packet builds 1-D packets only"));
    }
    if lattice.n_cells() > MAX_DENSE_DIM {
        return Err(Error::TooLarge("lattice too large for a dense state".into()));
    }
    let amps = (0..lattice.n)
        .map(|i| {
            let x = lattice.axis_coord(i);
            let d = if lattice.periodic {
                let l = lattice.side();
                (x - center) - l * ((x - center) / l).round()
            } else {
                x - center
            };
            C64::from_polar((-d * d / (4.0 * width * width)).exp(), k0 * d)
        })
        .collect();
    QuantumState::new(Basis::LatticeSites(lattice.n), amps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub matrix: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.matrix - self.matrix.adjoint()).camax()
    }

    pub fn hermitize(&mut self) {
        let adj = self.matrix.adjoint();
        self.matrix = (&self.matrix + adj) * C64::new(0.5, 0.0);
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let adj = self.matrix.adjoint();
        let h = (&self.matrix + adj) * C64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn purity(&self) -> f64 {
        self.matrix.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `Re tr(H rho)`.
    pub fn expectation(&self, h: &DMatrix<C64>) -> f64 {
        let mut s = C64::new(0.0, 0.0);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                s += h[(i, j)] * self.matrix[(j, i)];
            }
        }
        s.re
    }
}

/// Translation-invariant pair potential tabulated on lattice displacements.
///
/// `values` is indexed by per-axis offsets in `-(n-1)..=(n-1)`, axis 0 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PairKernel {
    pub n: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl PairKernel {
    pub fn from_fn(lattice: &LatticeSpec, f: impl Fn([f64; 3]) -> f64) -> Self {
        let span = 2 * lattice.n - 1;
        let total = span.pow(lattice.dim as u32);
        let values = (0..total)
            .map(|k| {
                let mut r = [0.0; 3];
                let mut rest = k;
                for slot in r.iter_mut().take(lattice.dim) {
                    let o = (rest % span) as i64 - (lattice.n as i64 - 1);
                    *slot = o as f64 * lattice.dx;
                    rest /= span;
                }
                f(r)
            })
            .collect();
        PairKernel { n: lattice.n, dim: lattice.dim, values }
    }

    fn index(&self, off: [i64; 3]) -> usize {
        let span = (2 * self.n - 1) as i64;
        let mut k = 0i64;
        for axis in (0..self.dim).rev() {
            k = k * span + off[axis] + self.n as i64 - 1;
        }
        k as usize
    }

    pub fn at(&self, off: [i64; 3]) -> f64 {
        self.values[self.index(off)]
    }

    fn check(&self, lattice: &LatticeSpec) -> Result<()> {
        if self.n != lattice.n || self.dim != lattice.dim {
            return Err(invalid("pair kernel does not match the lattice"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonHermitian("pair potential has non-finite values".into()));
        }
        let span = 2 * self.n - 1;
        for k in 0..self.values.len() {
            let mut off = [0i64; 3];
            let mut rest = k;
            for slot in off.iter_mut().take(self.dim) {
                *slot = (rest % span) as i64 - (self.n as i64 - 1);
                rest /= span;
            }
            let neg = [-off[0], -off[1], -off[2]];
            let (a, b) = (self.values[k], self.at(neg));
            if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                return Err(Error::NonHermitian(format!("pair potential is not even at offset {off:?}")));
            }
        }
        Ok(())
    }

    /// Mean-field potential `U(x) = sum_z dV V(x - z) n(z)` of a partner density.
    pub fn potential(&self, lattice: &LatticeSpec, partner: &[f64]) -> Result<Vec<f64>> {
        self.check(lattice)?;
        let n = lattice.n_cells();
        if partner.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: partner.len() });
        }
        let dv = lattice.cell_volume();
        let mut u = vec![0.0; n];
        for (z, &nz) in partner.iter().enumerate() {
            if nz == 0.0 {
                continue;
            }
            let iz = lattice.multi_index(z);
            for (x, ux) in u.iter_mut().enumerate() {
                let ix = lattice.multi_index(x);
                let mut off = [0i64; 3];
                for axis in 0..lattice.dim {
                    off[axis] = lattice.axis_offset(ix[axis], iz[axis]);
                }
                *ux += dv * nz * self.at(off);
            }
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HamiltonianSpec {
    Zero {
        dim: usize,
    },
    /// `-(1/2m) laplacian` with the nearest-neighbour stencil.
    FreeParticle {
        mass: f64,
    },
    ExternalPotential {
        mass: f64,
        potential: Vec<f64>,
    },
    /// Test particle in the mean field of a partner density.
    PairPotential {
        mass: f64,
        pair: PairKernel,
        partner: Vec<f64>,
    },
    /// `omega n + g (a + a^dagger)` on a truncated Fock space.
    DisplacedOscillator {
        omega: f64,
        coupling: f64,
        n_max: usize,
    },
    /// Diagonal rest-plus-gravitational energies of classical branches.
    BranchEnergies {
        energies: Vec<f64>,
    },
    Matrix(DMatrix<C64>),
}

/// Hamiltonian with an optional sparse triplet form for fast commutators.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub matrix: DMatrix<C64>,
    pub triplets: Vec<(usize, usize, C64)>,
}

impl Hamiltonian {
    pub fn from_matrix(matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch { expected: matrix.nrows(), got: matrix.ncols() });
        }
        if matrix.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonHermitian("matrix has non-finite entries".into()));
        }
        let scale = matrix.camax().max(1e-300);
        if (&matrix - matrix.adjoint()).camax() > 1e-12 * scale {
            return Err(Error::NonHermitian("H differs from its adjoint".into()));
        }
        let mut triplets = Vec::new();
        for j in 0..matrix.ncols() {
            for i in 0..matrix.nrows() {
                let v = matrix[(i, j)];
                if v != C64::new(0.0, 0.0) {
                    triplets.push((i, j, v));
                }
            }
        }
        Ok(Hamiltonian { matrix, triplets })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_sparse(&self) -> bool {
        self.triplets.len() * 4 < self.dim() * self.dim()
    }
}

fn lattice_kinetic(lattice: &LatticeSpec, mass: f64) -> Result<DMatrix<C64>> {
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(invalid(format!("mass must be > 0, got {mass}")));
    }
    let n = lattice.n_cells();
    if n > MAX_DENSE_DIM {
        return Err(Error::TooLarge(format!("{n} lattice sites exceed {MAX_DENSE_DIM}")));
    }
    let hop = 1.0 / (2.0 * mass * lattice.dx * lattice.dx);
    let mut h = DMatrix::zeros(n, n);
    for x in 0..n {
        h[(x, x)] += C64::new(2.0 * lattice.dim as f64 * hop, 0.0);
        for axis in 0..lattice.dim {
            for step in [-1i64, 1] {
                if let Some(y) = lattice.neighbor(x, axis, step) {
                    if y != x {
                        h[(x, y)] -= C64::new(hop, 0.0);
                    }
                }
            }
        }
    }
    Ok(h)
}

fn add_diagonal(h: &mut DMatrix<C64>, pot: &[f64]) -> Result<()> {
    if pot.len() != h.nrows() {
        return Err(Error::DimensionMismatch { expected: h.nrows(), got: pot.len() });
    }
    if pot.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonHermitian("potential has non-finite values".into()));
    }
    for (i, v) in pot.iter().enumerate() {
        h[(i, i)] += C64::new(*v, 0.0);
    }
    Ok(())
}

pub fn build_hamiltonian(spec: &HamiltonianSpec, lattice: &LatticeSpec) -> Result<Hamiltonian> {
    let m = match spec {
        HamiltonianSpec::Zero { dim } => DMatrix::zeros(*dim, *dim),
        HamiltonianSpec::FreeParticle { mass } => lattice_kinetic(lattice, *mass)?,
        HamiltonianSpec::ExternalPotential { mass, potential } => {
            let mut h = lattice_kinetic(lattice, *mass)?;
            add_diagonal(&mut h, potential)?;
            h
        }
        HamiltonianSpec::PairPotential { mass, pair, partner } => {
            let u = pair.potential(lattice, partner)?;
            let mut h = lattice_kinetic(lattice, *mass)?;
            add_diagonal(&mut h, &u)?;
            h
        }
        HamiltonianSpec::DisplacedOscillator { omega, coupling, n_max } => {
            if *n_max < 1 {
                return Err(invalid("Fock truncation n_max must be >= 1"));
            }
            if !omega.is_finite() || !coupling.is_finite() {
                return Err(Error::NonHermitian("non-finite oscillator parameters".into()));
            }
            let d = n_max + 1;
            let mut h = DMatrix::zeros(d, d);
            for k in 0..d {
                h[(k, k)] = C64::new(omega * k as f64, 0.0);
                if k + 1 < d {
                    let v = C64::new(coupling * ((k + 1) as f64).sqrt(), 0.0);
                    h[(k, k + 1)] = v;
                    h[(k + 1, k)] = v;
                }
            }
            h
        }
        HamiltonianSpec::BranchEnergies { energies } => {
            let mut h = DMatrix::zeros(energies.len(), energies.len());
            add_diagonal(&mut h, energies)?;
            h
        }
        HamiltonianSpec::Matrix(m) => m.clone(),
    };
    Hamiltonian::from_matrix(m)
}

/// `exp(-i H t)` from the Hermitian eigendecomposition.
pub fn propagator(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    let eig = h.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let phases = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| C64::from_polar(1.0, -e * t)));
    v * phases * v.adjoint()
}
