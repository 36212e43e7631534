//! Lattice geometry, collapse parameters and white-noise realizations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Hypercubic lattice in 1 or 3 dimensions, `n` cells per side.
///
/// Cell `i` along an axis sits at `(i - n/2) * dx`, so the origin is always a
/// lattice site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dim: usize,
    pub n: usize,
    pub dx: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub periodic: bool,
}

impl LatticeSpec {
    pub fn new(dim: usize, n: usize, dx: f64, dt: f64, n_steps: usize, periodic: bool) -> Result<Self> {
        let spec = LatticeSpec { dim, n, dx, dt, n_steps, periodic };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 3 {
            return Err(invalid(format!("dim must be 1 or 3, got {}", self.dim)));
        }
        if self.n < 1 {
            return Err(invalid("lattice needs at least one cell per side"));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(invalid(format!("dx must be positive, got {}", self.dx)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_steps < 1 {
            return Err(invalid("n_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.dim as i32)
    }

    pub fn n_cells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Box side length.
    pub fn side(&self) -> f64 {
        self.n as f64 * self.dx
    }

    pub fn axis_coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) * self.dx
    }

    /// Integer indices of a cell, unused axes are zero.
    pub fn multi_index(&self, cell: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        let mut rest = cell;
        for slot in idx.iter_mut().take(self.dim) {
            *slot = rest % self.n;
            rest /= self.n;
        }
        idx
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        let mut cell = 0;
        for axis in (0..self.dim).rev() {
            cell = cell * self.n + idx[axis];
        }
        cell
    }

    pub fn coords(&self, cell: usize) -> [f64; 3] {
        let idx = self.multi_index(cell);
        let mut x = [0.0; 3];
        for axis in 0..self.dim {
            x[axis] = self.axis_coord(idx[axis]);
        }
        x
    }

    /// Signed index offset `a - b` along one axis, minimal image when periodic.
    pub fn axis_offset(&self, a: usize, b: usize) -> i64 {
        let mut d = a as i64 - b as i64;
        if self.periodic {
            let n = self.n as i64;
            d = d.rem_euclid(n);
            if d > n / 2 {
                d -= n;
            }
        }
        d
    }

    /// Displacement `x_a - x_b`, minimal image when periodic.
    pub fn displacement(&self, a: usize, b: usize) -> [f64; 3] {
        let ia = self.multi_index(a);
        let ib = self.multi_index(b);
        let mut d = [0.0; 3];
        for axis in 0..self.dim {
            d[axis] = self.axis_offset(ia[axis], ib[axis]) as f64 * self.dx;
        }
        d
    }

    pub fn distance_sq(&self, a: usize, b: usize) -> f64 {
        self.displacement(a, b).iter().map(|v| v * v).sum()
    }

    /// Neighbour of `cell` shifted by `step` along `axis`; `None` past an open edge.
    pub fn neighbor(&self, cell: usize, axis: usize, step: i64) -> Option<usize> {
        let mut idx = self.multi_index(cell);
        let n = self.n as i64;
        let mut j = idx[axis] as i64 + step;
        if self.periodic {
            j = j.rem_euclid(n);
        } else if j < 0 || j >= n {
            return None;
        }
        idx[axis] = j as usize;
        Some(self.flat_index(idx))
    }

    /// Cell whose centre coincides with `pos` to within `1e-9 dx`.
    pub fn cell_at(&self, pos: [f64; 3]) -> Result<usize> {
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            if axis >= self.dim {
                if pos[axis].abs() > 1e-9 * self.dx {
                    return Err(Error::OffLattice(format!("{pos:?} has a component beyond dim {}", self.dim)));
                }
                continue;
            }
            let f = pos[axis] / self.dx + (self.n / 2) as f64;
            let r = f.round();
            if (f - r).abs() > 1e-9 || r < 0.0 || r >= self.n as f64 {
                return Err(Error::OffLattice(format!("{pos:?}")));
            }
            idx[axis] = r as usize;
        }
        Ok(self.flat_index(idx))
    }
}

/// Collapse strength, smearing length, reference mass and species masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseParams {
    pub lambda: f64,
    pub a: f64,
    pub m0: f64,
    pub masses: Vec<f64>,
}

impl CollapseParams {
    pub fn new(lambda: f64, a: f64, m0: f64, masses: Vec<f64>) -> Result<Self> {
        let p = CollapseParams { lambda, a, m0, masses };
        p.validate()?;
        Ok(p)
    }

    /// Single species with `M = M0`.
    pub fn single(lambda: f64, a: f64) -> Self {
        CollapseParams { lambda, a, m0: 1.0, masses: vec![1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(invalid(format!("smearing length a must be > 0, got {}", self.a)));
        }
        if !(self.m0 > 0.0 && self.m0.is_finite()) {
            return Err(invalid(format!("reference mass must be > 0, got {}", self.m0)));
        }
        if self.masses.is_empty() {
            return Err(invalid("at least one species mass is required"));
        }
        if let Some(m) = self.masses.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
            return Err(invalid(format!("species mass must be >= 0, got {m}")));
        }
        Ok(())
    }

    pub fn mass_ratio(&self, species: usize) -> Result<f64> {
        self.masses.get(species).map(|m| m / self.m0).ok_or_else(|| invalid(format!("unknown species {species}")))
    }
}

/// Per-cell noise variance for an interval of length `tau`: `lambda / (dV tau)`.
pub fn noise_variance(lambda: f64, cell_volume: f64, tau: f64) -> f64 {
    lambda / (cell_volume * tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMeasure {
    Vacuum,
    Physical,
}

/// Cell-averaged white noise for every (step, cell), stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub values: Vec<f64>,
    pub n_cells: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub measure: NoiseMeasure,
    /// Set when `lambda == 0`: every value is zero.
    pub degenerate: bool,
}

impl NoiseRealization {
    pub fn step(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_cells..(k + 1) * self.n_cells]
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for member `index` of an ensemble driven by `master`.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Vacuum-measure noise: independent `N(0, lambda/(dV dt))` per cell and step.
pub fn sample_noise_vacuum(lattice: &LatticeSpec, params: &CollapseParams, seed: u64) -> Result<NoiseRealization> {
    lattice.validate()?;
    params.validate()?;
    let n_cells = lattice.n_cells();
    let total =
        n_cells.checked_mul(lattice.n_steps).ok_or_else(|| Error::TooLarge("noise buffer size overflows".into()))?;
    if params.lambda == 0.0 {
        return Ok(NoiseRealization {
            values: vec![0.0; total],
            n_cells,
            n_steps: lattice.n_steps,
            seed,
            measure: NoiseMeasure::Vacuum,
            degenerate: true,
        });
    }
    let sigma = noise_variance(params.lambda, lattice.cell_volume(), lattice.dt).sqrt();
    let mut rng = rng_from_seed(seed);
    let values = (0..total)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect();
    Ok(NoiseRealization {
        values,
        n_cells,
        n_steps: lattice.n_steps,
        seed,
        measure: NoiseMeasure::Vacuum,
        degenerate: false,
    })
}

/// Physical-measure noise for a fixed drift profile `<A(x)>`:
/// `w = 2 lambda <A> + N(0, lambda/(dV dt))`.
///
/// The drift is held fixed over the whole horizon; closed-loop sampling that
/// follows the evolving state lives in the trajectory engine.
pub fn sample_noise_physical(
    lattice: &LatticeSpec,
    params: &CollapseParams,
    drift: &[f64],
    seed: u64,
) -> Result<NoiseRealization> {
    let n_cells = lattice.n_cells();
    if drift.len() != n_cells {
        return Err(Error::DimensionMismatch { expected: n_cells, got: drift.len() });
    }
    if drift.iter().any(|d| !d.is_finite()) {
        return Err(invalid("drift profile contains non-finite values"));
    }
    let mut out = sample_noise_vacuum(lattice, params, seed)?;
    out.measure = NoiseMeasure::Physical;
    if out.degenerate {
        return Ok(out);
    }
    let two_lambda = 2.0 * params.lambda;
    for step in out.values.chunks_mut(n_cells) {
        for (w, d) in step.iter_mut().zip(drift) {
            *w += two_lambda * d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_put_origin_on_a_cell() {
        let l = LatticeSpec::new(3, 8, 0.5, 0.1, 1, true).unwrap();
        let c = l.cell_at([0.0; 3]).unwrap();
        assert_eq!(l.coords(c), [0.0; 3]);
        assert!(l.cell_at([0.25, 0.0, 0.0]).is_err());
    }

    #[test]
    fn minimal_image_wraps() {
        let l = LatticeSpec::new(1, 10, 1.0, 0.1, 1, true).unwrap();
        assert_eq!(l.axis_offset(9, 0), -1);
        assert_eq!(l.axis_offset(0, 9), 1);
        let open = LatticeSpec { periodic: false, ..l };
        assert_eq!(open.axis_offset(9, 0), 9);
        assert_eq!(open.neighbor(9, 0, 1), None);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(LatticeSpec::new(2, 8, 1.0, 0.1, 1, true).is_err());
        assert!(LatticeSpec::new(1, 8, -1.0, 0.1, 1, true).is_err());
        assert!(CollapseParams::new(-1.0, 1.0, 1.0, vec![1.0]).is_err());
        assert!(CollapseParams::new(1.0, 0.0, 1.0, vec![1.0]).is_err());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..1000).map(|i| stream_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), a.len());
        assert_eq!(stream_seed(7, 3), a[3]);
    }
}
