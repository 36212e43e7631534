//! Experiment configuration read from a TOML file.

use std::path::{Path, PathBuf};

use csl_core::gravity_collapse::{GravityMode, PotentialVariant};
use csl_core::hilbert::Configuration;
use csl_core::{CollapseParams, LatticeSpec, NoiseMeasure};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Deserialize;

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub dim: usize,
    pub n: usize,
    pub dx: f64,
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub periodic: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseSection {
    pub lambda: f64,
    pub a: f64,
    #[serde(default = "one")]
    pub m0: f64,
    /// Species masses; defaults to a single species of mass `m0`.
    #[serde(default)]
    pub masses: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

/// Everything that describes the physical setup. Each subcommand reads the
/// keys it needs and reports the ones that are missing.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// Flattened particle coordinates per branch, `dim` numbers per particle.
    pub branches: Option<Vec<Vec<f64>>>,
    pub species: Option<usize>,
    pub probabilities: Option<Vec<f64>>,
    /// Complex amplitudes as `[re, im]` pairs; overrides `probabilities`.
    pub amplitudes: Option<Vec<[f64; 2]>>,
    /// Real part of the branch Hamiltonian, row by row.
    pub hamiltonian: Option<Vec<Vec<f64>>>,
    pub hamiltonian_im: Option<Vec<Vec<f64>>>,

    pub mass: Option<f64>,
    /// Creation-model coupling `g`.
    pub g: Option<f64>,
    pub n_max: Option<usize>,

    pub gravity_coupling: Option<f64>,
    pub potential: Option<PotentialVariant>,
    pub gravity_mode: Option<GravityMode>,
    pub times: Option<Vec<f64>>,

    pub t: Option<f64>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub width: Option<f64>,
    pub eps: Option<f64>,
    pub sigma_max: Option<f64>,
    pub n_sigma: Option<usize>,

    pub center: Option<f64>,
    pub k0: Option<f64>,
    /// Harmonic frequency of an external potential for the tensor checks.
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub format: Option<Format>,
    pub record_every: Option<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_measure")]
    pub measure: NoiseMeasure,
}

fn default_n_traj() -> usize {
    1000
}

fn default_threshold() -> f64 {
    0.999
}

fn default_measure() -> NoiseMeasure {
    NoiseMeasure::Physical
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            n_traj: default_n_traj(),
            threads: None,
            out_dir: None,
            format: None,
            record_every: None,
            threshold: default_threshold(),
            measure: default_measure(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub lattice: LatticeSection,
    pub collapse: CollapseSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub run: RunSection,
}

/// A parsed config together with the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    pub text: String,
}

pub fn load(path: &Path) -> LabResult<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let config = parse(&text).map_err(|e| match e {
        LabError::Config(msg) => LabError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(LoadedConfig { config, text })
}

pub fn parse(text: &str) -> LabResult<Config> {
    let config: Config = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
    config.lattice()?;
    config.params()?;
    if !(config.run.threshold > 0.5 && config.run.threshold < 1.0) {
        return Err(field("run.threshold", "must lie in (0.5, 1)"));
    }
    if config.run.record_every == Some(0) {
        return Err(field("run.record_every", "must be >= 1"));
    }
    if config.run.threads == Some(0) {
        return Err(field("run.threads", "must be >= 1"));
    }
    Ok(config)
}

pub(crate) fn field(name: &str, msg: impl std::fmt::Display) -> LabError {
    LabError::Config(format!("{name}: {msg}"))
}

fn require<T: Clone>(v: &Option<T>, name: &str) -> LabResult<T> {
    v.clone().ok_or_else(|| field(&format!("scenario.{name}"), "missing"))
}

impl Config {
    pub fn lattice(&self) -> LabResult<LatticeSpec> {
        let l = &self.lattice;
        LatticeSpec::new(l.dim, l.n, l.dx, l.dt, l.n_steps, l.periodic).map_err(|e| field("lattice", e))
    }

    pub fn params(&self) -> LabResult<CollapseParams> {
        let c = &self.collapse;
        let masses = c.masses.clone().unwrap_or_else(|| vec![c.m0]);
        CollapseParams::new(c.lambda, c.a, c.m0, masses).map_err(|e| field("collapse", e))
    }

    pub fn record_every(&self) -> usize {
        self.run.record_every.unwrap_or(self.lattice.n_steps.max(1))
    }

    pub fn t_max(&self) -> f64 {
        self.lattice.n_steps as f64 * self.lattice.dt
    }

    pub fn configurations(&self) -> LabResult<Vec<Configuration>> {
        let lattice = self.lattice()?;
        let species = self.scenario.species.unwrap_or(0);
        if species >= self.params()?.masses.len() {
            return Err(field("scenario.species", format!("no species {species}")));
        }
        let branches = require(&self.scenario.branches, "branches")?;
        if branches.is_empty() {
            return Err(field("scenario.branches", "needs at least one branch"));
        }
        let dim = lattice.dim;
        branches
            .iter()
            .enumerate()
            .map(|(b, coords)| {
                if coords.len() % dim != 0 {
                    return Err(field(
                        "scenario.branches",
                        format!("branch {b} has {} coordinates, not a multiple of dim = {dim}", coords.len()),
                    ));
                }
                let positions: Vec<[f64; 3]> = coords
                    .chunks(dim)
                    .map(|c| {
                        let mut p = [0.0; 3];
                        p[..dim].copy_from_slice(c);
                        p
                    })
                    .collect();
                Configuration::points(&lattice, species, &positions)
                    .map_err(|e| field("scenario.branches", format!("branch {b}: {e}")))
            })
            .collect()
    }

    /// Branch amplitudes, normalized to unit norm.
    pub fn amplitudes(&self, n: usize) -> LabResult<Vec<C64>> {
        let s = &self.scenario;
        let raw: Vec<C64> = match (&s.amplitudes, &s.probabilities) {
            (Some(a), _) => a.iter().map(|[re, im]| C64::new(*re, *im)).collect(),
            (None, Some(p)) => {
                if p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(field("scenario.probabilities", "entries must be finite and >= 0"));
                }
                p.iter().map(|v| C64::new(v.sqrt(), 0.0)).collect()
            }
            (None, None) => vec![C64::new((1.0 / n as f64).sqrt(), 0.0); n],
        };
        if raw.len() != n {
            return Err(field("scenario.amplitudes", format!("expected {n} entries, got {}", raw.len())));
        }
        let norm: f64 = raw.iter().map(|c| c.norm_sqr()).sum();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(field("scenario.amplitudes", "need a finite nonzero norm"));
        }
        Ok(raw.iter().map(|c| c / norm.sqrt()).collect())
    }

    pub fn hamiltonian(&self, n: usize) -> LabResult<Option<DMatrix<C64>>> {
        let s = &self.scenario;
        let re = match &s.hamiltonian {
            Some(re) => re,
            None if s.hamiltonian_im.is_some() => return Err(field("scenario.hamiltonian", "missing real part")),
            None => return Ok(None),
        };
        let zeros = vec![vec![0.0; n]; n];
        let im = s.hamiltonian_im.as_ref().unwrap_or(&zeros);
        for (name, m) in [("scenario.hamiltonian", re), ("scenario.hamiltonian_im", im)] {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return Err(field(name, format!("must be {n} x {n}")));
            }
        }
        Ok(Some(DMatrix::from_fn(n, n, |i, j| C64::new(re[i][j], im[i][j]))))
    }

    pub fn scenario_f64(&self, v: Option<f64>, name: &str) -> LabResult<f64> {
        require(&v, name)
    }
}
