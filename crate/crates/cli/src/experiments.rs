//! One runner per subcommand. Runners compute everything in memory and return
//! the summary and time series; writing happens afterwards in one place.

use csl_core::creation_model::{
    creation_mean_fields, creation_ode_integrate, creation_trajectory_mode, CreationParams, TrajectoryModeOptions,
};
use csl_core::csl_trajectories::{run_ensemble, EnsembleOptions, TrajectoryModel, TrajectoryOptions};
use csl_core::energy_stress::{continuity_residual, momentum_balance};
use csl_core::form_factor::{braced_regularized, g_spatial_integral, FormFactorQuery, SpatialQuery};
use csl_core::gravity_collapse::{
    gravity_collapse_run, gravity_decay_rate, GravityMode, GravityRunOptions, GravityScenario, PotentialVariant,
};
use csl_core::hilbert::{gaussian_packet, propagator, CollapseOperators, DensityMatrix, Hamiltonian};
use csl_core::master_equation::{decoherence_rate, integrate_master, LindbladGenerator, MasterOptions};
use csl_core::stats::OutcomeBin;
use csl_core::{LatticeSpec, NoiseMeasure};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::config::{field, Config};
use crate::error::{LabError, LabResult};
use crate::output::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CreationMode {
    Ode,
    Closed,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Collapse,
    Lindblad,
    Creation(CreationMode),
    Gravity,
    FormFactor,
    Tensors,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Collapse => "collapse",
            Experiment::Lindblad => "lindblad",
            Experiment::Creation(_) => "creation",
            Experiment::Gravity => "gravity",
            Experiment::FormFactor => "formfactor",
            Experiment::Tensors => "tensors",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub n_traj: usize,
    pub measure: NoiseMeasure,
    pub threshold: f64,
    pub probabilities: Vec<f64>,
    pub histogram: Vec<OutcomeBin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_time: Option<f64>,
    pub final_weights: Vec<Estimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance_weight: Option<Estimate>,
    pub effective_sample_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LindbladReport {
    pub t_max: f64,
    pub dt: f64,
    /// Analytic coherence decay rates between branches.
    pub decoherence_rates: Vec<Vec<f64>>,
    pub final_populations: Vec<f64>,
    pub final_purity: f64,
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreationReport {
    pub mode: CreationMode,
    pub m: f64,
    pub lambda: f64,
    pub g: f64,
    /// `g^2 lambda m / (m^2 + lambda^2/4)`.
    pub asymptotic_energy_slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_energy_slope: Option<f64>,
    /// `max |E + E_w| / max |E|` over the records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_cancellation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_traj: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_level_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRate {
    pub r: usize,
    pub s: usize,
    pub oracle: f64,
    pub displayed: f64,
    pub symmetric: f64,
    pub flat: f64,
    pub simulated: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravityReport {
    pub mode: GravityMode,
    pub potential: PotentialVariant,
    pub coupling: f64,
    pub n_traj: usize,
    pub threshold: f64,
    pub probabilities: Vec<f64>,
    pub histogram: Vec<OutcomeBin>,
    pub rates: Vec<PairRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormFactorReport {
    pub t: f64,
    pub t1: f64,
    pub t2: f64,
    pub width: f64,
    pub eps: f64,
    pub raw: [f64; 3],
    pub extrapolated: [f64; 2],
    pub value: f64,
    pub predicted: f64,
    pub relative_error: f64,
    /// Value with `t1` and `t2` exchanged.
    pub swapped_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorsReport {
    pub mass: f64,
    pub dx: Vec<f64>,
    pub continuity_max: Vec<f64>,
    pub momentum_max: Vec<f64>,
    /// Ratios of successive maxima; 4 for second-order convergence.
    pub continuity_ratio: Vec<f64>,
    pub momentum_ratio: Vec<f64>,
    pub max_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Report {
    Collapse(CollapseReport),
    Lindblad(LindbladReport),
    Creation(CreationReport),
    Gravity(GravityReport),
    FormFactor(FormFactorReport),
    Tensors(TensorsReport),
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub report: Report,
    pub series: Table,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    pub seed: u64,
    pub threads: Option<usize>,
}

pub fn execute(exp: Experiment, cfg: &Config, ctl: RunControl) -> LabResult<Artifacts> {
    match exp {
        Experiment::Collapse => collapse(cfg, ctl),
        Experiment::Lindblad => lindblad(cfg),
        Experiment::Creation(mode) => creation(cfg, ctl, mode),
        Experiment::Gravity => gravity(cfg, ctl),
        Experiment::FormFactor => formfactor(cfg),
        Experiment::Tensors => tensors(cfg),
    }
}

fn branch_setup(cfg: &Config) -> LabResult<(CollapseOperators, Vec<C64>, Option<DMatrix<C64>>)> {
    let lattice = cfg.lattice()?;
    let params = cfg.params()?;
    let configs = cfg.configurations()?;
    let ops = CollapseOperators::for_configurations(&lattice, &params, &configs)?;
    let amps = cfg.amplitudes(configs.len())?;
    let h = cfg.hamiltonian(configs.len())?;
    Ok((ops, amps, h))
}

fn probabilities(amps: &[C64]) -> Vec<f64> {
    amps.iter().map(|c| c.norm_sqr()).collect()
}

fn collapse(cfg: &Config, ctl: RunControl) -> LabResult<Artifacts> {
    let (ops, amps, h) = branch_setup(cfg)?;
    let nb = ops.n_basis();
    let dt = cfg.lattice.dt;
    let unitary = h.map(|h| {
        Hamiltonian::from_matrix(h.clone())?;
        Ok::<_, csl_core::Error>(propagator(&h, dt))
    });
    let model = TrajectoryModel::new(ops, cfg.collapse.lambda, dt, unitary.transpose()?)?;
    let opts = TrajectoryOptions {
        n_steps: cfg.lattice.n_steps,
        record_every: cfg.record_every(),
        measure: cfg.run.measure,
        threshold: cfg.run.threshold,
        keep_states: false,
    };
    let ens =
        EnsembleOptions { n_traj: cfg.run.n_traj, master_seed: ctl.seed, threads: ctl.threads, accumulate_rho: false };
    let s = run_ensemble(&model, &amps, &opts, &ens)?;

    let mut cols = vec!["t".to_string()];
    cols.extend((0..nb).map(|b| format!("w_{b}")));
    cols.extend((0..nb).map(|b| format!("w_{b}_stderr")));
    let mut series = Table::new(cols);
    for (k, t) in s.times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(&s.mean_weights[k]);
        row.extend(&s.weight_stderr[k]);
        series.push(row);
    }
    let final_weights = match (s.mean_weights.last(), s.weight_stderr.last()) {
        (Some(w), Some(e)) => w.iter().zip(e).map(|(v, se)| Estimate { value: *v, stderr: *se }).collect(),
        _ => Vec::new(),
    };
    let report = CollapseReport {
        n_traj: s.n_traj,
        measure: s.measure,
        threshold: cfg.run.threshold,
        probabilities: probabilities(&amps),
        histogram: s.histogram.clone(),
        final_time: s.times.last().copied(),
        final_weights,
        importance_weight: (s.n_traj > 0).then_some(Estimate { value: s.importance_mean, stderr: s.importance_stderr }),
        effective_sample_size: s.effective_sample_size,
    };
    Ok(Artifacts { report: Report::Collapse(report), series })
}

fn lindblad(cfg: &Config) -> LabResult<Artifacts> {
    let (ops, amps, h) = branch_setup(cfg)?;
    let nb = ops.n_basis();
    let lambda = cfg.collapse.lambda;
    let h = Hamiltonian::from_matrix(h.unwrap_or_else(|| DMatrix::zeros(nb, nb)))?;
    let gen = LindbladGenerator::new(h, &ops, lambda)?;
    let psi = DVector::from_column_slice(&amps);
    let rho0 = DensityMatrix { matrix: &psi * psi.adjoint() };
    let rec = integrate_master(&rho0, &gen, MasterOptions::new(cfg.t_max(), cfg.lattice.dt, cfg.record_every()))?;

    let mut cols = vec!["t".to_string(), "trace".to_string(), "purity".to_string()];
    for i in 0..nb {
        for j in 0..nb {
            cols.push(format!("rho_{i}_{j}_re"));
            cols.push(format!("rho_{i}_{j}_im"));
        }
    }
    let mut series = Table::new(cols);
    let (mut trace_err, mut herm_err, mut min_ev) = (0.0f64, 0.0f64, f64::INFINITY);
    for (t, rho) in rec.times.iter().zip(&rec.states) {
        let tr = rho.trace();
        trace_err = trace_err.max((tr - 1.0).norm());
        herm_err = herm_err.max(rho.hermiticity_error());
        min_ev = min_ev.min(rho.min_eigenvalue());
        let mut row = vec![*t, tr.re, rho.purity()];
        for i in 0..nb {
            for j in 0..nb {
                row.push(rho.matrix[(i, j)].re);
                row.push(rho.matrix[(i, j)].im);
            }
        }
        series.push(row);
    }
    let last = rec.states.last().expect("integrator records the initial state");
    let decoherence_rates = (0..nb)
        .map(|b| (0..nb).map(|c| decoherence_rate(&ops, lambda, b, c)).collect::<csl_core::Result<Vec<_>>>())
        .collect::<csl_core::Result<Vec<_>>>()?;
    let report = LindbladReport {
        t_max: cfg.t_max(),
        dt: cfg.lattice.dt,
        decoherence_rates,
        final_populations: (0..nb).map(|i| last.matrix[(i, i)].re).collect(),
        final_purity: last.purity(),
        max_trace_error: trace_err,
        max_hermiticity_error: herm_err,
        min_eigenvalue: min_ev,
    };
    Ok(Artifacts { report: Report::Lindblad(report), series })
}

fn creation(cfg: &Config, ctl: RunControl, mode: CreationMode) -> LabResult<Artifacts> {
    let s = &cfg.scenario;
    let m = cfg.scenario_f64(s.mass, "mass")?;
    let g = cfg.scenario_f64(s.g, "g")?;
    let p = CreationParams::new(m, cfg.collapse.lambda).map_err(|e| field("scenario.mass", e))?;
    let slope = g * g * p.lambda * p.m / (p.m * p.m + 0.25 * p.lambda * p.lambda);
    let dt = cfg.lattice.dt;
    let every = cfg.record_every();
    let mut report = CreationReport {
        mode,
        m: p.m,
        lambda: p.lambda,
        g,
        asymptotic_energy_slope: slope,
        measured_energy_slope: None,
        energy_cancellation: None,
        n_traj: None,
        top_level_weight: None,
    };
    let dense = ["t", "xi_re", "xi_im", "n_mean", "e_density", "ew_density"];
    let mut series;
    match mode {
        CreationMode::Ode | CreationMode::Closed => {
            series = Table::new(dense);
            let rows: Vec<[f64; 6]> = if mode == CreationMode::Ode {
                creation_ode_integrate(&p, g, cfg.t_max(), dt, every)?
                    .iter()
                    .map(|r| [r.t, r.xi.re, r.xi.im, r.number, r.energy, r.wfield_energy])
                    .collect()
            } else {
                let n_rec = cfg.lattice.n_steps / every;
                (0..=n_rec)
                    .map(|k| {
                        let t = (k * every) as f64 * dt;
                        creation_mean_fields(t, &p, g)
                            .map(|f| [t, f.xi.re, f.xi.im, f.number, f.energy, f.wfield_energy])
                    })
                    .collect::<csl_core::Result<_>>()?
            };
            if rows.len() >= 2 {
                let (a, b) = (rows[rows.len() - 2], rows[rows.len() - 1]);
                report.measured_energy_slope = Some((b[4] - a[4]) / (b[0] - a[0]));
            }
            let e_max = rows.iter().fold(0.0f64, |acc, r| acc.max(r[4].abs()));
            let sum_max = rows.iter().fold(0.0f64, |acc, r| acc.max((r[4] + r[5]).abs()));
            report.energy_cancellation = Some(if e_max > 0.0 { sum_max / e_max } else { sum_max });
            for r in rows {
                series.push(r.to_vec());
            }
        }
        CreationMode::Trajectory => {
            series = Table::new(["t", "xi_re", "xi_im", "xi_stderr", "n_mean", "n_stderr"]);
            let opts = TrajectoryModeOptions {
                n_max: s.n_max.unwrap_or(10),
                dt,
                n_steps: cfg.lattice.n_steps,
                record_every: every,
                n_traj: cfg.run.n_traj,
                seed: ctl.seed,
                threads: ctl.threads,
                cell_volume: cfg.lattice()?.cell_volume(),
            };
            let site = creation_trajectory_mode(&p, &[g], &opts)?.remove(0);
            for k in 0..site.times.len() {
                series.push(vec![
                    site.times[k],
                    site.xi_mean[k].re,
                    site.xi_mean[k].im,
                    site.xi_stderr[k],
                    site.number_mean[k],
                    site.number_stderr[k],
                ]);
            }
            report.n_traj = Some(cfg.run.n_traj);
            report.top_level_weight = Some(site.top_level_weight);
        }
    }
    Ok(Artifacts { report: Report::Creation(report), series })
}

/// Default record times `k * record_every * dt` for `k >= 1`.
fn record_times(cfg: &Config) -> Vec<f64> {
    let every = cfg.record_every();
    (1..=cfg.lattice.n_steps / every).map(|k| (k * every) as f64 * cfg.lattice.dt).collect()
}

fn gravity(cfg: &Config, ctl: RunControl) -> LabResult<Artifacts> {
    let s = &cfg.scenario;
    let configs = cfg.configurations()?;
    let amps = cfg.amplitudes(configs.len())?;
    let coupling = cfg.scenario_f64(s.gravity_coupling, "gravity_coupling")?;
    let variant = s.potential.unwrap_or(PotentialVariant::Point);
    let mode = s.gravity_mode.unwrap_or(GravityMode::DilatedDrift);
    let scenario = GravityScenario::new(cfg.lattice()?, cfg.params()?, configs, coupling, variant, amps.clone())?;
    let times = s.times.clone().unwrap_or_else(|| record_times(cfg));
    if times.is_empty() {
        return Err(field("scenario.times", "need at least one time"));
    }
    let opts = GravityRunOptions {
        times,
        n_traj: cfg.run.n_traj,
        seed: ctl.seed,
        threads: ctl.threads,
        threshold: cfg.run.threshold,
    };
    let run = gravity_collapse_run(&scenario, mode, &opts)?;
    let nb = amps.len();
    let mut rates = Vec::new();
    for r in 0..nb {
        for q in r + 1..nb {
            let d = gravity_decay_rate(&scenario, mode, r, q, Some(&run))?;
            let (v, se) = d.simulated.expect("rates were computed with a run");
            rates.push(PairRate {
                r,
                s: q,
                oracle: d.oracle,
                displayed: d.displayed,
                symmetric: d.symmetric,
                flat: d.flat,
                simulated: Estimate { value: v, stderr: se },
            });
        }
    }
    let mut series = Table::new(["t", "r", "s", "log_abs", "stderr", "initial", "oracle"]);
    for c in &run.coherence {
        series.push(vec![c.t, c.r as f64, c.s as f64, c.log_abs, c.stderr, c.initial, c.oracle]);
    }
    let report = GravityReport {
        mode,
        potential: variant,
        coupling,
        n_traj: run.n_traj,
        threshold: cfg.run.threshold,
        probabilities: probabilities(&amps),
        histogram: run.histogram.clone(),
        rates,
    };
    Ok(Artifacts { report: Report::Gravity(report), series })
}

fn formfactor(cfg: &Config) -> LabResult<Artifacts> {
    let s = &cfg.scenario;
    let q = SpatialQuery {
        t: s.t.unwrap_or(0.0),
        t1: cfg.scenario_f64(s.t1, "t1")?,
        t2: cfg.scenario_f64(s.t2, "t2")?,
        width: s.width.unwrap_or(1.0),
        eps: s.eps.unwrap_or(0.05),
    };
    let check = g_spatial_integral(&q)?;
    let swapped = g_spatial_integral(&SpatialQuery { t1: q.t2, t2: q.t1, ..q })?;
    let sigma_max = s.sigma_max.unwrap_or(4.0);
    let n_sigma = s.n_sigma.unwrap_or(201);
    if n_sigma < 2 {
        return Err(field("scenario.n_sigma", "must be >= 2"));
    }
    let (big_t1, big_t2) = (q.t - q.t1, q.t - q.t2);
    let mut series = Table::new(["sigma", "f", "f_swapped"]);
    for k in 0..n_sigma {
        let sigma = -sigma_max + 2.0 * sigma_max * k as f64 / (n_sigma - 1) as f64;
        let a = braced_regularized(&FormFactorQuery { sigma, t1: big_t1, t2: big_t2, eps: q.eps })?;
        let b = braced_regularized(&FormFactorQuery { sigma, t1: big_t2, t2: big_t1, eps: q.eps })?;
        series.push(vec![sigma, a, b]);
    }
    let report = FormFactorReport {
        t: q.t,
        t1: q.t1,
        t2: q.t2,
        width: q.width,
        eps: q.eps,
        raw: check.raw,
        extrapolated: check.extrapolated,
        value: check.value,
        predicted: check.predicted,
        relative_error: check.relative_error(),
        swapped_value: swapped.value,
    };
    Ok(Artifacts { report: Report::FormFactor(report), series })
}

fn packet(lattice: &LatticeSpec, center: f64, width: f64, k0: f64) -> LabResult<Vec<C64>> {
    let s = gaussian_packet(lattice, center, width, k0)?;
    let norm: f64 = s.amplitudes.iter().map(|v| v.norm_sqr()).sum::<f64>() * lattice.dx;
    Ok(s.amplitudes.iter().map(|v| v / norm.sqrt()).collect())
}

fn tensors(cfg: &Config) -> LabResult<Artifacts> {
    let s = &cfg.scenario;
    let base = cfg.lattice()?;
    if base.dim != 1 {
        return Err(field("lattice.dim", "the tensor checks run on 1-D lattices"));
    }
    let mass = s.mass.unwrap_or(1.0);
    let center = s.center.unwrap_or(0.0);
    let width = cfg.scenario_f64(s.width, "width")?;
    let k0 = s.k0.unwrap_or(0.0);
    let potential = |l: &LatticeSpec| {
        s.omega.map(|w| (0..l.n).map(|i| 0.5 * mass * w * w * l.axis_coord(i).powi(2)).collect::<Vec<f64>>())
    };
    let mut report = TensorsReport {
        mass,
        dx: Vec::new(),
        continuity_max: Vec::new(),
        momentum_max: Vec::new(),
        continuity_ratio: Vec::new(),
        momentum_ratio: Vec::new(),
        max_force: 0.0,
    };
    let mut series = Table::new(["x", "t00", "t0x", "txx", "continuity", "divergence", "force"]);
    for level in 0..3u32 {
        let f = 1usize << level;
        let l = LatticeSpec::new(1, base.n * f, base.dx / f as f64, base.dt, base.n_steps, base.periodic)?;
        let psi = packet(&l, center, width, k0)?;
        let u = potential(&l);
        let cont = continuity_residual(&l, &psi, mass, u.as_deref())?;
        let bal = momentum_balance(&l, &psi, mass, u.as_deref())?;
        report.dx.push(l.dx);
        report.continuity_max.push(cont.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        report.momentum_max.push(bal.max_residual());
        if level == 0 {
            report.max_force = bal.max_force();
            let t = csl_core::energy_stress::particle_tensor_components(&l, &psi, mass)?;
            for i in 0..l.n {
                series.push(vec![
                    l.axis_coord(i),
                    t.mass.t00[i],
                    t.mass.t0i[0][i],
                    t.mass.tij[0][0][i],
                    cont[i],
                    bal.divergence[0][i],
                    bal.force[0][i],
                ]);
            }
        }
    }
    let ratios = |v: &[f64]| v.windows(2).map(|w| w[0] / w[1]).collect::<Vec<f64>>();
    report.continuity_ratio = ratios(&report.continuity_max);
    report.momentum_ratio = ratios(&report.momentum_max);
    if report.continuity_ratio.iter().chain(&report.momentum_ratio).any(|r| !r.is_finite()) {
        return Err(LabError::Numerical("tensor residual vanished or diverged; ratios undefined".into()));
    }
    Ok(Artifacts { report: Report::Tensors(report), series })
}
