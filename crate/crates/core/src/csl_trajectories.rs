//! Stochastic collapse trajectories and deterministic parallel ensembles.
//!
//! One step is a Strang split: collapse over `dt/2`, unitary over `dt`,
//! collapse over `dt/2`, each collapse half with its own noise. Collapse
//! factors are taken relative to the vacuum measure, so the squared norm
//! after a step is the likelihood ratio `P_w / p_vac` for that step.
//!
//! Under the physical measure the noise of each half step is drawn from the
//! exact mixture `sum_b p_b N(2 lambda A_b, sigma^2)`, which makes every
//! trajectory carry unit importance weight.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hilbert::CollapseOperators;
use crate::lattice_noise::{noise_variance, rng_from_seed, stream_seed, NoiseMeasure};
use crate::stats::{OutcomeBin, WeightedMean};

#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    pub ops: CollapseOperators,
    pub lambda: f64,
    pub dt: f64,
    /// `exp(-i H dt)`; `None` when `H = 0`.
    pub unitary: Option<DMatrix<C64>>,
}

impl TrajectoryModel {
    pub fn new(ops: CollapseOperators, lambda: f64, dt: f64, unitary: Option<DMatrix<C64>>) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("dt must be > 0, got {dt}")));
        }
        if let Some(u) = &unitary {
            if u.nrows() != ops.n_basis() || u.ncols() != ops.n_basis() {
                return Err(Error::DimensionMismatch { expected: ops.n_basis(), got: u.nrows() });
            }
        }
        Ok(TrajectoryModel { ops, lambda, dt, unitary })
    }

    pub fn n_basis(&self) -> usize {
        self.ops.n_basis()
    }
}

/// Supplies the cell-averaged noise for one collapse interval.
pub trait NoiseSource {
    fn draw(&mut self, probs: &[f64], model: &TrajectoryModel, tau: f64, out: &mut [f64]) -> Result<()>;
}

/// Random noise under either measure.
pub struct SampledNoise {
    pub rng: ChaCha8Rng,
    pub measure: NoiseMeasure,
}

impl SampledNoise {
    pub fn new(seed: u64, measure: NoiseMeasure) -> Self {
        SampledNoise { rng: rng_from_seed(seed), measure }
    }
}

/// Draw an index from unnormalized non-negative weights.
pub(crate) fn pick_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

impl NoiseSource for SampledNoise {
    fn draw(&mut self, probs: &[f64], model: &TrajectoryModel, tau: f64, out: &mut [f64]) -> Result<()> {
        let sigma = noise_variance(model.lambda, model.ops.cell_volume, tau).sqrt();
        for w in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *w = sigma * z;
        }
        if self.measure == NoiseMeasure::Physical {
            let b = pick_index(&mut self.rng, probs);
            let two_lambda = 2.0 * model.lambda;
            for (w, a) in out.iter_mut().zip(&model.ops.profiles[b]) {
                *w += two_lambda * a;
            }
        }
        Ok(())
    }
}

/// The same prescribed noise for every interval.
pub struct FixedNoise<'a> {
    pub w: &'a [f64],
}

impl NoiseSource for FixedNoise<'_> {
    fn draw(&mut self, _probs: &[f64], model: &TrajectoryModel, _tau: f64, out: &mut [f64]) -> Result<()> {
        if self.w.len() != out.len() {
            return Err(Error::DimensionMismatch { expected: out.len(), got: self.w.len() });
        }
        if model.lambda == 0.0 && self.w.iter().any(|w| *w != 0.0) {
            return Err(Error::MeasureInconsistent("nonzero noise with lambda = 0".into()));
        }
        out.copy_from_slice(self.w);
        Ok(())
    }
}

/// Multiply amplitudes by `exp(tau dV sum_x [w A_b - lambda A_b^2])` and
/// renormalize. Returns `ln` of the squared-norm ratio.
pub fn apply_collapse(amps: &mut [C64], ops: &CollapseOperators, lambda: f64, tau: f64, w: &[f64]) -> Result<f64> {
    let c = tau * ops.cell_volume;
    let logs: Vec<f64> =
        ops.profiles.iter().map(|a| c * a.iter().zip(w).map(|(ax, wx)| ax * (wx - lambda * ax)).sum::<f64>()).collect();
    let before: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    let lmax = logs
        .iter()
        .zip(amps.iter())
        .filter(|(_, a)| a.norm_sqr() > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() {
        return Err(Error::NonFinite("collapse exponent".into()));
    }
    let mut after = 0.0;
    for (a, l) in amps.iter_mut().zip(&logs) {
        *a *= (l - lmax).exp();
        after += a.norm_sqr();
    }
    if !(after > 0.0 && after.is_finite()) {
        return Err(Error::NonFinite("state norm after collapse".into()));
    }
    let s = 1.0 / after.sqrt();
    for a in amps.iter_mut() {
        *a *= s;
    }
    Ok(after.ln() + 2.0 * lmax - before.ln())
}

fn probs_of(amps: &[C64]) -> Vec<f64> {
    amps.iter().map(|a| a.norm_sqr()).collect()
}

/// One Strang step. Returns the accumulated `ln(P_w / p_vac)` of the step.
pub fn step_trajectory(amps: &mut Vec<C64>, model: &TrajectoryModel, noise: &mut dyn NoiseSource) -> Result<f64> {
    if amps.len() != model.n_basis() {
        return Err(Error::DimensionMismatch { expected: model.n_basis(), got: amps.len() });
    }
    let half = 0.5 * model.dt;
    let mut w = vec![0.0; model.ops.n_cells];
    let mut log_l = 0.0;
    noise.draw(&probs_of(amps), model, half, &mut w)?;
    if model.lambda > 0.0 {
        log_l += apply_collapse(amps, &model.ops, model.lambda, half, &w)?;
    }
    if let Some(u) = &model.unitary {
        let v = u * nalgebra::DVector::from_column_slice(amps);
        amps.copy_from_slice(v.as_slice());
    }
    if model.lambda > 0.0 {
        noise.draw(&probs_of(amps), model, half, &mut w)?;
        log_l += apply_collapse(amps, &model.ops, model.lambda, half, &w)?;
    }
    let n2: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    if (n2 - 1.0).abs() > 1e-10 {
        let s = 1.0 / n2.sqrt();
        amps.iter_mut().for_each(|a| *a *= s);
    }
    Ok(log_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Branch(usize),
    Undecided,
}

impl Outcome {
    pub fn label(&self) -> String {
        match self {
            Outcome::Branch(b) => format!("branch_{b}"),
            Outcome::Undecided => "undecided".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryOptions {
    pub n_steps: usize,
    pub record_every: usize,
    pub measure: NoiseMeasure,
    pub threshold: f64,
    pub keep_states: bool,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub times: Vec<f64>,
    /// Basis weights `|psi_b|^2` at each record time.
    pub weights: Vec<Vec<f64>>,
    /// `ln(P_w / p_vac)` at each record time.
    pub log_likelihood: Vec<f64>,
    pub states: Vec<Vec<C64>>,
    /// Importance log-weight at the final time (zero under the physical measure).
    pub log_weight: f64,
    pub outcome: Outcome,
}

impl TrajectoryRecord {
    /// Importance log-weight at record `k`.
    pub fn log_weight_at(&self, k: usize, measure: NoiseMeasure) -> f64 {
        match measure {
            NoiseMeasure::Vacuum => self.log_likelihood[k],
            NoiseMeasure::Physical => 0.0,
        }
    }
}

/// Sticky-threshold classifier on a recorded weight path: the outcome is the
/// branch that crosses `threshold` and stays above it for every later record.
pub fn detect_collapse(weights: &[Vec<f64>], threshold: f64) -> Outcome {
    let Some(last) = weights.last() else { return Outcome::Undecided };
    // A branch that stays above threshold through the end must be above it at
    // the last record, and with threshold > 1/2 at most one branch can be.
    match last.iter().position(|w| *w >= threshold) {
        Some(b) => Outcome::Branch(b),
        None => Outcome::Undecided,
    }
}

pub fn run_trajectory(
    model: &TrajectoryModel,
    initial: &[C64],
    opts: &TrajectoryOptions,
    seed: u64,
) -> Result<TrajectoryRecord> {
    if initial.len() != model.n_basis() {
        return Err(Error::DimensionMismatch { expected: model.n_basis(), got: initial.len() });
    }
    let n0: f64 = initial.iter().map(|a| a.norm_sqr()).sum();
    if (n0 - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("initial state must be normalized, |psi|^2 = {n0}")));
    }
    let mut noise = SampledNoise::new(seed, opts.measure);
    let mut amps = initial.to_vec();
    let every = opts.record_every.max(1);
    let mut rec = TrajectoryRecord {
        seed,
        times: vec![0.0],
        weights: vec![probs_of(&amps)],
        log_likelihood: vec![0.0],
        states: if opts.keep_states { vec![amps.clone()] } else { Vec::new() },
        log_weight: 0.0,
        outcome: Outcome::Undecided,
    };
    let mut log_l = 0.0;
    for k in 0..opts.n_steps {
        log_l += step_trajectory(&mut amps, model, &mut noise)?;
        if (k + 1) % every == 0 || k + 1 == opts.n_steps {
            rec.times.push((k + 1) as f64 * model.dt);
            rec.weights.push(probs_of(&amps));
            rec.log_likelihood.push(log_l);
            if opts.keep_states {
                rec.states.push(amps.clone());
            }
        }
    }
    if !log_l.is_finite() {
        return Err(Error::NonFinite("trajectory log-likelihood".into()));
    }
    rec.log_weight = rec.log_weight_at(rec.log_likelihood.len() - 1, opts.measure);
    rec.outcome = detect_collapse(&rec.weights, opts.threshold);
    Ok(rec)
}

#[derive(Debug, Clone, Copy)]
pub struct EnsembleOptions {
    pub n_traj: usize,
    pub master_seed: u64,
    pub threads: Option<usize>,
    /// Accumulate `E[|psi><psi|]` at each record time.
    pub accumulate_rho: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub n_traj: usize,
    pub measure: NoiseMeasure,
    pub times: Vec<f64>,
    pub histogram: Vec<OutcomeBin>,
    pub mean_weights: Vec<Vec<f64>>,
    pub weight_stderr: Vec<Vec<f64>>,
    /// Mean raw importance weight at the final time and its standard error.
    pub importance_mean: f64,
    pub importance_stderr: f64,
    pub effective_sample_size: f64,
    #[serde(skip)]
    pub rho_mean: Vec<DMatrix<C64>>,
    #[serde(skip)]
    pub rho_stderr: Vec<DMatrix<f64>>,
}

pub(crate) fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(invalid("thread count must be >= 1"));
        }
        b = b.num_threads(t);
    }
    b.build().map_err(|e| invalid(format!("thread pool: {e}")))
}

const CHUNK: usize = 2048;

/// Run trajectories `0..n_traj` in parallel chunks and hand each record to
/// `visit` sequentially, in index order.
pub fn fold_ensemble(
    model: &TrajectoryModel,
    initial: &[C64],
    opts: &TrajectoryOptions,
    n_traj: usize,
    master_seed: u64,
    threads: Option<usize>,
    mut visit: impl FnMut(&TrajectoryRecord),
) -> Result<()> {
    let pool = thread_pool(threads)?;
    let mut start = 0;
    while start < n_traj {
        let end = (start + CHUNK).min(n_traj);
        let records: Vec<TrajectoryRecord> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| run_trajectory(model, initial, opts, stream_seed(master_seed, i as u64)))
                .collect::<Result<Vec<_>>>()
        })?;
        records.iter().for_each(&mut visit);
        start = end;
    }
    Ok(())
}

/// Run `n_traj` trajectories; results depend only on `master_seed`, never on
/// the thread count, because per-trajectory seeds are derived from the index
/// and reductions run sequentially in index order.
pub fn run_ensemble(
    model: &TrajectoryModel,
    initial: &[C64],
    opts: &TrajectoryOptions,
    ens: &EnsembleOptions,
) -> Result<EnsembleSummary> {
    let nb = model.n_basis();
    let keep = TrajectoryOptions { keep_states: ens.accumulate_rho, ..*opts };
    let mut n_rec = 0usize;
    let mut times = Vec::new();
    let mut weights_acc: Vec<Vec<WeightedMean>> = Vec::new();
    let mut rho_acc: Vec<Vec<WeightedMean>> = Vec::new();
    let mut outcome_acc: Vec<WeightedMean> = vec![WeightedMean::default(); nb + 1];
    let mut importance = WeightedMean::default();
    fold_ensemble(model, initial, &keep, ens.n_traj, ens.master_seed, ens.threads, |rec| {
        if times.is_empty() {
            times = rec.times.clone();
            n_rec = times.len();
            weights_acc = vec![vec![WeightedMean::default(); nb]; n_rec];
            if ens.accumulate_rho {
                rho_acc = vec![vec![WeightedMean::default(); 2 * nb * nb]; n_rec];
            }
        }
        for k in 0..n_rec {
            let lw = rec.log_weight_at(k, opts.measure);
            for b in 0..nb {
                weights_acc[k][b].push(lw, rec.weights[k][b]);
            }
            if ens.accumulate_rho {
                let s = &rec.states[k];
                for j in 0..nb {
                    for i in 0..nb {
                        let v = s[i] * s[j].conj();
                        rho_acc[k][2 * (i + nb * j)].push(lw, v.re);
                        rho_acc[k][2 * (i + nb * j) + 1].push(lw, v.im);
                    }
                }
            }
        }
        let idx = match rec.outcome {
            Outcome::Branch(b) => b,
            Outcome::Undecided => nb,
        };
        for (o, acc) in outcome_acc.iter_mut().enumerate() {
            acc.push(rec.log_weight, if o == idx { 1.0 } else { 0.0 });
        }
        importance.push(0.0, rec.log_weight.exp());
    })?;
    if ens.n_traj == 0 {
        return Ok(EnsembleSummary {
            n_traj: 0,
            measure: opts.measure,
            times: Vec::new(),
            histogram: Vec::new(),
            mean_weights: Vec::new(),
            weight_stderr: Vec::new(),
            importance_mean: f64::NAN,
            importance_stderr: f64::NAN,
            effective_sample_size: 0.0,
            rho_mean: Vec::new(),
            rho_stderr: Vec::new(),
        });
    }
    let histogram = outcome_acc
        .iter()
        .enumerate()
        .map(|(o, acc)| {
            let label = if o == nb { Outcome::Undecided.label() } else { Outcome::Branch(o).label() };
            let freq = acc.mean();
            let ess = acc.effective_sample_size();
            OutcomeBin {
                outcome: label,
                count: acc.count_nonzero(),
                frequency: freq,
                stderr: (freq * (1.0 - freq) / ess).max(0.0).sqrt(),
            }
        })
        .collect();
    let mean_weights = weights_acc.iter().map(|r| r.iter().map(|a| a.mean()).collect()).collect();
    let weight_stderr = weights_acc.iter().map(|r| r.iter().map(|a| a.stderr()).collect()).collect();
    let mut rho_mean = Vec::new();
    let mut rho_stderr = Vec::new();
    for acc in &rho_acc {
        rho_mean.push(DMatrix::from_fn(nb, nb, |i, j| {
            C64::new(acc[2 * (i + nb * j)].mean(), acc[2 * (i + nb * j) + 1].mean())
        }));
        rho_stderr.push(DMatrix::from_fn(nb, nb, |i, j| {
            acc[2 * (i + nb * j)].stderr().hypot(acc[2 * (i + nb * j) + 1].stderr())
        }));
    }
    Ok(EnsembleSummary {
        n_traj: ens.n_traj,
        measure: opts.measure,
        times,
        histogram,
        mean_weights,
        weight_stderr,
        importance_mean: importance.mean(),
        importance_stderr: importance.stderr(),
        effective_sample_size: outcome_acc[0].effective_sample_size(),
        rho_mean,
        rho_stderr,
    })
}
