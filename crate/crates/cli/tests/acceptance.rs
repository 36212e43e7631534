//! The ten acceptance criteria, each run at its stated tolerance.
//!
//! `cargo test -p csl-lab --test acceptance -- --nocapture` prints one
//! PASS/FAIL line per criterion; the same lines go to
//! `target/tmp/acceptance.txt`.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use csl_core::creation_model::*;
use csl_core::csl_trajectories::*;
use csl_core::energy_stress::*;
use csl_core::form_factor::*;
use csl_core::gravity_collapse::*;
use csl_core::hilbert::*;
use csl_core::master_equation::*;
use csl_core::{CollapseParams, LatticeSpec, NoiseMeasure};
use csl_lab::{config, Experiment, Invocation};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn all(parts: Vec<Outcome>) -> Outcome {
    let failed = parts.iter().any(|p| p.is_err());
    let text = parts.into_iter().map(|p| p.unwrap_or_else(|e| format!("[x] {e}"))).collect::<Vec<_>>().join("; ");
    ensure(!failed, text)
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn line_1d(n: usize, dx: f64) -> LatticeSpec {
    LatticeSpec::new(1, n, dx, 0.01, 1, false).unwrap()
}

fn branch_ops(lattice: &LatticeSpec, params: &CollapseParams, positions: &[f64]) -> CollapseOperators {
    let cfgs: Vec<Configuration> =
        positions.iter().map(|x| Configuration::points(lattice, 0, &[[*x, 0.0, 0.0]]).unwrap()).collect();
    CollapseOperators::for_configurations(lattice, params, &cfgs).unwrap()
}

fn amps(probs: &[f64]) -> Vec<C64> {
    probs.iter().map(|p| C64::new(p.sqrt(), 0.0)).collect()
}

fn pure(a: &[C64]) -> DensityMatrix {
    let v = DVector::from_column_slice(a);
    DensityMatrix { matrix: &v * v.adjoint() }
}

fn bin(h: &[csl_core::stats::OutcomeBin], label: &str) -> (f64, f64) {
    h.iter().find(|b| b.outcome == label).map(|b| (b.frequency, b.stderr)).unwrap_or((0.0, 0.0))
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn born_rule() -> Outcome {
    let loaded = config::load(&configs_dir().join("collapse_two_branch.toml")).unwrap();
    let cfg = &loaded.config;
    assert_eq!(cfg.run.n_traj, 10_000);
    assert!((cfg.collapse.lambda * cfg.t_max() - 10.0).abs() < 1e-12);
    let start = Instant::now();
    let a =
        csl_lab::execute(Experiment::Collapse, cfg, csl_lab::RunControl { seed: cfg.run.seed, threads: None }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let csl_lab::Report::Collapse(r) = a.report else { unreachable!() };
    let (f, se) = bin(&r.histogram, "branch_0");
    let (u, _) = bin(&r.histogram, "undecided");
    all(vec![
        ensure((f - 0.36).abs() <= 0.015, format!("freq(branch_0) = {f:.4} +- {se:.4}, target 0.36 +- 0.015")),
        ensure(u < 0.01, format!("undecided {u:.4}")),
        ensure(secs < 60.0, format!("{secs:.1} s")),
    ])
}

fn master_consistency_case(positions: &[f64], h: DMatrix<C64>, probs: &[f64], seed: u64) -> Outcome {
    let lattice = line_1d(48, 0.25);
    let params = CollapseParams::single(1.0, 1.0);
    let ops = branch_ops(&lattice, &params, positions);
    let n = ops.n_basis();
    let dt = 0.01;
    let init = amps(probs);
    let model = TrajectoryModel::new(ops.clone(), 1.0, dt, Some(propagator(&h, dt))).unwrap();
    let opts = TrajectoryOptions {
        n_steps: 150,
        record_every: 50,
        measure: NoiseMeasure::Physical,
        threshold: 0.9,
        keep_states: false,
    };
    let ens = EnsembleOptions { n_traj: 10_000, master_seed: seed, threads: None, accumulate_rho: true };
    let s = run_ensemble(&model, &init, &opts, &ens).unwrap();
    let gen = LindbladGenerator::new(Hamiltonian::from_matrix(h).unwrap(), &ops, 1.0).unwrap();
    let rec = integrate_master(&pure(&init), &gen, MasterOptions::new(1.5, dt, 50)).unwrap();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for k in 0..s.times.len() {
        for i in 0..n {
            for j in 0..n {
                let d = (s.rho_mean[k][(i, j)] - rec.states[k].matrix[(i, j)]).norm();
                let se = s.rho_stderr[k][(i, j)];
                if se > 0.0 {
                    worst = worst.max(d / se);
                    checks += 1;
                } else if d > 1e-12 {
                    worst = f64::INFINITY;
                }
            }
        }
    }
    ensure(worst <= 3.0, format!("{n} branches: worst |diff|/sigma = {worst:.2} over {checks} entries"))
}

fn master_consistency() -> Outcome {
    let c = |r: f64, i: f64| C64::new(r, i);
    let h2 = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.6, 0.0), c(0.6, 0.0), c(0.5, 0.0)]);
    #[rustfmt::skip]
    let h3 = DMatrix::from_row_slice(3, 3, &[
        c(0.0, 0.0), c(0.4, 0.2), c(0.0, 0.0),
        c(0.4, -0.2), c(0.3, 0.0), c(0.5, 0.0),
        c(0.0, 0.0), c(0.5, 0.0), c(-0.2, 0.0),
    ]);
    all(vec![
        master_consistency_case(&[-1.0, 1.0], h2, &[0.36, 0.64], 8),
        master_consistency_case(&[-1.5, 0.0, 1.5], h3, &[0.2, 0.5, 0.3], 9),
    ])
}

fn decoherence_rate_check() -> Outcome {
    let lambda = 1.0;
    let lattice = line_1d(48, 0.25);
    let params = CollapseParams::single(lambda, 1.0);
    let ops = branch_ops(&lattice, &params, &[-1.0, 1.0]);
    let want = lambda * (1.0 - (-1.0f64).exp());

    let gen = LindbladGenerator::new(Hamiltonian::from_matrix(DMatrix::zeros(2, 2)).unwrap(), &ops, lambda).unwrap();
    let rec = integrate_master(&pure(&amps(&[0.5, 0.5])), &gen, MasterOptions::new(2.0, 0.01, 10)).unwrap();
    let pts: Vec<(f64, f64)> =
        rec.times.iter().zip(&rec.states).map(|(t, r)| (*t, r.matrix[(0, 1)].norm().ln())).collect();
    let n = pts.len() as f64;
    let (mt, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = -pts.iter().map(|(t, y)| (t - mt) * (y - my)).sum::<f64>()
        / pts.iter().map(|(t, _)| (t - mt).powi(2)).sum::<f64>();

    let model = TrajectoryModel::new(ops, lambda, 0.05, None).unwrap();
    let opts = TrajectoryOptions {
        n_steps: 20,
        record_every: 20,
        measure: NoiseMeasure::Physical,
        threshold: 0.9,
        keep_states: false,
    };
    let ens = EnsembleOptions { n_traj: 10_000, master_seed: 10, threads: None, accumulate_rho: true };
    let s = run_ensemble(&model, &amps(&[0.5, 0.5]), &opts, &ens).unwrap();
    let t = *s.times.last().unwrap();
    let r = s.rho_mean.last().unwrap()[(0, 1)].norm();
    let se = s.rho_stderr.last().unwrap()[(0, 1)];
    let rate = -(r / 0.5).ln() / t;
    let rate_se = se / (r * t);
    all(vec![
        ensure(
            (slope / want - 1.0).abs() < 0.01,
            format!("deterministic slope {slope:.6} vs {want:.6} ({:.2e} rel)", slope / want - 1.0),
        ),
        ensure((rate - want).abs() <= 3.0 * rate_se, format!("trajectory rate {rate:.4} +- {rate_se:.4} vs {want:.4}")),
    ])
}

fn energy_gain() -> Outcome {
    let p = CollapseParams::single(1.0, 1.0);
    let one = GainScenario {
        lattice: LatticeSpec::new(1, 128, 0.125, 0.005, 200, true).unwrap(),
        mass: 1.0,
        species: 0,
        n_particles: 1,
        t_max: 1.0,
        dt: 0.005,
        state: GainState::Packet { width: 2.0, k0: 0.0, potential: None },
    };
    let r1 = energy_gain_rate(&one, &p).unwrap();
    let three = GainScenario {
        lattice: LatticeSpec::new(3, 32, 0.25, 0.01, 100, true).unwrap(),
        mass: 1.0,
        species: 0,
        n_particles: 1,
        t_max: 1.0,
        dt: 0.01,
        state: GainState::Homogeneous { momentum_width: 0.25 },
    };
    let r3 = energy_gain_rate(&three, &p).unwrap();
    // nucleon, lambda = 1e-16 /s, a = 1e-7 m, over 4.3e17 s, relative to m c^2
    let hbar = 1.054_571_817e-34;
    let m = 1.672_621_924e-27;
    let si = CollapseParams::new(1e-16, 1e-7, m, vec![m]).unwrap();
    let watts = analytic_gain_rate(3, &si, 0, m, 1.0).unwrap() * hbar * hbar;
    let fraction = watts * 4.3e17 / (m * 299_792_458.0f64.powi(2));
    all(vec![
        ensure((r1.measured / 0.25 - 1.0).abs() < 0.02, format!("1-D {:.5} vs lambda/(4ma^2) = 0.25", r1.measured)),
        ensure(
            (r3.measured / 0.75 - 1.0).abs() < 0.05 && (r3.analytic - 0.75).abs() < 1e-15,
            format!("3-D {:.5} vs 3lambda/(4ma^2) = 0.75", r3.measured),
        ),
        ensure((1e-17..1e-15).contains(&fraction), format!("SI: {watts:.3e} W, {fraction:.2e} m c^2 over 4.3e17 s")),
    ])
}

fn wfield_energy() -> Outcome {
    let lattice = LatticeSpec::new(3, 24, 0.25, 0.01, 1, false).unwrap();
    let p = CollapseParams::single(1.0, 1.0);
    let dv = lattice.cell_volume();
    let n = lattice.n_cells();
    // unit-norm Gaussian blob centred on the lattice
    let mut density: Vec<f64> = (0..n)
        .map(|c| {
            let x = lattice.coords(c);
            (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / (2.0 * 0.3 * 0.3)).exp()
        })
        .collect();
    let total: f64 = density.iter().sum::<f64>() * dv;
    density.iter_mut().for_each(|d| *d /= total);
    let times = [0.0, 1.0, 2.0];
    let hist = DensityHistory::constant(&times, density);
    let w = wfield_energy_density(&lattice, &p, 0, 1.0, &hist).unwrap();
    let mut parts = Vec::new();
    for (k, t) in times.iter().enumerate().skip(1) {
        let integral: f64 = w[k].iter().sum::<f64>() * dv;
        let want = -3.0 * p.lambda * t / (4.0 * p.a * p.a);
        parts.push(ensure(
            (integral / want - 1.0).abs() < 0.01,
            format!("t={t}: int T_w00 = {integral:.5} vs {want:.5}"),
        ));
    }
    let led = packet_ledger(&LatticeSpec::new(1, 128, 0.125, 0.005, 200, true).unwrap(), &p, 1.0, 2.0, 0.5, 1.0, 0.005)
        .unwrap();
    let rep = ledger_check(&led.particle, &led.wfield).unwrap();
    parts.push(ensure(
        rep.max_drift < 1e-6 * rep.scale,
        format!("ledger drift {:.2e} vs 1e-6 * {:.3}", rep.max_drift, rep.scale),
    ));
    all(parts)
}

fn creation() -> Outcome {
    let p = CreationParams::new(1.0, 0.5).unwrap();
    let g = 0.3;
    let dt = 1e-3 / p.m.max(p.lambda);
    let samples = creation_ode_integrate(&p, g, 10.0 / p.lambda, dt, 100).unwrap();
    let mut worst = 0.0f64;
    for s in &samples {
        let f = creation_mean_fields(s.t, &p, g).unwrap();
        worst = worst
            .max((s.xi - f.xi).norm())
            .max((s.number - f.number).abs())
            .max((s.energy - f.energy).abs())
            .max((s.wfield_energy - f.wfield_energy).abs());
    }
    let late = creation_ode_integrate(&p, g, 60.0 / p.lambda, dt, 1000).unwrap();
    let (a, b) = (late[late.len() - 2], late[late.len() - 1]);
    let slope = (b.energy - a.energy) / (b.t - a.t);
    let want = g * g * p.lambda * p.m / (p.m * p.m + p.lambda * p.lambda / 4.0);

    let lattice = LatticeSpec::new(1, 64, 0.25, 0.1, 1, true).unwrap();
    let mut gz = vec![0.0; 64];
    gz[20] = 0.5;
    gz[40] = 0.2;
    let mut cancel = 0.0f64;
    for t in [0.5, 3.0, 9.0, 20.0] {
        let w: f64 = creation_wfield_energy(&lattice, 1.0, &p, &gz, t).unwrap().iter().sum::<f64>() * lattice.dx;
        let e: f64 = creation_particle_energy(&lattice, &p, &gz, t).unwrap().iter().sum::<f64>() * lattice.dx;
        cancel = cancel.max(((w + e) / e).abs());
    }
    all(vec![
        ensure(worst < 1e-8, format!("RK4 vs closed forms {worst:.2e}")),
        ensure((slope / want - 1.0).abs() < 1e-3, format!("slope {slope:.6} vs {want:.6}")),
        ensure(cancel < 1e-8, format!("energy cancellation {cancel:.1e}")),
    ])
}

fn gravity_scenario(coupling: f64, variant: PotentialVariant) -> GravityScenario {
    let lattice = LatticeSpec::new(1, 32, 0.25, 0.05, 1, false).unwrap();
    let params = CollapseParams::single(1.0, 1.0);
    let cfgs = [-1.5, 1.5].iter().map(|x| Configuration::points(&lattice, 0, &[[*x, 0.0, 0.0]]).unwrap()).collect();
    GravityScenario::new(lattice, params, cfgs, coupling, variant, amps(&[0.36, 0.64])).unwrap()
}

fn gravity() -> Outcome {
    let mut parts = Vec::new();

    // (a) vanishing coupling against the flat trajectory ensemble
    let scn = gravity_scenario(1e-12, PotentialVariant::Point);
    let opts = GravityRunOptions { times: vec![1.0], n_traj: 10_000, seed: 31, threads: None, threshold: 0.9 };
    let g = gravity_collapse_run(&scn, GravityMode::DilatedDrift, &opts).unwrap();
    let ops = scn.operators().unwrap();
    let model = TrajectoryModel::new(ops, 1.0, 0.05, None).unwrap();
    let topts = TrajectoryOptions {
        n_steps: 20,
        record_every: 20,
        measure: NoiseMeasure::Physical,
        threshold: 0.9,
        keep_states: false,
    };
    let ens = EnsembleOptions { n_traj: 10_000, master_seed: 32, threads: None, accumulate_rho: true };
    let flat = run_ensemble(&model, &scn.amplitudes, &topts, &ens).unwrap();
    let mut worst = 0.0f64;
    for label in ["branch_0", "branch_1", "undecided"] {
        let (a, sa) = bin(&g.histogram, label);
        let (b, sb) = bin(&flat.histogram, label);
        worst = worst.max((a - b).abs() / sa.hypot(sb));
    }
    let c = &g.coherence[0];
    let (rg, sg) = (c.log_abs.exp(), c.log_abs.exp() * c.stderr);
    let rf = flat.rho_mean[1][(0, 1)].norm();
    let sf = flat.rho_stderr[1][(0, 1)];
    worst = worst.max((rg - rf).abs() / sg.hypot(sf));
    parts.push(ensure(worst <= 3.0, format!("(a) phi->0 vs flat: worst {worst:.2} sigma")));

    for (k, (mode, variant)) in
        [(GravityMode::DilatedDrift, PotentialVariant::Point), (GravityMode::SmearedSurface, PotentialVariant::Smeared)]
            .into_iter()
            .enumerate()
    {
        let seed = 33 + 2 * k as u64;
        let scn = gravity_scenario(0.05, variant);
        // (b) Born frequencies once every trajectory has decided
        let opts = GravityRunOptions { times: vec![12.0], n_traj: 10_000, seed, threads: None, threshold: 0.999 };
        let run = gravity_collapse_run(&scn, mode, &opts).unwrap();
        let mut worst = 0.0f64;
        for (r, want) in [0.36, 0.64].iter().enumerate() {
            let (f, se) = bin(&run.histogram, &format!("branch_{r}"));
            worst = worst.max((f - want).abs() / se);
        }
        let (u, _) = bin(&run.histogram, "undecided");
        parts.push(ensure(worst <= 3.0 && u < 1e-3, format!("(b) {mode:?}: worst {worst:.2} sigma, undecided {u}")));

        // (c) log coherence against the cell-exact oracle
        let opts = GravityRunOptions {
            times: vec![0.5, 1.0, 1.5, 2.0],
            n_traj: 100_000,
            seed: seed + 1,
            threads: None,
            threshold: 0.9,
        };
        let run = gravity_collapse_run(&scn, mode, &opts).unwrap();
        let worst = run.coherence.iter().map(|c| ((c.log_abs - c.oracle) / c.oracle).abs()).fold(0.0, f64::max);
        let rates = gravity_decay_rate(&scn, mode, 0, 1, Some(&run)).unwrap();
        parts.push(ensure(
            worst < 0.01,
            format!(
                "(c) {mode:?}: worst rel dev {worst:.1e}; rate oracle {:.4} displayed {:.4} flat {:.4}",
                rates.oracle, rates.displayed, rates.flat
            ),
        ));
    }
    all(parts)
}

fn form_factor() -> Outcome {
    let mut anti = 0.0f64;
    for sigma in linspace(-3.0, 3.0, 25) {
        for (t1, t2) in [(1.3, 0.4), (-0.7, 2.1), (0.2, -1.5)] {
            let a = g_closed(&FormFactorQuery { sigma, t1, t2, eps: 0.01 }).unwrap();
            let b = g_closed(&FormFactorQuery { sigma: -sigma, t1: t2, t2: t1, eps: 0.01 }).unwrap();
            anti = anti.max((a + b).abs());
        }
    }
    let mut worst = 0.0f64;
    for sigma in linspace(-2.0, 2.0, 20) {
        for t in linspace(1.6, 4.0, 10).into_iter().flat_map(|t| [t, -t]) {
            let quad = omega_representation(sigma, t, 1e-4).unwrap();
            let closed = -braced_term(sigma, t);
            worst = worst.max(((quad - closed) / closed).abs());
        }
    }
    let q = SpatialQuery { t: 1.0, t1: 0.0, t2: 0.5, width: 1.0, eps: 0.05 };
    let c = g_spatial_integral(&q).unwrap();
    let swapped = g_spatial_integral(&SpatialQuery { t1: q.t2, t2: q.t1, ..q }).unwrap();
    all(vec![
        ensure(anti <= 1e-12, format!("antisymmetry {anti:.1e}")),
        ensure(worst < 1e-3, format!("20x20 quadrature vs braced factor {worst:.1e}")),
        ensure(c.relative_error() < 0.1, format!("spatial {:.6} vs {}", c.value, c.predicted)),
        ensure(swapped.value == -c.value, format!("flip {} vs {}", swapped.value, c.value)),
    ])
}

fn packet(dx: f64, k0: f64) -> (LatticeSpec, Vec<C64>) {
    let l = line_1d((24.0 / dx).round() as usize, dx);
    let s = gaussian_packet(&l, 0.3, 1.5, k0).unwrap();
    let norm: f64 = s.amplitudes.iter().map(|v| v.norm_sqr()).sum::<f64>() * dx;
    (l, s.amplitudes.iter().map(|v| v / norm.sqrt()).collect())
}

fn tensors() -> Outcome {
    let mut parts = Vec::new();
    let cont: Vec<f64> = [0.2, 0.1]
        .iter()
        .map(|&dx| {
            let (l, psi) = packet(dx, 0.8);
            continuity_residual(&l, &psi, 1.0, None).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .collect();
    let ratio = cont[0] / cont[1];
    parts.push(ensure((ratio / 4.0 - 1.0).abs() <= 0.15, format!("continuity ratio {ratio:.3}")));
    let bal: Vec<f64> = [0.2, 0.1]
        .iter()
        .map(|&dx| {
            let (l, psi) = packet(dx, 0.5);
            let u: Vec<f64> = (0..l.n).map(|i| 0.5 * l.axis_coord(i).powi(2) / 9.0).collect();
            momentum_balance(&l, &psi, 1.0, Some(&u)).unwrap().max_residual()
        })
        .collect();
    let ratio = bal[0] / bal[1];
    parts.push(ensure((ratio / 4.0 - 1.0).abs() <= 0.15, format!("force balance ratio {ratio:.3}")));
    all(parts)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    for (exp, file) in [(Experiment::Collapse, "collapse_two_branch.toml"), (Experiment::Gravity, "gravity.toml")] {
        let mut files: Vec<Vec<u8>> = Vec::new();
        for threads in [1usize, 4, 8] {
            let out = tmp.path().join(format!("{}-{threads}", exp.name()));
            let inv = Invocation {
                experiment: exp,
                loaded: config::load(&configs_dir().join(file)).unwrap(),
                seed: None,
                out: Some(out.clone()),
                format: None,
                threads: Some(threads),
            };
            csl_lab::run(&inv).unwrap();
            let mut bytes = std::fs::read(out.join("summary.json")).unwrap();
            bytes.extend(std::fs::read(out.join("timeseries.csv")).unwrap());
            files.push(bytes);
        }
        parts.push(ensure(
            files.windows(2).all(|w| w[0] == w[1]),
            format!("{}: threads 1/4/8 byte-identical", exp.name()),
        ));
    }
    all(parts)
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("Born rule", born_rule),
        ("trajectories vs master equation", master_consistency),
        ("decoherence rate", decoherence_rate_check),
        ("energy gain", energy_gain),
        ("W-field energy", wfield_energy),
        ("creation model", creation),
        ("gravity model", gravity),
        ("form factor", form_factor),
        ("particle tensors", tensors),
        ("reproducibility", reproducibility),
    ];
    let mut report = String::new();
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("{tag} {:>2} {name} ({secs:.1} s): {detail}", k + 1);
        println!("{line}");
        writeln!(report, "{line}").unwrap();
        if res.is_err() {
            failed.push(k + 1);
        }
    }
    let _ = std::fs::write(Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt"), &report);
    assert!(failed.is_empty(), "failed criteria: {failed:?}\n{report}");
}
