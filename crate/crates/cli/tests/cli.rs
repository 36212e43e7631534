use std::fs;
use std::path::Path;
use std::process::Command;

use csl_core::stats::OutcomeBin;
use csl_core::NoiseMeasure;
use csl_lab::config::parse;
use csl_lab::experiments::{CollapseReport, Estimate, Report};
use csl_lab::*;
use proptest::prelude::*;

const BIN: &str = env!("CARGO_BIN_EXE_csl-lab");

fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const SMALL: &str = r#"
[lattice]
dim = 1
n = 32
dx = 0.25
dt = 0.05
n_steps = 20

[collapse]
lambda = 1.0
a = 1.0

[scenario]
branches = [[-1.0], [1.0]]
probabilities = [0.36, 0.64]

[run]
seed = 5
n_traj = 300
record_every = 5
threshold = 0.9
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn lab(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn collapse_writes_histogram_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = lab(&["collapse", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let hist = summary["report"]["collapse"]["histogram"].as_array().unwrap();
    for bin in hist {
        for key in ["outcome", "count", "frequency", "stderr"] {
            assert!(bin.get(key).is_some(), "missing {key}");
        }
    }
    assert_eq!(summary["meta"]["seed"], 5);
    assert_eq!(summary["meta"]["config_sha256"], sha256_hex(SMALL.as_bytes()));
    assert!(summary["meta"]["git_revision"].as_str().unwrap().len() > 0);
    let csv = fs::read_to_string(out.join("timeseries.csv")).unwrap();
    assert!(csv.starts_with("t,w_0,w_1,w_0_stderr,w_1_stderr\n"));
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn creation_ode_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = lab(&[
        "creation",
        "--mode",
        "ode",
        "--config",
        config_path("creation.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("timeseries.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,xi_re,xi_im,n_mean,e_density,ew_density");
    let t = parse_csv(&csv).unwrap();
    assert_eq!(t.rows.len(), 201);
    // 17 significant digits: one leading digit and sixteen decimals
    let v = csv.lines().nth(5).unwrap().split(',').nth(1).unwrap();
    assert_eq!(v.split('e').next().unwrap().trim_start_matches('-').len(), 18);
}

#[test]
fn every_demo_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, file) in [
        ("lindblad", "lindblad_three_branch.toml"),
        ("gravity", "gravity.toml"),
        ("formfactor", "formfactor.toml"),
        ("tensors", "tensors.toml"),
    ] {
        let out = dir.path().join(cmd);
        let o = lab(&[
            cmd,
            "--config",
            config_path(file).to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--format",
            "json",
        ]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let series: Table = parse_json(&fs::read_to_string(out.join("timeseries.json")).unwrap()).unwrap();
        assert!(!series.rows.is_empty());
        let _: Summary = parse_json(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    }
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("dx = 0.25", "dx = \"wide\"");
    let cfg = write_config(dir.path(), &bad);
    let o = lab(&["collapse", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 5"), "{err}");
    assert!(!dir.path().join("o").join("summary.json").exists());

    let unknown = SMALL.replace("lambda = 1.0", "lambda = 1.0\nlamda = 2.0");
    assert!(matches!(parse(&unknown), Err(LabError::Config(m)) if m.contains("lamda")));
    let neg = SMALL.replace("lambda = 1.0", "lambda = -1.0");
    assert!(matches!(parse(&neg), Err(LabError::Config(m)) if m.contains("collapse")));
    let missing = lab(&["collapse"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = lab(&["collapse", "--config", cfg.to_str().unwrap(), "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let o = lab(&["collapse", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn numerical_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // a packet far narrower than a cell underflows to zero norm
    let cfg = write_config(
        dir.path(),
        &fs::read_to_string(config_path("tensors.toml")).unwrap().replace("width = 1.5", "width = 1.5e-9"),
    );
    let o = lab(&["tensors", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn nan_is_a_hard_error() {
    let mut t = Table::new(["t", "x"]);
    t.push(vec![0.0, 1.0]);
    t.push(vec![1.0, f64::NAN]);
    assert!(matches!(emit_csv(&t), Err(LabError::Numerical(m)) if m.contains("'x'") && m.contains("row 1")));
    assert!(matches!(emit_json(&t), Err(LabError::Numerical(_))));
    assert!(emit_json(&vec![f64::INFINITY]).is_err());
}

#[test]
fn empty_ensemble_gives_header_only_csv() {
    let cfg = parse(&SMALL.replace("n_traj = 300", "n_traj = 0")).unwrap();
    let a = execute(Experiment::Collapse, &cfg, RunControl { seed: 1, threads: None }).unwrap();
    assert_eq!(emit_csv(&a.series).unwrap(), "t,w_0,w_1,w_0_stderr,w_1_stderr\n");
    let Report::Collapse(r) = &a.report else { panic!() };
    assert!(r.histogram.is_empty() && r.importance_weight.is_none());
    emit_json(&a.report).unwrap();
}

#[test]
fn flags_override_config() {
    let text = SMALL.replace("[run]", "[run]\nformat = \"json\"\nthreads = 2");
    let inv = Invocation {
        experiment: Experiment::Collapse,
        loaded: LoadedConfig { config: parse(&text).unwrap(), text },
        seed: Some(9),
        out: None,
        format: Some(Format::Csv),
        threads: None,
    };
    assert_eq!(inv.seed(), 9);
    assert_eq!(inv.format(), Format::Csv);
    assert_eq!(inv.threads().unwrap(), Some(2));
    assert_eq!(inv.out_dir(), Path::new("out"));
}

#[test]
fn same_seed_same_bytes_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut outputs = Vec::new();
    for threads in ["1", "4", "8"] {
        let out = dir.path().join(threads);
        let o =
            lab(&["collapse", "--config", cfg.to_str().unwrap(), "--threads", threads, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        outputs.push((fs::read(out.join("summary.json")).unwrap(), fs::read(out.join("timeseries.csv")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn aborted_output_is_removed() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("a.csv", "t\n").unwrap();
        assert!(dir.path().join("a.csv").exists());
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    let files = write_all(dir.path(), &[("b.csv".into(), "t\n".into())]).unwrap();
    assert!(files[0].exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e300..1e300f64, -1.0..1.0f64, Just(0.0), Just(f64::MIN_POSITIVE), Just(5e-324)]
}

fn collapse_report() -> impl Strategy<Value = CollapseReport> {
    (
        0usize..100_000,
        prop::collection::vec(finite(), 0..4),
        prop::collection::vec((0usize..1000, finite(), finite()), 0..4),
        prop::collection::vec((finite(), finite()), 0..4),
        prop::option::of((finite(), finite())),
        finite(),
        any::<bool>(),
    )
        .prop_map(|(n, probs, bins, weights, imp, ess, vac)| CollapseReport {
            n_traj: n,
            measure: if vac { NoiseMeasure::Vacuum } else { NoiseMeasure::Physical },
            threshold: 0.99,
            probabilities: probs,
            histogram: bins
                .into_iter()
                .enumerate()
                .map(|(i, (count, frequency, stderr))| OutcomeBin {
                    outcome: format!("branch_{i}"),
                    count,
                    frequency,
                    stderr,
                })
                .collect(),
            final_time: imp.map(|(t, _)| t),
            final_weights: weights.into_iter().map(|(value, stderr)| Estimate { value, stderr }).collect(),
            importance_weight: imp.map(|(value, stderr)| Estimate { value, stderr }),
            effective_sample_size: ess,
        })
}

proptest! {
    #[test]
    fn summary_round_trips(report in collapse_report(), seed in any::<u64>(), hash in "[0-9a-f]{64}") {
        let s = Summary {
            meta: Meta {
                tool: "csl-lab".into(),
                version: "0.1.0".into(),
                command: "collapse".into(),
                config_sha256: hash,
                git_revision: "abc".into(),
                seed,
            },
            report: Report::Collapse(report),
        };
        let text = emit_json(&s).unwrap();
        let back: Summary = parse_json(&text).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn csv_round_trips(rows in prop::collection::vec(prop::collection::vec(finite(), 3), 0..20)) {
        let mut t = Table::new(["a", "b", "c"]);
        for r in rows {
            t.push(r);
        }
        let back = parse_csv(&emit_csv(&t).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}
