use std::process::Command;

use demand_ci::demand::{DemandFamily, FeatureMap, ModelSpec};
use demand_ci::env::{ContextConfig, ContextKind, History};
use demand_ci::harness::{
    coverage_experiment, error_distribution_experiment, plot_data, run_trial, ErrorReport, Experiment,
    ExperimentConfig, GridSpec, HarnessError, Method,
};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        horizon: 200,
        n_trials: 6,
        grid: GridSpec { price_points: 11, context_points: 11, context_range: (-1.0, 1.0) },
        mc_draws: 200,
        base_seed: 99,
        ..ExperimentConfig::paper_logistic()
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demand-ci"))
}

#[test]
fn trial_is_deterministic() {
    let cfg = small();
    assert_eq!(run_trial(&cfg, 3).unwrap(), run_trial(&cfg, 3).unwrap());
    assert_ne!(run_trial(&cfg, 3).unwrap().seed, run_trial(&cfg, 4).unwrap().seed);
}

#[test]
fn noiseless_linear_trials_cover() {
    let model = ModelSpec::new(
        DemandFamily::Linear { noise_std: 0.0, truncate_noise: false },
        FeatureMap::AffinePriceContext { a: 1.0, b: -0.5, context_dim: 1 },
        vec![1.0, 0.3],
        (0.0, 1.0),
    )
    .unwrap();
    let cfg = ExperimentConfig {
        model,
        context: ContextConfig { kind: ContextKind::IidUniform, clip_bound: 1.0 },
        ..small()
    };
    let rec = run_trial(&cfg, 0).unwrap();
    let deb = rec.debiased.expect("debiased succeeds");
    assert!(deb.pointwise.iter().chain(&deb.uniform).all(|i| i.covered && i.width < 1e-4));
    assert!(deb.errors.eps.iter().all(|e| e.abs() < 1e-6), "{:?}", deb.errors.eps);
    // Wald needs positive noise.
    assert!(rec.wald.is_none());
}

#[test]
fn single_trial_rates_are_binary() {
    let cfg = ExperimentConfig { n_trials: 1, ..small() };
    let report = coverage_experiment(&cfg).unwrap();
    for c in &report.cells {
        assert!(c.rate == 0.0 || c.rate == 1.0);
        assert_eq!(c.hits + c.misses + c.failures, 1);
    }
}

#[test]
fn failure_accounting_and_report_contents() {
    let cfg = small();
    let report = coverage_experiment(&cfg).unwrap();
    // 3 queries x 4 levels + 2 uniform levels, for each method.
    assert_eq!(report.cells.len(), 2 * (3 * 4 + 2));
    for c in &report.cells {
        assert_eq!(c.hits + c.misses + c.failures, cfg.n_trials);
        assert!(c.rate_lower <= c.rate && c.rate <= c.rate_upper);
    }
    assert!(report.cell(Method::Wald, "uniform", 0.2).is_some());
    assert_eq!(report.metadata.config.workers, 0);
    // Intervals are nested in the level, so coverage is monotone.
    for method in Method::ALL {
        for q in &cfg.queries {
            let rates: Vec<f64> =
                [0.3, 0.2, 0.1, 0.05].iter().map(|&a| report.cell(method, &q.label(), a).unwrap().rate).collect();
            assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
        }
    }
}

#[test]
fn worker_count_does_not_change_reports() {
    let one = coverage_experiment(&ExperimentConfig { workers: 1, ..small() }).unwrap().to_json();
    let three = coverage_experiment(&ExperimentConfig { workers: 3, ..small() }).unwrap().to_json();
    assert_eq!(one, three);
}

#[test]
fn too_many_failures_is_an_error() {
    // Wald fails on every trial of a noiseless linear model.
    let model = ModelSpec::new(
        DemandFamily::Linear { noise_std: 0.0, truncate_noise: false },
        FeatureMap::AffinePriceContext { a: 1.0, b: -0.5, context_dim: 1 },
        vec![1.0, 0.3],
        (0.0, 1.0),
    )
    .unwrap();
    let cfg = ExperimentConfig { model, uniform_alphas: vec![], ..small() };
    assert!(matches!(coverage_experiment(&cfg), Err(HarnessError::TooManyFailures { method: "wald", .. })));
}

#[test]
fn error_table_round_trips_through_plot_data() {
    let report = error_distribution_experiment(&ExperimentConfig { uniform_alphas: vec![], ..small() }).unwrap();
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let series = plot_data(csv.as_slice()).unwrap();
    // 2 estimation coordinates + 3 queries, two methods.
    assert_eq!(series.len(), 10);
    for s in &series {
        let method = if s.method == "debiased" { Method::Debiased } else { Method::Wald };
        let col = report.column(method, &s.column).unwrap();
        let total: u64 = s.histogram.counts.iter().sum::<u64>() + s.histogram.underflow + s.histogram.overflow;
        assert_eq!(total as usize, col.moments.n);
    }
}

#[test]
fn error_report_values_match_trial_records() {
    let exp = Experiment::new(ExperimentConfig { uniform_alphas: vec![], ..small() }).unwrap();
    let records = exp.run_trials().unwrap();
    let report = ErrorReport::from_trials(&exp, &records).unwrap();
    let first = &report.rows[0];
    let deb = records[first.0].debiased.as_ref().unwrap();
    assert_eq!(first.2[..2], deb.errors.eps[..]);
}

#[test]
fn cli_coverage_smoke() {
    let out = bin()
        .args(["coverage", "--config", "paper_logistic", "--trials", "1", "--horizon", "100", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["metadata"]["config"]["horizon"], 100);
    assert_eq!(json["metadata"]["config"]["base_seed"], 7);
}

#[test]
fn cli_config_errors_exit_2() {
    let missing = bin().args(["coverage", "--config", "/no/such/config.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let unknown = bin().args(["coverage", "--frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    let invalid = bin().args(["coverage", "--trials", "0"]).output().unwrap();
    assert_eq!(invalid.status.code(), Some(2));
}

#[test]
fn cli_experiment_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noiseless.toml");
    std::fs::write(
        &path,
        "n_trials = 2\nhorizon = 50\nuniform_alphas = []\n\
         [model]\ntheta0 = [1.0, 0.3]\nprice_range = [0.0, 1.0]\ncontext_dim = 1\n\
         [model.family]\nkind = \"linear\"\nnoise_std = 0.0\n\
         [model.feature_map]\nkind = \"affine_price_context\"\na = 1.0\nb = -0.5\ncontext_dim = 1\n",
    )
    .unwrap();
    let out = bin().args(["coverage", "--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cli_simulate_writes_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate", "--horizon", "50", "--seed", "3", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let file = std::fs::File::open(dir.path().join("history.csv")).unwrap();
    let h = History::<f64>::read_csv(std::io::BufReader::new(file)).unwrap();
    assert_eq!(h.len(), 50);
}

#[test]
fn cli_errors_then_plot_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut dats = Vec::new();
    for run in 0..2 {
        let out_dir = dir.path().join(format!("run{run}"));
        let out_str = out_dir.to_str().unwrap();
        let status = bin()
            .args(["errors", "--trials", "4", "--horizon", "120", "--seed", "5", "--out", out_str])
            .status()
            .unwrap();
        assert!(status.success());
        assert!(out_dir.join("errors_summary.json").is_file());
        let csv = out_dir.join("errors.csv");
        let status = bin().args(["plot-data", "--input", csv.to_str().unwrap(), "--out", out_str]).status().unwrap();
        assert!(status.success());
        dats.push(std::fs::read(out_dir.join("errors_hist.dat")).unwrap());
    }
    assert!(!dats[0].is_empty());
    assert_eq!(dats[0], dats[1]);
}

#[test]
fn cli_diagnose_reports_each_horizon() {
    let out = bin().args(["diagnose", "--trials", "2", "--horizons", "60,120"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["horizon"], 120);
}
