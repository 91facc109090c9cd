//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The desk-scale run (T = 2000, 1000 trials, ε-greedy pricing) is shared by
//! criteria 1-4, 7 and 9. Expect roughly 15 minutes on one core.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use demand_ci::demand::standard_logistic_spec;
use demand_ci::env::{run_episode, ContextConfig, Policy};
use demand_ci::estimator::{pilot_sequence, FitOptions};
use demand_ci::harness::{
    diagnose, CoverageReport, ErrorReport, Experiment, ExperimentConfig, Method, TrialRecord,
};
use demand_ci::linalg::Matrix;
use demand_ci::whitening::{default_eta, whiten, whiten_gradients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEVELS: [f64; 4] = [0.7, 0.8, 0.9, 0.95];

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn desk_config(workers: usize) -> ExperimentConfig {
    ExperimentConfig { name: "acceptance_desk".into(), workers, pilot_checkpoints: vec![500], ..ExperimentConfig::paper_logistic() }
}

fn alpha_of(level: f64) -> f64 {
    [0.3, 0.2, 0.1, 0.05].into_iter().find(|a| ((1.0 - a) - level).abs() < 1e-12).expect("configured level")
}

fn criterion_1(cov: &CoverageReport, queries: &[String]) -> Line {
    let mut worst = (0.0_f64, String::new());
    let mut pass = true;
    for q in queries {
        for level in LEVELS {
            let c = cov.cell(Method::Debiased, q, alpha_of(level)).expect("cell");
            let gap = (c.rate - level).abs();
            pass &= gap <= 0.04;
            if gap > worst.0 || worst.1.is_empty() {
                worst = (gap, format!("{q} at {level}: {:.3} (±{:.3})", c.rate, c.half_width));
            }
        }
    }
    Line { id: 1, name: "debiased point-wise coverage within ±0.04", pass, detail: format!("worst {}", worst.1) }
}

fn criterion_2(cov: &CoverageReport, queries: &[String]) -> Line {
    let rates: Vec<String> = queries
        .iter()
        .map(|q| format!("{q} {:.3}", cov.cell(Method::Wald, q, 0.3).expect("cell").rate))
        .collect();
    let pass = queries.iter().any(|q| cov.cell(Method::Wald, q, 0.3).expect("cell").rate < 0.65);
    Line { id: 2, name: "Wald coverage at 0.7 below 0.65 for some query", pass, detail: rates.join(", ") }
}

fn criterion_3(cov: &CoverageReport) -> Line {
    let d8 = cov.cell(Method::Debiased, "uniform", 0.2).expect("cell");
    let d9 = cov.cell(Method::Debiased, "uniform", 0.1).expect("cell");
    let w8 = cov.cell(Method::Wald, "uniform", 0.2).expect("cell");
    let pass = (d8.rate - 0.8).abs() <= 0.05 && (d9.rate - 0.9).abs() <= 0.05 && w8.rate <= 0.8 - 0.05;
    Line {
        id: 3,
        name: "uniform bands: debiased within ±0.05, Wald under-covers by ≥0.05 at 0.8",
        pass,
        detail: format!("debiased 0.8 -> {:.3}, 0.9 -> {:.3}; Wald 0.8 -> {:.3}", d8.rate, d9.rate, w8.rate),
    }
}

fn normal_enough(m: &demand_ci::harness::stats::Moments) -> bool {
    m.mean.abs() < 0.1 && (0.85..=1.15).contains(&m.variance) && m.ks < 0.06
}

fn criterion_4(errs: &ErrorReport) -> Line {
    let mut parts = Vec::new();
    let mut deb_ok = true;
    let mut wald_violates = false;
    for method in Method::ALL {
        for col in ["eps_1", "eps_2"] {
            let m = errs.column(method, col).expect("column").moments;
            if method == Method::Debiased {
                deb_ok &= normal_enough(&m);
            } else {
                wald_violates |= !normal_enough(&m);
            }
            parts.push(format!("{} {col}: mean {:.3} var {:.3} KS {:.3}", method.name(), m.mean, m.variance, m.ks));
        }
    }
    Line {
        id: 4,
        name: "debiased errors standard normal, Wald errors not",
        pass: deb_ok && wald_violates,
        detail: parts.join("; "),
    }
}

fn criterion_5() -> Line {
    let mut problems = Vec::new();
    if let Some(m) = common::hand_trace_mismatch() {
        problems.push(format!("hand trace: {m}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..200 {
        let (t, d) = (rng.random_range(1..120), rng.random_range(1..5));
        let data = (0..t * d).map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(-3.0..3.0) }).collect();
        let w = whiten_gradients(Matrix::from_vec(t, d, data).unwrap(), rng.random_range(0.01..2.0)).unwrap();
        if let Some(m) = common::norm_invariant_violation(&w) {
            problems.push(format!("random case {case}: {m}"));
        }
    }
    let spec = standard_logistic_spec();
    let policy = Policy::epsilon_greedy(0.05);
    for seed in 0..20 {
        let ep = run_episode(&spec, &policy, ContextConfig::default(), 2000, 1000 + seed).unwrap();
        let pilots = pilot_sequence(&ep.history, &spec, FitOptions::default()).unwrap();
        let w = whiten(&ep.history, &pilots, &spec, default_eta(2000, 0.6)).unwrap();
        if let Some(m) = common::norm_invariant_violation(&w) {
            problems.push(format!("episode {seed}: {m}"));
        }
    }
    for seed in 0..3 {
        let a = run_episode(&spec, &policy, ContextConfig::default(), 600, 2000 + seed).unwrap();
        let b = run_episode(&spec, &policy, ContextConfig::default(), 600, 3000 + seed).unwrap();
        for keep in [1, 100, 300, 599] {
            if let Some(m) = common::prefix_mismatch(&spec, &a.history, &b.history, keep) {
                problems.push(format!("prefix {keep}, seed {seed}: {m}"));
            }
        }
    }
    Line {
        id: 5,
        name: "whitening invariants (norm cap, Frobenius, prefix determinism, hand trace)",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            "200 random gradient sequences, 20 episodes, 12 prefix splices, hand trace".into()
        } else {
            problems.join("; ")
        },
    }
}

fn criterion_6() -> Line {
    let cfg = ExperimentConfig { n_trials: 100, workers: 0, ..ExperimentConfig::paper_logistic() };
    let report = diagnose(&cfg, &[500, 2000, 8000]).expect("diagnose");
    let scaled: Vec<f64> = report.rows.iter().map(|r| r.median_iwg_scaled).collect();
    let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0_f64), |(l, h), &v| (l.min(v), h.max(v)));
    let detail = report
        .rows
        .iter()
        .map(|r| format!("T={}: median {:.3}, scaled {:.3}", r.horizon, r.median_iwg_opnorm, r.median_iwg_scaled))
        .collect::<Vec<_>>()
        .join("; ");
    Line {
        id: 6,
        name: "median ‖I-WG‖/(η√T) varies by less than 3x over T in {500, 2000, 8000}",
        pass: hi / lo < 3.0,
        detail: format!("{detail}; ratio {:.3}", hi / lo),
    }
}

fn criterion_7(cov: &CoverageReport) -> Line {
    let d = &cov.diagnostics;
    let at_500 = d.median_checkpoint_errors[0];
    let ratio = d.median_pilot_error / at_500;
    Line {
        id: 7,
        name: "median pilot error ratio T=2000 / T=500 in [0.4, 0.75]",
        pass: d.trials >= 200 && (0.4..=0.75).contains(&ratio),
        detail: format!("{} trials, medians {:.4} / {:.4} = {ratio:.3}", d.trials, d.median_pilot_error, at_500),
    }
}

fn criterion_8() -> Line {
    let checks = [
        ("quantile vs bisection", common::quantile_max_error(), 1e-8),
        ("Cholesky reconstruction", common::cholesky_max_error(), 1e-10),
        ("Newton vs gradient descent", common::newton_vs_gd_error(1_000_000), 1e-4),
        ("gradients vs finite differences", common::gradient_fd_error(), 1e-6),
        ("Hessians vs finite differences", common::hessian_fd_error(), 1e-4),
    ];
    let mut pass = checks.iter().all(|(_, v, tol)| v < tol);
    let mut parts: Vec<String> = checks.iter().map(|(n, v, tol)| format!("{n} {v:.1e} (< {tol:.0e})")).collect();
    let spec = standard_logistic_spec();
    let mut worst = 0.0_f64;
    for seed in 0..10 {
        let c = common::decomposition_check(&spec, 2000, 500 + seed);
        pass &= c.remainder <= c.bound;
        worst = worst.max(c.remainder / c.bound);
    }
    parts.push(format!("decomposition remainder / bound max {worst:.2e} (≤ 1)"));
    Line { id: 8, name: "numerical kernel oracles", pass, detail: parts.join("; ") }
}

fn criterion_9(first: &str) -> Line {
    let exp = Experiment::new(desk_config(4)).expect("valid config");
    let records = exp.run_trials().expect("trials");
    let second = CoverageReport::from_trials(&exp, &records).expect("report").to_json();
    Line {
        id: 9,
        name: "byte-identical desk-scale reports across worker counts (1 vs 4)",
        pass: first == second,
        detail: format!("{} bytes vs {} bytes", first.len(), second.len()),
    }
}

fn print(line: &Line, started: Instant) {
    println!(
        "[{}] criterion {}: {} :: {} ({:.0}s)",
        if line.pass { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail,
        started.elapsed().as_secs_f64()
    );
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut lines = Vec::new();

    for line in [criterion_8(), criterion_5()] {
        print(&line, started);
        lines.push(line);
    }

    let exp = Experiment::new(desk_config(1)).expect("valid config");
    let records: Vec<TrialRecord> = exp.run_trials().expect("trials");
    let queries: Vec<String> = exp.config.queries.iter().map(|q| q.label()).collect();
    let (cov, errs) = match (CoverageReport::from_trials(&exp, &records), ErrorReport::from_trials(&exp, &records)) {
        (Ok(c), Ok(e)) => (c, e),
        (Err(e), _) | (_, Err(e)) => {
            println!("[FAIL] desk-scale experiment failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let cov_json = cov.to_json();
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let _ = std::fs::write(dir.join("acceptance_coverage.json"), &cov_json);
    let _ = std::fs::write(dir.join("acceptance_errors.json"), errs.to_json());
    println!("desk-scale run: {} trials in {:.0}s", records.len(), started.elapsed().as_secs_f64());

    for line in [criterion_1(&cov, &queries), criterion_2(&cov, &queries), criterion_3(&cov), criterion_4(&errs), criterion_7(&cov)] {
        print(&line, started);
        lines.push(line);
    }
    for line in [criterion_6(), criterion_9(&cov_json)] {
        print(&line, started);
        lines.push(line);
    }

    lines.sort_by_key(|l| l.id);
    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| l.id.to_string()).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
