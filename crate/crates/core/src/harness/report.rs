//! Aggregation of trial records into coverage, error and diagnostic reports.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::stats::{clopper_pearson, mean, median, Histogram, Moments};
use super::trial::{Experiment, Method, TrialRecord};
use super::HarnessError;

pub const FORMAT_VERSION: u32 = 1;
/// Experiments with a larger share of failed trials (for either method) are rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;
/// Level of the binomial uncertainty intervals attached to coverage rates.
pub const BINOMIAL_LEVEL: f64 = 0.95;

const PLOT_BINS: usize = 40;
const PLOT_RANGE: (f64, f64) = (-4.0, 4.0);

/// Header shared by every report. Records the full config (minus the worker
/// count, which never affects results).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub generator: String,
    pub experiment: String,
    pub eta: f64,
    pub grid: Option<serde_json::Value>,
    pub config: ExperimentConfig,
}

impl Metadata {
    pub fn for_experiment(exp: &Experiment) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            generator: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            experiment: exp.config.name.clone(),
            eta: exp.eta(),
            grid: exp.grid().map(|g| g.metadata()),
            config: exp.config.for_metadata(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub method: Method,
    /// Query label such as `(0.5, 1)`, or `uniform`.
    pub target: String,
    pub alpha: f64,
    pub level: f64,
    pub hits: usize,
    pub misses: usize,
    pub failures: usize,
    /// `hits + misses`.
    pub trials: usize,
    pub rate: f64,
    pub rate_lower: f64,
    pub rate_upper: f64,
    /// `max(rate - lower, upper - rate)` of the exact binomial interval.
    pub half_width: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub trials: usize,
    pub median_iwg_opnorm: f64,
    /// Median of `‖I - WG‖_op / (η √T)`.
    pub median_iwg_scaled: f64,
    pub median_cube_sum: f64,
    pub median_min_eig_cov: f64,
    pub mean_clip_fraction: f64,
    pub median_pilot_error: f64,
    pub median_checkpoint_errors: Vec<f64>,
    pub cov_clipped_trials: usize,
    pub pilot_nonconverged_trials: usize,
    pub fallback_total: usize,
    pub zero_grad_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    /// Trials that failed before whitening.
    pub trials: usize,
    pub debiased: usize,
    pub wald: usize,
    /// Up to ten failure messages, in trial order.
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub metadata: Metadata,
    pub cells: Vec<CoverageCell>,
    pub diagnostics: DiagnosticsSummary,
    pub failures: FailureSummary,
}

fn check_failures(exp: &Experiment, records: &[TrialRecord]) -> Result<FailureSummary, HarnessError> {
    let total = records.len();
    let count = |m: Method| records.iter().filter(|r| r.outcome(m).is_none()).count();
    let summary = FailureSummary {
        trials: records.iter().filter(|r| r.diagnostics.is_none()).count(),
        debiased: count(Method::Debiased),
        wald: count(Method::Wald),
        examples: records
            .iter()
            .flat_map(|r| r.failures.iter().map(move |f| format!("trial {}: {f}", r.index)))
            .take(10)
            .collect(),
    };
    debug_assert_eq!(total, exp.config.n_trials);
    for (method, failed) in [(Method::Debiased, summary.debiased), (Method::Wald, summary.wald)] {
        if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
            return Err(HarnessError::TooManyFailures { method: method.name(), failed, total });
        }
    }
    Ok(summary)
}

fn cell(method: Method, target: String, alpha: f64, outcomes: &[Option<super::Interval>]) -> CoverageCell {
    let done: Vec<_> = outcomes.iter().flatten().collect();
    let hits = done.iter().filter(|i| i.covered).count();
    let trials = done.len();
    let rate = if trials == 0 { f64::NAN } else { hits as f64 / trials as f64 };
    let (rate_lower, rate_upper) = clopper_pearson(hits, trials, BINOMIAL_LEVEL);
    let widths: Vec<f64> = done.iter().map(|i| i.width).collect();
    CoverageCell {
        method,
        target,
        alpha,
        level: 1.0 - alpha,
        hits,
        misses: trials - hits,
        failures: outcomes.len() - trials,
        trials,
        rate,
        rate_lower,
        rate_upper,
        half_width: (rate - rate_lower).max(rate_upper - rate),
        mean_width: mean(&widths),
    }
}

impl DiagnosticsSummary {
    pub fn from_trials(exp: &Experiment, records: &[TrialRecord]) -> Self {
        let diags: Vec<_> = records.iter().filter_map(|r| r.diagnostics.as_ref()).collect();
        let scale = exp.eta() * (exp.config.horizon as f64).sqrt();
        let pick = |f: &dyn Fn(&super::TrialDiagnostics) -> f64| diags.iter().map(|d| f(d)).collect::<Vec<f64>>();
        let iwg = pick(&|d| d.whitening.iwg_opnorm);
        let median_checkpoint_errors = (0..exp.config.pilot_checkpoints.len())
            .map(|k| median(&pick(&|d| d.checkpoint_errors[k])))
            .collect();
        Self {
            trials: diags.len(),
            median_iwg_opnorm: median(&iwg),
            median_iwg_scaled: median(&iwg) / scale,
            median_cube_sum: median(&pick(&|d| d.whitening.cube_sum)),
            median_min_eig_cov: median(&pick(&|d| d.whitening.min_eig_cov)),
            mean_clip_fraction: mean(&pick(&|d| d.whitening.clip_fraction)),
            median_pilot_error: median(&pick(&|d| d.pilot_error)),
            median_checkpoint_errors,
            cov_clipped_trials: diags.iter().filter(|d| d.cov_clipped).count(),
            pilot_nonconverged_trials: diags.iter().filter(|d| !d.pilot_converged).count(),
            fallback_total: diags.iter().map(|d| d.fallback_count).sum(),
            zero_grad_total: diags.iter().map(|d| d.whitening.zero_grad_count).sum(),
        }
    }
}

impl CoverageReport {
    pub fn from_trials(exp: &Experiment, records: &[TrialRecord]) -> Result<Self, HarnessError> {
        let failures = check_failures(exp, records)?;
        let cfg = &exp.config;
        let n_alphas = cfg.alphas.len();
        let mut cells = Vec::new();
        for method in Method::ALL {
            for (qi, q) in cfg.queries.iter().enumerate() {
                for (ai, &alpha) in cfg.alphas.iter().enumerate() {
                    let outcomes: Vec<_> =
                        records.iter().map(|r| r.outcome(method).map(|o| o.point(qi, ai, n_alphas))).collect();
                    cells.push(cell(method, q.label(), alpha, &outcomes));
                }
            }
            for (ai, &alpha) in cfg.uniform_alphas.iter().enumerate() {
                let outcomes: Vec<_> = records.iter().map(|r| r.outcome(method).map(|o| o.uniform[ai])).collect();
                cells.push(cell(method, "uniform".into(), alpha, &outcomes));
            }
        }
        Ok(Self {
            metadata: Metadata::for_experiment(exp),
            cells,
            diagnostics: DiagnosticsSummary::from_trials(exp, records),
            failures,
        })
    }

    pub fn cell(&self, method: Method, target: &str, alpha: f64) -> Option<&CoverageCell> {
        self.cells.iter().find(|c| c.method == method && c.target == target && c.alpha == alpha)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,target,level,hits,misses,failures,trials,rate,rate_lower,rate_upper,half_width,mean_width")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},\"{}\",{},{},{},{},{},{},{},{},{},{}",
                c.method.name(),
                c.target,
                c.level,
                c.hits,
                c.misses,
                c.failures,
                c.trials,
                c.rate,
                c.rate_lower,
                c.rate_upper,
                c.half_width,
                c.mean_width
            )?;
        }
        Ok(())
    }
}

/// Runs `config.n_trials` trials and aggregates coverage.
pub fn coverage_experiment(config: &ExperimentConfig) -> Result<CoverageReport, HarnessError> {
    let exp = Experiment::new(config.clone())?;
    let records = exp.run_trials()?;
    CoverageReport::from_trials(&exp, &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorColumn {
    pub method: Method,
    /// `eps_k` for estimation-error coordinates, `pred_k` for query `k`.
    pub column: String,
    pub description: String,
    pub moments: Moments,
}

/// Standardized errors of every successful trial, both methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub metadata: Metadata,
    pub columns: Vec<ErrorColumn>,
    /// `(trial, method, eps..., pred...)`.
    #[serde(skip)]
    pub rows: Vec<(usize, Method, Vec<f64>)>,
}

impl ErrorReport {
    pub fn from_trials(exp: &Experiment, records: &[TrialRecord]) -> Result<Self, HarnessError> {
        check_failures(exp, records)?;
        let cfg = &exp.config;
        let d = cfg.model.dim();
        let mut rows = Vec::new();
        for method in Method::ALL {
            for r in records {
                if let Some(o) = r.outcome(method) {
                    let values: Vec<f64> = o.errors.eps.iter().chain(&o.errors.predictions).copied().collect();
                    rows.push((r.index, method, values));
                }
            }
        }
        let mut columns = Vec::new();
        for method in Method::ALL {
            let names = (0..d)
                .map(|k| (format!("eps_{}", k + 1), format!("standardized estimation error, coordinate {}", k + 1)))
                .chain(cfg.queries.iter().enumerate().map(|(k, q)| {
                    (format!("pred_{}", k + 1), format!("standardized prediction error at {}", q.label()))
                }));
            for (j, (column, description)) in names.enumerate() {
                let values: Vec<f64> = rows.iter().filter(|r| r.1 == method).map(|r| r.2[j]).collect();
                columns.push(ErrorColumn { method, column, description, moments: Moments::of(&values) });
            }
        }
        Ok(Self { metadata: Metadata::for_experiment(exp), columns, rows })
    }

    pub fn column(&self, method: Method, name: &str) -> Option<&ErrorColumn> {
        self.columns.iter().find(|c| c.method == method && c.column == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let names: Vec<&str> =
            self.columns.iter().filter(|c| c.method == Method::Debiased).map(|c| c.column.as_str()).collect();
        writeln!(w, "trial,method,{}", names.join(","))?;
        for (trial, method, values) in &self.rows {
            let vals: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{trial},{},{}", method.name(), vals.join(","))?;
        }
        Ok(())
    }
}

pub fn error_distribution_experiment(config: &ExperimentConfig) -> Result<ErrorReport, HarnessError> {
    let exp = Experiment::new(config.clone())?;
    let records = exp.run_trials()?;
    ErrorReport::from_trials(&exp, &records)
}

/// Histogram of one error column, ready for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub method: String,
    pub column: String,
    pub histogram: Histogram,
}

impl PlotSeries {
    /// Gnuplot-style data blocks (`center density count`) separated by blank
    /// lines, one block per series.
    pub fn write_dat<W: Write>(series: &[PlotSeries], mut w: W) -> std::io::Result<()> {
        for (k, s) in series.iter().enumerate() {
            if k > 0 {
                writeln!(w, "\n")?;
            }
            writeln!(w, "# {} {} (underflow {}, overflow {})", s.method, s.column, s.histogram.underflow, s.histogram.overflow)?;
            for (i, (&c, dens)) in s.histogram.counts.iter().zip(s.histogram.density()).enumerate() {
                writeln!(w, "{} {} {}", s.histogram.center(i), dens, c)?;
            }
        }
        Ok(())
    }
}

/// Reads an error table written by [`ErrorReport::write_csv`] and bins every
/// column on `[-4, 4]`.
pub fn plot_data<R: BufRead>(reader: R) -> Result<Vec<PlotSeries>, HarnessError> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| HarnessError::Parse("empty input".into()))??;
    let names: Vec<String> = header.split(',').map(str::to_string).collect();
    if names.len() < 3 || names[0] != "trial" || names[1] != "method" {
        return Err(HarnessError::Parse(format!("unexpected header '{header}'")));
    }
    let n_cols = names.len() - 2;
    let mut methods: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(HarnessError::Parse(format!("line {}: expected {} fields", lineno + 2, names.len())));
        }
        let idx = match methods.iter().position(|(m, _)| m == fields[1]) {
            Some(i) => i,
            None => {
                methods.push((fields[1].to_string(), vec![Vec::new(); n_cols]));
                methods.len() - 1
            }
        };
        for (j, f) in fields[2..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| HarnessError::Parse(format!("line {}: bad number '{f}'", lineno + 2)))?;
            methods[idx].1[j].push(v);
        }
    }
    Ok(methods
        .into_iter()
        .flat_map(|(method, cols)| {
            let names = &names;
            cols.into_iter().enumerate().map(move |(j, values)| PlotSeries {
                method: method.clone(),
                column: names[j + 2].clone(),
                histogram: Histogram::from_values(&values, PLOT_RANGE.0, PLOT_RANGE.1, PLOT_BINS),
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRow {
    pub horizon: usize,
    pub eta: f64,
    pub trials: usize,
    pub failures: usize,
    pub median_iwg_opnorm: f64,
    /// Median of `‖I - WG‖_op / (η √T)`.
    pub median_iwg_scaled: f64,
    pub median_cube_sum: f64,
    pub median_min_eig_cov: f64,
    pub mean_clip_fraction: f64,
    pub median_pilot_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub metadata: Metadata,
    pub rows: Vec<DiagnoseRow>,
}

impl DiagnoseReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Whitening and pilot diagnostics of `config` at each horizon in `horizons`
/// (no intervals are computed).
pub fn diagnose(config: &ExperimentConfig, horizons: &[usize]) -> Result<DiagnoseReport, HarnessError> {
    let base = Experiment::new(ExperimentConfig { uniform_alphas: Vec::new(), pilot_checkpoints: Vec::new(), ..config.clone() })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let mut rows = Vec::with_capacity(horizons.len());
    for &horizon in horizons {
        let exp = Experiment::new(ExperimentConfig { horizon, ..base.config.clone() })?;
        let results: Vec<_> = pool.install(|| {
            (0..config.n_trials)
                .into_par_iter()
                .map(|i| {
                    exp.artifacts(i).ok().map(|a| {
                        let diag = a.whitening.diagnostics.expect("whiten fills diagnostics");
                        let err = a
                            .pilots
                            .final_estimate()
                            .iter()
                            .zip(&config.model.theta0)
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt();
                        (diag, err)
                    })
                })
                .collect()
        });
        let ok: Vec<_> = results.iter().flatten().collect();
        let eta = exp.eta();
        let iwg: Vec<f64> = ok.iter().map(|(d, _)| d.iwg_opnorm).collect();
        rows.push(DiagnoseRow {
            horizon,
            eta,
            trials: ok.len(),
            failures: results.len() - ok.len(),
            median_iwg_opnorm: median(&iwg),
            median_iwg_scaled: median(&iwg) / (eta * (horizon as f64).sqrt()),
            median_cube_sum: median(&ok.iter().map(|(d, _)| d.cube_sum).collect::<Vec<_>>()),
            median_min_eig_cov: median(&ok.iter().map(|(d, _)| d.min_eig_cov).collect::<Vec<_>>()),
            mean_clip_fraction: mean(&ok.iter().map(|(d, _)| d.clip_fraction).collect::<Vec<_>>()),
            median_pilot_error: median(&ok.iter().map(|(_, e)| *e).collect::<Vec<_>>()),
        });
    }
    Ok(DiagnoseReport { metadata: Metadata::for_experiment(&base), rows })
}
