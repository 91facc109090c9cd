//! One replication: episode, pilot, whitening, debiasing, intervals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::stats::trial_seed;
use super::HarnessError;
use crate::env::{run_episode, Episode, History};
use crate::estimator::{pilot_sequence, PilotSequence};
use crate::inference::{
    debias, debiased_normalized_errors, pointwise_ci, sup_statistics, sorted_quantile, wald_fit_at,
    wald_normalized_errors, wald_pointwise, DebiasedEstimate, NormalizedErrors, UniformGrid, WaldFit,
};
use crate::whitening::{whiten, WhiteningDiagnostics, WhiteningMatrix};

/// Random stream of the debiased Monte-Carlo draws (the episode uses stream 0).
const DEBIASED_MC_STREAM: u64 = 1;
const WALD_MC_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Debiased,
    Wald,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Debiased, Method::Wald];

    pub fn name(self) -> &'static str {
        match self {
            Method::Debiased => "debiased",
            Method::Wald => "wald",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub covered: bool,
    /// Full width `upper - lower`.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    /// Indexed `query * alphas.len() + alpha`.
    pub pointwise: Vec<Interval>,
    /// One per uniform alpha.
    pub uniform: Vec<Interval>,
    pub errors: NormalizedErrors<f64>,
}

impl MethodOutcome {
    pub fn point(&self, query: usize, alpha: usize, n_alphas: usize) -> Interval {
        self.pointwise[query * n_alphas + alpha]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDiagnostics {
    /// `‖θ̂ᵖ - θ0‖` for the final pilot.
    pub pilot_error: f64,
    /// Pilot errors at the configured checkpoints.
    pub checkpoint_errors: Vec<f64>,
    pub pilot_converged: bool,
    /// Failed refits in the policy and pilot estimators.
    pub fallback_count: usize,
    pub whitening: WhiteningDiagnostics<f64>,
    pub cov_clipped: bool,
    pub wald_condition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    /// `None` when the method failed in this trial.
    pub debiased: Option<MethodOutcome>,
    pub wald: Option<MethodOutcome>,
    pub failures: Vec<String>,
    /// `None` when the trial failed before whitening.
    pub diagnostics: Option<TrialDiagnostics>,
}

impl TrialRecord {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        match method {
            Method::Debiased => self.debiased.as_ref(),
            Method::Wald => self.wald.as_ref(),
        }
    }
}

/// Intermediate products of a trial, for callers that need more than the record.
pub struct TrialArtifacts {
    pub episode: Episode<f64>,
    pub pilots: PilotSequence<f64>,
    pub whitening: WhiteningMatrix<f64>,
    pub estimate: DebiasedEstimate<f64>,
}

/// A validated config with the per-experiment constants precomputed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    queries: Vec<(f64, Vec<f64>)>,
    grid: Option<UniformGrid<f64>>,
    grid_truth: Vec<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let queries = config.queries.iter().map(|q| (q.p, q.x.clone())).collect();
        let (grid, grid_truth) = if config.uniform_alphas.is_empty() {
            (None, Vec::new())
        } else {
            let g = config.grid;
            let grid = UniformGrid::rectangular(
                config.model.price_range,
                g.price_points,
                g.context_range,
                g.context_points,
                config.model.context_dim,
            )?;
            let truth = grid.means(&config.model, &config.model.theta0)?;
            (Some(grid), truth)
        };
        Ok(Self { config, queries, grid, grid_truth })
    }

    pub fn grid(&self) -> Option<&UniformGrid<f64>> {
        self.grid.as_ref()
    }

    pub fn eta(&self) -> f64 {
        self.config.eta()
    }

    pub fn trial_seed(&self, index: usize) -> u64 {
        trial_seed(self.config.base_seed, index)
    }

    /// Episode, pilot sequence, whitening and debiased estimate of one trial.
    pub fn artifacts(&self, index: usize) -> Result<TrialArtifacts, String> {
        let cfg = &self.config;
        let seed = self.trial_seed(index);
        let mut episode = run_episode(&cfg.model, &cfg.policy, cfg.context, cfg.horizon, seed)
            .map_err(|e| format!("episode: {e}"))?;
        let pilots = match episode.policy_trace.take() {
            Some(trace) if trace.options == cfg.pilot => trace.into_pilot_sequence(),
            _ => pilot_sequence(&episode.history, &cfg.model, cfg.pilot).map_err(|e| format!("pilot: {e}"))?,
        };
        let whitening = whiten(&episode.history, &pilots, &cfg.model, self.eta()).map_err(|e| format!("whitening: {e}"))?;
        let estimate = debias(pilots.final_estimate(), &whitening, &episode.history, &cfg.model)
            .map_err(|e| format!("debias: {e}"))?;
        Ok(TrialArtifacts { episode, pilots, whitening, estimate })
    }

    pub fn run_trial(&self, index: usize) -> TrialRecord {
        let seed = self.trial_seed(index);
        let mut record = TrialRecord { index, seed, debiased: None, wald: None, failures: Vec::new(), diagnostics: None };
        let art = match self.artifacts(index) {
            Ok(a) => a,
            Err(e) => {
                record.failures.push(e);
                return record;
            }
        };
        let cfg = &self.config;
        let theta0 = &cfg.model.theta0;
        let history = &art.episode.history;
        let pilot_converged = art.pilots.converged.last().copied().unwrap_or(false);

        match self.debiased_outcome(&art, seed) {
            Ok(o) => record.debiased = Some(o),
            Err(e) => record.failures.push(format!("debiased: {e}")),
        }
        let mut wald_condition = None;
        if pilot_converged {
            match self.wald_outcome(history, art.pilots.final_estimate(), seed) {
                Ok((o, fit)) => {
                    wald_condition = Some(fit.condition);
                    record.wald = Some(o);
                }
                Err(e) => record.failures.push(format!("wald: {e}")),
            }
        } else {
            record.failures.push("wald: maximum likelihood fit did not converge".into());
        }

        let checkpoint_errors =
            cfg.pilot_checkpoints.iter().map(|&t| distance(art.pilots.at(t + 1), theta0)).collect();
        record.diagnostics = Some(TrialDiagnostics {
            pilot_error: distance(art.pilots.final_estimate(), theta0),
            checkpoint_errors,
            pilot_converged,
            fallback_count: art.episode.fallback_count + art.pilots.fallback_count,
            whitening: art.whitening.diagnostics.clone().expect("whiten fills diagnostics"),
            cov_clipped: art.estimate.cov_clipped,
            wald_condition,
        });
        record
    }

    fn debiased_outcome(&self, art: &TrialArtifacts, seed: u64) -> Result<MethodOutcome, HarnessError> {
        let cfg = &self.config;
        let est = &art.estimate;
        let mut pointwise = Vec::with_capacity(self.queries.len() * cfg.alphas.len());
        for (p, x) in &self.queries {
            let truth = crate::demand::mean_demand(&cfg.model, &cfg.model.theta0, *p, x)?;
            for &alpha in &cfg.alphas {
                let band = pointwise_ci(est, *p, x, alpha, &cfg.model)?;
                pointwise.push(point_interval(&band, truth));
            }
        }
        let uniform = match &self.grid {
            Some(grid) => {
                let grads = grid.gradients(&cfg.model, &est.theta_p)?;
                let mut rng = mc_rng(seed, DEBIASED_MC_STREAM);
                let stats = sup_statistics(&grads, &est.cov_hat, cfg.mc_draws, &mut rng)?;
                let sup_err = self.sup_error(grid, &est.theta_d)?;
                self.uniform_intervals(&stats, sup_err)?
            }
            None => Vec::new(),
        };
        let errors = debiased_normalized_errors(est, &art.whitening, &art.episode.history, &cfg.model, &self.queries)?;
        Ok(MethodOutcome { pointwise, uniform, errors })
    }

    fn wald_outcome(
        &self,
        history: &History<f64>,
        mle: &[f64],
        seed: u64,
    ) -> Result<(MethodOutcome, WaldFit<f64>), HarnessError> {
        let cfg = &self.config;
        let fit = wald_fit_at(history, &cfg.model, mle)?;
        let mut pointwise = Vec::with_capacity(self.queries.len() * cfg.alphas.len());
        for (p, x) in &self.queries {
            let truth = crate::demand::mean_demand(&cfg.model, &cfg.model.theta0, *p, x)?;
            for &alpha in &cfg.alphas {
                let band = wald_pointwise(&fit, *p, x, alpha, &cfg.model)?;
                pointwise.push(point_interval(&band, truth));
            }
        }
        let uniform = match &self.grid {
            Some(grid) => {
                let grads = grid.gradients(&cfg.model, &fit.theta)?;
                let mut rng = mc_rng(seed, WALD_MC_STREAM);
                let stats = sup_statistics(&grads, &fit.info_inv, cfg.mc_draws, &mut rng)?;
                let sup_err = self.sup_error(grid, &fit.theta)?;
                self.uniform_intervals(&stats, sup_err)?
            }
            None => Vec::new(),
        };
        let errors = wald_normalized_errors(&fit, &cfg.model, &self.queries)?;
        Ok((MethodOutcome { pointwise, uniform, errors }, fit))
    }

    /// `max |f(p, x; θ) - f(p, x; θ0)|` over the grid.
    fn sup_error(&self, grid: &UniformGrid<f64>, theta: &[f64]) -> Result<f64, HarnessError> {
        let means = grid.means(&self.config.model, theta)?;
        Ok(means.iter().zip(&self.grid_truth).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    fn uniform_intervals(&self, sorted_stats: &[f64], sup_err: f64) -> Result<Vec<Interval>, HarnessError> {
        self.config
            .uniform_alphas
            .iter()
            .map(|&alpha| {
                let s = sorted_quantile(sorted_stats, 1.0 - alpha)?;
                Ok(Interval { covered: sup_err <= s, width: 2.0 * s })
            })
            .collect()
    }

    /// Runs every trial on a pool of `config.workers` threads (all cores when
    /// zero). Records come back in trial order.
    pub fn run_trials(&self) -> Result<Vec<TrialRecord>, HarnessError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?;
        Ok(pool.install(|| (0..self.config.n_trials).into_par_iter().map(|i| self.run_trial(i)).collect()))
    }
}

fn point_interval(band: &crate::inference::ConfidenceBand<f64>, truth: f64) -> Interval {
    let q = band.query.as_ref().expect("point-wise band carries its query");
    Interval { covered: q.lower <= truth && truth <= q.upper, width: q.upper - q.lower }
}

fn mc_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs a single trial of `config`.
pub fn run_trial(config: &ExperimentConfig, index: usize) -> Result<TrialRecord, HarnessError> {
    Ok(Experiment::new(config.clone())?.run_trial(index))
}
