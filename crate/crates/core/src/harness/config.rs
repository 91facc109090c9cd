//! Experiment configuration: built-in presets and TOML files.
//!
//! Every field has a default (the `paper_logistic` preset), so a TOML file only
//! lists what it overrides:
//!
//! ```toml
//! name = "ucb-short"
//! horizon = 500
//! n_trials = 50
//! base_seed = 11
//!
//! [policy]
//! kind = "ucb"
//! ucb_scale = 1.0
//!
//! [context]
//! kind = "iid_uniform"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{standard_logistic_spec, DemandFamily, FeatureMap, ModelSpec};
use crate::env::{ContextConfig, ContextKind, Policy};
use crate::estimator::FitOptions;
use crate::inference::{MIN_MC_DRAWS, DEFAULT_MC_DRAWS};
use crate::whitening::DEFAULT_UPSILON;

pub const PRESETS: &[&str] = &["paper_logistic", "logistic_ucb", "logistic_full", "linear_demo"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config '{0}' is neither a readable file nor a preset ({presets})", presets = PRESETS.join(", "))]
    NotFound(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A query point `(p, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub p: f64,
    pub x: Vec<f64>,
}

impl QueryPoint {
    pub fn new(p: f64, x: f64) -> Self {
        Self { p, x: vec![x] }
    }

    pub fn label(&self) -> String {
        let xs: Vec<String> = self.x.iter().map(|v| format!("{v}")).collect();
        format!("({}, {})", self.p, xs.join(", "))
    }
}

/// Rectangular grid for the uniform bands. The context range is applied to
/// every context coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub price_points: usize,
    pub context_points: usize,
    pub context_range: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { price_points: 51, context_points: 101, context_range: (-1.0, 1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec<f64>,
    pub policy: Policy,
    pub context: ContextConfig,
    pub horizon: usize,
    pub n_trials: usize,
    /// Point-wise levels are `1 - alpha`.
    pub alphas: Vec<f64>,
    /// Levels for the uniform bands; empty disables them.
    pub uniform_alphas: Vec<f64>,
    pub queries: Vec<QueryPoint>,
    pub grid: GridSpec,
    pub mc_draws: usize,
    /// Clipping radius is `η = T^(-upsilon)`.
    pub upsilon: f64,
    pub base_seed: u64,
    /// Zero uses every available core. Never affects results.
    pub workers: usize,
    /// Pilot estimator settings.
    pub pilot: FitOptions,
    /// Periods `t` at which the pilot error `‖θ̂ - θ0‖` (fit on the first `t`
    /// periods) is recorded.
    pub pilot_checkpoints: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::paper_logistic()
    }
}

impl ExperimentConfig {
    /// Desk-scale logistic experiment with ε-greedy pricing.
    pub fn paper_logistic() -> Self {
        Self {
            name: "paper_logistic".into(),
            model: standard_logistic_spec(),
            policy: Policy::epsilon_greedy(crate::env::DEFAULT_EPSILON),
            context: ContextConfig::default(),
            horizon: 2000,
            n_trials: 1000,
            alphas: vec![0.3, 0.2, 0.1, 0.05],
            uniform_alphas: vec![0.2, 0.1],
            queries: vec![QueryPoint::new(0.5, 0.0), QueryPoint::new(0.5, 1.0), QueryPoint::new(1.0, 1.0)],
            grid: GridSpec::default(),
            mc_draws: DEFAULT_MC_DRAWS,
            upsilon: DEFAULT_UPSILON,
            base_seed: 20_240_601,
            workers: 0,
            pilot: FitOptions::default(),
            pilot_checkpoints: Vec::new(),
        }
    }

    /// Desk-scale logistic experiment with UCB pricing.
    pub fn logistic_ucb() -> Self {
        Self { name: "logistic_ucb".into(), policy: Policy::ucb(crate::env::DEFAULT_UCB_SCALE), ..Self::paper_logistic() }
    }

    /// Full-scale run: `T = 10000`, 5000 trials, UCB pricing. Takes hours.
    pub fn logistic_full() -> Self {
        Self { name: "logistic_full".into(), horizon: 10_000, n_trials: 5000, ..Self::logistic_ucb() }
    }

    /// Small linear-demand run with i.i.d. contexts.
    pub fn linear_demo() -> Self {
        let model = ModelSpec::new(
            DemandFamily::Linear { noise_std: 0.1, truncate_noise: false },
            FeatureMap::AffinePriceContext { a: 1.0, b: -0.5, context_dim: 1 },
            vec![1.0, 0.3],
            (0.0, 1.0),
        )
        .expect("valid built-in spec");
        Self {
            name: "linear_demo".into(),
            model,
            context: ContextConfig { kind: ContextKind::IidUniform, clip_bound: 1.0 },
            horizon: 500,
            n_trials: 200,
            ..Self::paper_logistic()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper_logistic" => Some(Self::paper_logistic()),
            "logistic_ucb" => Some(Self::logistic_ucb()),
            "logistic_full" => Some(Self::logistic_full()),
            "linear_demo" => Some(Self::linear_demo()),
            _ => None,
        }
    }

    /// Loads `source` as a TOML file if it exists, otherwise as a preset name.
    pub fn resolve(source: &str) -> Result<Self, ConfigError> {
        let path = Path::new(source);
        if path.is_file() {
            return Self::load(path);
        }
        Self::preset(source).ok_or_else(|| ConfigError::NotFound(source.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse { path: path.display().to_string(), source },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: "<string>".into(), source: Box::new(e) })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        if self.horizon < 2 {
            return bad(format!("horizon must be at least 2, got {}", self.horizon));
        }
        if !(self.upsilon > 0.5 && self.upsilon < 1.0) {
            return bad(format!("upsilon must lie in (0.5, 1), got {}", self.upsilon));
        }
        if self.alphas.is_empty() {
            return bad("alphas must not be empty".into());
        }
        for &a in self.alphas.iter().chain(&self.uniform_alphas) {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("alpha must lie in (0, 1), got {a}"));
            }
        }
        if self.queries.is_empty() {
            return bad("at least one query point is required".into());
        }
        let (lo, hi) = self.model.price_range;
        for q in &self.queries {
            if q.x.len() != self.model.context_dim {
                return bad(format!("query {} has {} context entries, model has {}", q.label(), q.x.len(), self.model.context_dim));
            }
            if !(q.p >= lo && q.p <= hi) || q.x.iter().any(|v| !v.is_finite()) {
                return bad(format!("query {} lies outside the price range or is non-finite", q.label()));
            }
        }
        if !self.uniform_alphas.is_empty() {
            if self.mc_draws < MIN_MC_DRAWS {
                return bad(format!("mc_draws must be at least {MIN_MC_DRAWS}, got {}", self.mc_draws));
            }
            let g = self.grid;
            if g.price_points == 0 || g.context_points == 0 {
                return bad("uniform grid needs at least one point per axis".into());
            }
            if !(g.context_range.0 <= g.context_range.1) {
                return bad("grid context range is empty".into());
            }
        }
        if let Some(&t) = self.pilot_checkpoints.iter().find(|&&t| t == 0 || t > self.horizon) {
            return bad(format!("pilot checkpoint {t} is outside 1..={}", self.horizon));
        }
        if !(self.pilot.lambda >= 0.0) || !(self.pilot.tol > 0.0) || self.pilot.max_iter == 0 {
            return bad("pilot options need lambda >= 0, tol > 0 and max_iter >= 1".into());
        }
        Ok(())
    }

    /// Config with the worker count cleared, for report metadata.
    pub fn for_metadata(&self) -> Self {
        Self { workers: 0, ..self.clone() }
    }

    pub fn eta(&self) -> f64 {
        crate::whitening::default_eta(self.horizon, self.upsilon)
    }
}
