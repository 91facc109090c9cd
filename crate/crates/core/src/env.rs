//! Simulated contextual pricing episodes: context processes, pricing policies
//! and the period loop that produces a [`History`].

use std::io::{self, BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{self, DemandError, ModelSpec};
use crate::estimator::{FitOptions, Observations, PilotSequence, SequentialFitter};
use crate::linalg::{inverse_spd, LinalgError, Matrix, SymmetricPD};
use crate::scalar::Scalar;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_PRICE_GRID: usize = 201;
pub const DEFAULT_UCB_SCALE: f64 = 1.0;
pub const DEFAULT_UCB_LAMBDA: f64 = 1.0;

const BINARY_MAGIC: &[u8; 4] = b"DCIH";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("malformed history data: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Observed prices, contexts and demands over `T` periods. Contexts are stored
/// flat, `context_dim` values per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History<S> {
    pub context_dim: usize,
    pub prices: Vec<S>,
    pub contexts: Vec<S>,
    pub demands: Vec<S>,
}

impl<S: Scalar> History<S> {
    pub fn new(context_dim: usize) -> Self {
        Self { context_dim, prices: Vec::new(), contexts: Vec::new(), demands: Vec::new() }
    }

    pub fn push(&mut self, p: S, x: &[S], d: S) {
        assert_eq!(x.len(), self.context_dim, "context dimension");
        self.prices.push(p);
        self.contexts.extend_from_slice(x);
        self.demands.push(d);
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Context of 0-based period `t`.
    pub fn context(&self, t: usize) -> &[S] {
        &self.contexts[t * self.context_dim..(t + 1) * self.context_dim]
    }

    /// The first `n` periods.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            context_dim: self.context_dim,
            prices: self.prices[..n].to_vec(),
            contexts: self.contexts[..n * self.context_dim].to_vec(),
            demands: self.demands[..n].to_vec(),
        }
    }

    /// Checks lengths, price range and (for logistic models) binary demands.
    pub fn validate(&self, spec: &ModelSpec<S>) -> Result<()> {
        let n = self.prices.len();
        if self.demands.len() != n || self.contexts.len() != n * self.context_dim {
            return Err(EnvError::InvalidHistory("sequence lengths disagree".into()));
        }
        if self.context_dim != spec.context_dim {
            return Err(EnvError::InvalidHistory(format!(
                "history context dimension {} vs model {}",
                self.context_dim, spec.context_dim
            )));
        }
        let (lo, hi) = spec.price_range;
        if let Some(p) = self.prices.iter().find(|&&p| !(p >= lo && p <= hi)) {
            return Err(EnvError::InvalidHistory(format!("price {p} outside [{lo}, {hi}]")));
        }
        if spec.family.is_logistic() {
            if let Some(d) = self.demands.iter().find(|&&d| d != S::zero() && d != S::one()) {
                return Err(EnvError::InvalidHistory(format!("logistic demand {d} is not 0/1")));
            }
        }
        Ok(())
    }

    /// CSV with header `t,p,x1..xk,d`; `t` is 1-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let xs: Vec<String> = (1..=self.context_dim).map(|k| format!("x{k}")).collect();
        writeln!(w, "t,p,{},d", xs.join(","))?;
        for t in 0..self.len() {
            let ctx: Vec<String> = self.context(t).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{},{},{}", t + 1, self.prices[t], ctx.join(","), self.demands[t])?;
        }
        Ok(())
    }

    /// Reads the format written by [`History::write_csv`]. Lines starting with
    /// `#` are skipped.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |s| !s.starts_with('#')));
        let header = lines.next().ok_or_else(|| EnvError::Parse("missing header".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[0] != "t" || cols[1] != "p" || cols[cols.len() - 1] != "d" {
            return Err(EnvError::Parse(format!("unexpected header '{header}'")));
        }
        let k = cols.len() - 3;
        let mut h = Self::new(k);
        let mut x = vec![S::zero(); k];
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(EnvError::Parse(format!("line {}: expected {} fields", lineno + 2, cols.len())));
            }
            let num = |s: &str| -> Result<S> {
                let v: f64 = s.parse().map_err(|_| EnvError::Parse(format!("line {}: bad number '{s}'", lineno + 2)))?;
                Ok(S::lit(v))
            };
            for (j, xv) in x.iter_mut().enumerate() {
                *xv = num(fields[2 + j])?;
            }
            h.push(num(fields[1])?, &x, num(fields[fields.len() - 1])?);
        }
        Ok(h)
    }

    /// Compact little-endian binary form: magic, version, context_dim, length,
    /// then `(p, x_1..x_k, d)` per period as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(self.context_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for t in 0..self.len() {
            w.write_all(&self.prices[t].f64().to_le_bytes())?;
            for v in self.context(t) {
                w.write_all(&v.f64().to_le_bytes())?;
            }
            w.write_all(&self.demands[t].f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(EnvError::Parse("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != BINARY_VERSION {
            return Err(EnvError::Parse(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4)?;
        let k = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut h = Self::new(k);
        let read_f = |r: &mut R| -> Result<S> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(S::lit(f64::from_le_bytes(b)))
        };
        let mut x = vec![S::zero(); k];
        for _ in 0..n {
            let p = read_f(&mut r)?;
            for xv in x.iter_mut() {
                *xv = read_f(&mut r)?;
            }
            let d = read_f(&mut r)?;
            h.push(p, &x, d);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    /// `z_{t+1} = z_t + d_t - f(p_t, x_t; θ0)`, `x = z / max(1, |z| / clip)`, `z_1 = 0`.
    #[default]
    DemandDrivenWalk,
    /// Independent uniform draws on `[-clip, clip]^k`.
    IidUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    #[serde(default)]
    pub kind: ContextKind,
    #[serde(default = "default_clip")]
    pub clip_bound: f64,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { kind: ContextKind::DemandDrivenWalk, clip_bound: 1.0 }
    }
}

/// Running state of a context-generation process.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextProcess<S> {
    pub kind: ContextKind,
    pub clip_bound: S,
    pub z: Vec<S>,
}

impl<S: Scalar> ContextProcess<S> {
    pub fn new(config: ContextConfig, dim: usize) -> Self {
        Self { kind: config.kind, clip_bound: S::lit(config.clip_bound), z: vec![S::zero(); dim] }
    }

    fn clipped(&self) -> Vec<S> {
        self.z.iter().map(|&z| z / S::one().max(z.abs() / self.clip_bound)).collect()
    }

    fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        self.z
            .iter()
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                S::lit(u) * self.clip_bound
            })
            .collect()
    }

    /// Context of the first period.
    pub fn initial<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<S> {
        match self.kind {
            ContextKind::DemandDrivenWalk => self.clipped(),
            ContextKind::IidUniform => self.uniform(rng),
        }
    }

    /// Advances the process after a period with price `p`, realized demand
    /// `d` and true mean demand `f_true`, returning the next context.
    pub fn next_context<R: Rng + ?Sized>(&mut self, _p: S, d: S, f_true: S, rng: &mut R) -> Vec<S> {
        match self.kind {
            ContextKind::DemandDrivenWalk => {
                let shock = d - f_true;
                for z in self.z.iter_mut() {
                    *z = *z + shock;
                }
                self.clipped()
            }
            ContextKind::IidUniform => self.uniform(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    EpsilonGreedy,
    Ucb,
    FixedRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Multiplier `c` of the elliptical exploration bonus.
    #[serde(default = "default_ucb_scale")]
    pub ucb_scale: f64,
    /// Ridge `λ` of the UCB design matrix `V_t = λ I + Σ φ φ^T`.
    #[serde(default = "default_ucb_lambda")]
    pub ucb_lambda: f64,
    #[serde(default = "default_price_grid")]
    pub price_grid_size: usize,
    /// Use the optimism cap `max{1, f + CI}` exactly as written instead of
    /// `min{1, f + CI}`. Degenerates to always pricing at the upper bound.
    #[serde(default)]
    pub literal_max: bool,
    /// Estimator settings for the policy's running estimate.
    #[serde(default)]
    pub erm: FitOptions,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_ucb_scale() -> f64 {
    DEFAULT_UCB_SCALE
}
fn default_ucb_lambda() -> f64 {
    DEFAULT_UCB_LAMBDA
}
fn default_price_grid() -> usize {
    DEFAULT_PRICE_GRID
}

impl Policy {
    pub fn epsilon_greedy(epsilon: f64) -> Self {
        Self {
            kind: PolicyKind::EpsilonGreedy,
            epsilon,
            ucb_scale: DEFAULT_UCB_SCALE,
            ucb_lambda: DEFAULT_UCB_LAMBDA,
            price_grid_size: DEFAULT_PRICE_GRID,
            literal_max: false,
            erm: FitOptions::default(),
        }
    }

    pub fn ucb(scale: f64) -> Self {
        Self { kind: PolicyKind::Ucb, ucb_scale: scale, ..Self::epsilon_greedy(DEFAULT_EPSILON) }
    }

    pub fn fixed_random() -> Self {
        Self { kind: PolicyKind::FixedRandom, ..Self::epsilon_greedy(DEFAULT_EPSILON) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PolicyKind::EpsilonGreedy && !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(EnvError::InvalidPolicy(format!("epsilon must be in [0, 1], got {}", self.epsilon)));
        }
        if self.price_grid_size < 2 {
            return Err(EnvError::InvalidPolicy("price grid needs at least 2 points".into()));
        }
        if self.kind == PolicyKind::Ucb && !(self.ucb_lambda > 0.0) {
            return Err(EnvError::InvalidPolicy("UCB ridge must be positive".into()));
        }
        if !(self.ucb_scale >= 0.0) {
            return Err(EnvError::InvalidPolicy("UCB scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// `n` equally spaced prices covering the model's price range.
pub fn price_grid<S: Scalar>(spec: &ModelSpec<S>, n: usize) -> Vec<S> {
    let (lo, hi) = spec.price_range;
    let denom = S::from_usize_lossy(n.max(2) - 1);
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * S::from_usize_lossy(i) / denom }).collect()
}

fn uniform_price<S: Scalar, R: Rng + ?Sized>(spec: &ModelSpec<S>, rng: &mut R) -> S {
    let (lo, hi) = spec.price_range;
    let u: f64 = rng.random();
    (lo + (hi - lo) * S::lit(u)).min(hi)
}

/// Grid price maximizing `p * objective(p)`; ties go to the smaller price.
fn argmax_on_grid<S: Scalar>(grid: &[S], mut objective: impl FnMut(S) -> Result<S>) -> Result<S> {
    let mut best_p = grid[0];
    let mut best = S::neg_infinity();
    for &p in grid {
        let v = p * objective(p)?;
        if v > best {
            best = v;
            best_p = p;
        }
    }
    Ok(best_p)
}

/// Revenue-maximizing grid price under the estimate `theta_hat`.
pub fn greedy_price<S: Scalar>(theta_hat: &[S], x: &[S], spec: &ModelSpec<S>, grid: &[S]) -> Result<S> {
    argmax_on_grid(grid, |p| Ok(demand::mean_demand(spec, theta_hat, p, x)?))
}

/// ε-greedy: with probability ε a uniform price on the range, otherwise the
/// greedy grid price.
pub fn epsilon_greedy_price<S: Scalar, R: Rng + ?Sized>(
    theta_hat: &[S],
    x: &[S],
    spec: &ModelSpec<S>,
    epsilon: f64,
    grid: &[S],
    rng: &mut R,
) -> Result<S> {
    let u: f64 = rng.random();
    if u < epsilon {
        Ok(uniform_price(spec, rng))
    } else {
        greedy_price(theta_hat, x, spec, grid)
    }
}

/// Optimistic price in (1-based) period `t`.
///
/// Maximizes `p * cap(f(p, x; θ̂) + c sqrt(ln(1 + t)) ||φ(p, x)||_{V^{-1}})`
/// where `cap` is `min{1, .}` for logistic demand (or `max{1, .}` when
/// `literal_max` is set) and the identity for linear demand.
#[allow(clippy::too_many_arguments)]
pub fn ucb_price<S: Scalar>(
    t: usize,
    theta_hat: &[S],
    design: &SymmetricPD<S>,
    x: &[S],
    spec: &ModelSpec<S>,
    c: f64,
    grid: &[S],
    literal_max: bool,
) -> Result<S> {
    let v_inv = inverse_spd(design)?;
    let radius = S::lit(c) * S::from_usize_lossy(t).ln_1p().sqrt();
    let logistic = spec.family.is_logistic();
    argmax_on_grid(grid, |p| {
        let phi = spec.feature(p, x)?;
        let f = demand::mean_demand(spec, theta_hat, p, x)?;
        let width = v_inv.matrix().quad_form(&phi)?.max(S::zero()).sqrt();
        let upper = f + radius * width;
        Ok(match (logistic, literal_max) {
            (false, _) => upper,
            (true, false) => upper.min(S::one()),
            (true, true) => upper.max(S::one()),
        })
    })
}

/// Output of [`run_episode`].
#[derive(Debug, Clone)]
pub struct Episode<S> {
    pub history: History<S>,
    /// Estimates used by the policy in each period (fitted on earlier periods),
    /// with the fitter state at the end of the episode. `None` for policies
    /// that never estimate.
    pub policy_trace: Option<PolicyTrace<S>>,
    pub fallback_count: usize,
}

#[derive(Debug, Clone)]
pub struct PolicyTrace<S> {
    pub options: FitOptions,
    pub estimates: Vec<Vec<S>>,
    pub grad_norms: Vec<S>,
    pub converged: Vec<bool>,
    fitter: SequentialFitter<S>,
}

impl<S: Scalar> PolicyTrace<S> {
    /// Completes the trace into the pilot sequence for this history: the
    /// per-period estimates plus the final unregularized fit on all periods.
    ///
    /// Identical, bit for bit, to [`crate::estimator::pilot_sequence`] with the
    /// same options.
    pub fn into_pilot_sequence(self) -> PilotSequence<S> {
        let Self { mut estimates, mut grad_norms, mut converged, mut fitter, .. } = self;
        let out = fitter.refit(S::zero());
        estimates.push(fitter.estimate().to_vec());
        grad_norms.push(out.grad_norm);
        converged.push(out.converged);
        PilotSequence { estimates, grad_norms, converged, fallback_count: fitter.fallback_count }
    }
}

/// Simulates `horizon` periods under `policy`, seeded by `seed`.
pub fn run_episode<S: Scalar>(
    spec: &ModelSpec<S>,
    policy: &Policy,
    context: ContextConfig,
    horizon: usize,
    seed: u64,
) -> Result<Episode<S>> {
    spec.validate()?;
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim();
    let grid = price_grid(spec, policy.price_grid_size);
    let mut process = ContextProcess::<S>::new(context, spec.context_dim);
    let mut history = History::new(spec.context_dim);
    history.prices.reserve(horizon);
    history.demands.reserve(horizon);

    let estimating = policy.kind != PolicyKind::FixedRandom;
    let mut fitter = SequentialFitter::new(spec, policy.erm);
    let mut trace_est = Vec::with_capacity(if estimating { horizon } else { 0 });
    let mut trace_grad = Vec::new();
    let mut trace_conv = Vec::new();
    let lambda = S::lit(policy.erm.lambda);
    let mut design = Matrix::identity(d).scale(S::lit(policy.ucb_lambda));
    let mut phi = vec![S::zero(); d];

    let mut x = process.initial(&mut rng);
    for t in 1..=horizon {
        if estimating {
            if t >= 2 && policy.erm.schedule.refit_at(t) {
                let out = fitter.refit(lambda);
                trace_grad.push(out.grad_norm);
                trace_conv.push(out.converged);
            } else {
                trace_grad.push(if t == 1 { S::zero() } else { S::nan() });
                trace_conv.push(true);
            }
            trace_est.push(fitter.estimate().to_vec());
        }
        let p = match policy.kind {
            PolicyKind::EpsilonGreedy => {
                epsilon_greedy_price(fitter.estimate(), &x, spec, policy.epsilon, &grid, &mut rng)?
            }
            PolicyKind::Ucb => ucb_price(
                t,
                fitter.estimate(),
                &SymmetricPD::symmetrized(design.clone()),
                &x,
                spec,
                policy.ucb_scale,
                &grid,
                policy.literal_max,
            )?,
            PolicyKind::FixedRandom => uniform_price(spec, &mut rng),
        };
        spec.feature_map.feature_into(p, &x, &mut phi)?;
        let f_true = spec.family.mean_from_index(crate::scalar::dot(&phi, &spec.theta0));
        let demand = demand::sample_from_mean(&spec.family, f_true, &mut rng);
        history.push(p, &x, demand);
        if estimating {
            fitter.push(&phi, demand);
            design.add_scaled_outer(S::one(), &phi);
        }
        x = process.next_context(p, demand, f_true, &mut rng);
    }
    let fallback_count = fitter.fallback_count;
    let policy_trace = estimating.then(|| PolicyTrace {
        options: policy.erm,
        estimates: trace_est,
        grad_norms: trace_grad,
        converged: trace_conv,
        fitter,
    });
    Ok(Episode { history, policy_trace, fallback_count })
}

/// Feature second-moment matrix `(1/T) Σ φ_t φ_t^T` of a history.
pub fn feature_second_moment<S: Scalar>(history: &History<S>, spec: &ModelSpec<S>) -> Result<SymmetricPD<S>> {
    let obs = Observations::from_history(history, spec).map_err(|e| EnvError::InvalidHistory(e.to_string()))?;
    let d = spec.dim();
    let mut m = Matrix::zeros(d, d);
    for i in 0..obs.len() {
        m.add_scaled_outer(S::one(), obs.phi(i));
    }
    let n = S::from_usize_lossy(obs.len().max(1));
    Ok(SymmetricPD::symmetrized(m.scale(S::one() / n)))
}
