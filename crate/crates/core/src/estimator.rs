//! Empirical-risk minimization and the sequential pilot estimates.
//!
//! Least squares is solved through the (ridge) normal equations; the logistic
//! negative log-likelihood by damped Newton iteration. `pilot_sequence`
//! produces the estimate fitted on data strictly before each period, which is
//! what keeps the whitening columns non-anticipating.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{DemandError, DemandFamily, ModelSpec};
use crate::env::History;
use crate::linalg::{cholesky, cholesky_solve, LinalgError, Matrix, SymmetricPD};
use crate::scalar::{dot, norm2, Scalar};

/// Ridge used for every pilot fit except the final one.
pub const DEFAULT_PILOT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_NEWTON_TOL: f64 = 1e-8;
pub const DEFAULT_NEWTON_MAX_ITER: usize = 50;
pub const MAX_STEP_HALVINGS: usize = 30;
/// Predicted decreases below this many ulps of the objective skip the line search.
const ROUNDOFF_FACTOR: f64 = 1e4;
/// Radius of the parameter ball used only once Newton iterates diverge.
pub const THETA_BALL_RADIUS: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error("normal equations are rank deficient (pivot {pivot})")]
    RankDeficient { pivot: usize },
    #[error(transparent)]
    Linalg(LinalgError),
    #[error("argument out of domain: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Cached features and demands, one row per period.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations<S> {
    dim: usize,
    features: Vec<S>,
    demands: Vec<S>,
}

/// Borrowed prefix of [`Observations`].
#[derive(Debug, Clone, Copy)]
pub struct ObsView<'a, S> {
    pub dim: usize,
    pub features: &'a [S],
    pub demands: &'a [S],
}

impl<S: Scalar> Observations<S> {
    pub fn new(dim: usize) -> Self {
        Self { dim, features: Vec::new(), demands: Vec::new() }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self { dim, features: Vec::with_capacity(n * dim), demands: Vec::with_capacity(n) }
    }

    pub fn from_history(history: &History<S>, spec: &ModelSpec<S>) -> Result<Self> {
        let d = spec.dim();
        let mut obs = Self::with_capacity(d, history.len());
        let mut phi = vec![S::zero(); d];
        for t in 0..history.len() {
            spec.feature_map.feature_into(history.prices[t], history.context(t), &mut phi)?;
            obs.push(&phi, history.demands[t]);
        }
        Ok(obs)
    }

    pub fn push(&mut self, phi: &[S], d: S) {
        assert_eq!(phi.len(), self.dim);
        self.features.extend_from_slice(phi);
        self.demands.push(d);
    }

    pub fn len(&self) -> usize {
        self.demands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demands.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi(&self, i: usize) -> &[S] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn demand(&self, i: usize) -> S {
        self.demands[i]
    }

    pub fn view(&self) -> ObsView<'_, S> {
        self.prefix(self.len())
    }

    /// The first `n` observations.
    pub fn prefix(&self, n: usize) -> ObsView<'_, S> {
        ObsView { dim: self.dim, features: &self.features[..n * self.dim], demands: &self.demands[..n] }
    }
}

impl<'a, S: Scalar> ObsView<'a, S> {
    pub fn len(&self) -> usize {
        self.demands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demands.is_empty()
    }

    pub fn phi(&self, i: usize) -> &'a [S] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Ridge least squares: minimizes `Σ (d_t - <φ_t, θ>)^2 + λ ||θ||^2`.
pub fn fit_least_squares<S: Scalar>(obs: ObsView<'_, S>, lambda: S) -> Result<Vec<S>> {
    if lambda < S::zero() {
        return Err(EstimatorError::Domain(format!("ridge parameter must be >= 0, got {lambda}")));
    }
    let d = obs.dim;
    let mut gram = Matrix::zeros(d, d);
    let mut rhs = vec![S::zero(); d];
    for i in 0..obs.len() {
        let phi = obs.phi(i);
        gram.add_scaled_outer(S::one(), phi);
        for (r, &v) in rhs.iter_mut().zip(phi) {
            *r = *r + v * obs.demands[i];
        }
    }
    solve_normal_equations(gram, rhs, lambda)
}

fn solve_normal_equations<S: Scalar>(mut gram: Matrix<S>, rhs: Vec<S>, lambda: S) -> Result<Vec<S>> {
    let d = gram.rows();
    for k in 0..d {
        gram[(k, k)] = gram[(k, k)] + lambda;
    }
    let scale = (0..d).fold(S::one(), |m, k| m.max(gram[(k, k)].abs()));
    // Relative pivot check so a never-excited coordinate is reported rather
    // than solved with a rounding-level pivot.
    let scaled = SymmetricPD::symmetrized(gram.scale(S::one() / scale));
    let l = match cholesky(&scaled) {
        Ok(l) => l,
        Err(LinalgError::NotPositiveDefinite { index, .. }) => {
            return Err(EstimatorError::RankDeficient { pivot: index })
        }
        Err(e) => return Err(EstimatorError::Linalg(e)),
    };
    let scaled_rhs: Vec<S> = rhs.iter().map(|&v| v / scale).collect();
    cholesky_solve(&l, &scaled_rhs).map_err(EstimatorError::Linalg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit<S> {
    pub theta: Vec<S>,
    /// Euclidean norm of the objective gradient at `theta`.
    pub grad_norm: S,
    pub iterations: usize,
    pub converged: bool,
    /// Iterates left the parameter ball and were projected back onto it.
    pub projected: bool,
}

/// Data part (without ridge) of the logistic objective and its derivatives
/// at one parameter value.
#[derive(Debug, Clone)]
struct Local<S> {
    value: S,
    grad: Vec<S>,
    hess: Matrix<S>,
}

/// Loss, slope and curvature of one logistic observation at index `eta`,
/// sharing a single exponential.
#[inline]
fn logistic_term<S: Scalar>(eta: S, y: S) -> (S, S, S) {
    let e = (-eta.abs()).exp();
    let inv = S::one() / (S::one() + e);
    let mean = if eta >= S::zero() { inv } else { e * inv };
    let softplus = eta.max(S::zero()) + e.ln_1p();
    (softplus - y * eta, mean - y, e * inv * inv)
}

impl<S: Scalar> Local<S> {
    fn zeros(d: usize) -> Self {
        Self { value: S::zero(), grad: vec![S::zero(); d], hess: Matrix::zeros(d, d) }
    }

    fn at(obs: ObsView<'_, S>, theta: &[S]) -> Self {
        let mut local = Self::zeros(obs.dim);
        for i in 0..obs.len() {
            local.add(obs.phi(i), obs.demands[i], theta);
        }
        local
    }

    #[inline]
    fn add(&mut self, phi: &[S], y: S, theta: &[S]) {
        let (value, slope, curv) = logistic_term(dot(phi, theta), y);
        self.value = self.value + value;
        for (g, &v) in self.grad.iter_mut().zip(phi) {
            *g = *g + slope * v;
        }
        self.hess.add_scaled_outer(curv, phi);
    }

    fn with_ridge(&self, lambda: S, theta: &[S]) -> Self {
        let two_l = S::lit(2.0) * lambda;
        let mut hess = self.hess.clone();
        for k in 0..theta.len() {
            hess[(k, k)] = hess[(k, k)] + two_l;
        }
        Self {
            value: self.value + lambda * dot(theta, theta),
            grad: self.grad.iter().zip(theta).map(|(&g, &v)| g + two_l * v).collect(),
            hess,
        }
    }
}

fn newton_direction<S: Scalar>(hess: &Matrix<S>, grad: &[S]) -> Option<Vec<S>> {
    let d = hess.rows();
    let scale = (0..d).fold(S::zero(), |m, k| m.max(hess[(k, k)]));
    if !(scale > S::zero()) {
        return None;
    }
    // Escalating jitter for (near-)singular curvature, e.g. saturated fits
    // without ridge.
    let mut jitter = S::zero();
    for _ in 0..8 {
        let mut h = hess.scale(S::one() / scale);
        for k in 0..d {
            h[(k, k)] = h[(k, k)] + jitter;
        }
        if let Ok(l) = cholesky(&SymmetricPD::symmetrized(h)) {
            let g: Vec<S> = grad.iter().map(|&v| v / scale).collect();
            return cholesky_solve(&l, &g).ok();
        }
        jitter = if jitter == S::zero() { S::lit(1e-10) } else { jitter * S::lit(100.0) };
    }
    None
}

/// Damped Newton for the (ridge) logistic negative log-likelihood.
///
/// Steps are halved up to [`MAX_STEP_HALVINGS`] times while the objective
/// increases. If `max_iter` is exhausted the last accepted iterate is returned
/// with `converged = false`.
pub fn fit_logistic_newton<S: Scalar>(
    obs: ObsView<'_, S>,
    lambda: S,
    warm_start: &[S],
    tol: S,
    max_iter: usize,
) -> Result<LogisticFit<S>> {
    if warm_start.len() != obs.dim {
        return Err(EstimatorError::Domain(format!(
            "warm start has length {}, expected {}",
            warm_start.len(),
            obs.dim
        )));
    }
    if lambda < S::zero() {
        return Err(EstimatorError::Domain(format!("ridge parameter must be >= 0, got {lambda}")));
    }
    check_binary(obs.demands)?;
    let data = Local::at(obs, warm_start);
    Ok(newton(obs, lambda, warm_start.to_vec(), data, tol, max_iter).0)
}

fn check_binary<S: Scalar>(demands: &[S]) -> Result<()> {
    match demands.iter().find(|&&y| y != S::zero() && y != S::one()) {
        Some(bad) => Err(DemandError::Domain(format!("logistic demand must be 0 or 1, got {bad}")).into()),
        None => Ok(()),
    }
}

/// Newton iteration from `theta` whose data part is `data`. Returns the fit
/// together with the data part at the returned parameter.
fn newton<S: Scalar>(
    obs: ObsView<'_, S>,
    lambda: S,
    mut theta: Vec<S>,
    mut data: Local<S>,
    tol: S,
    max_iter: usize,
) -> (LogisticFit<S>, Local<S>) {
    let radius = S::lit(THETA_BALL_RADIUS);
    let slack = S::lit(8.0) * S::epsilon();
    let mut iterations = 0;
    loop {
        let local = data.with_ridge(lambda, &theta);
        let grad_norm = norm2(&local.grad);
        let direction = newton_direction(&local.hess, &local.grad);
        // A small gradient alone is not enough: on separable data the gradient
        // vanishes while the Newton steps keep pushing the iterate outwards.
        let settled = direction
            .as_ref()
            .is_some_and(|s| norm2(s) <= tol.sqrt() * (S::one() + norm2(&theta)));
        let stop = move |theta, converged| LogisticFit { theta, grad_norm, iterations, converged, projected: false };
        if grad_norm < tol && settled {
            return (stop(theta, true), data);
        }
        if iterations >= max_iter {
            return (stop(theta, false), data);
        }
        iterations += 1;
        let Some(step) = direction else {
            return (stop(theta, false), data);
        };
        // Inside the quadratic region the predicted decrease is below the
        // rounding error of the objective and comparing values is noise.
        let decrement = dot(&local.grad, &step);
        let noise_floor = S::lit(ROUNDOFF_FACTOR) * S::epsilon() * local.value.abs().max(S::one());
        let trust_full_step = decrement >= S::zero() && decrement <= noise_floor;
        let threshold = local.value + slack * local.value.abs().max(S::one());
        let mut t = S::one();
        let mut accepted = None;
        for _ in 0..=MAX_STEP_HALVINGS {
            let cand: Vec<S> = theta.iter().zip(&step).map(|(&a, &s)| a - t * s).collect();
            let cand_data = Local::at(obs, &cand);
            if trust_full_step || cand_data.value + lambda * dot(&cand, &cand) <= threshold {
                accepted = Some((cand, cand_data));
                break;
            }
            t = t / S::lit(2.0);
        }
        let Some((cand, cand_data)) = accepted else {
            return (stop(theta, false), data);
        };
        let norm = norm2(&cand);
        if norm > radius {
            let proj: Vec<S> = cand.iter().map(|&v| v * radius / norm).collect();
            let proj_data = Local::at(obs, &proj);
            let grad_norm = norm2(&proj_data.with_ridge(lambda, &proj).grad);
            let fit = LogisticFit { theta: proj, grad_norm, iterations, converged: false, projected: true };
            return (fit, proj_data);
        }
        theta = cand;
        data = cand_data;
    }
}

/// When the policy and pilot estimates are refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RefitSchedule {
    #[default]
    EveryPeriod,
    /// Refit every period up to `warmup`, then every `stride` periods.
    Thinned { warmup: usize, stride: usize },
}

impl RefitSchedule {
    /// Whether the estimate used in (1-based) period `t` is refitted.
    pub fn refit_at(&self, t: usize) -> bool {
        match *self {
            Self::EveryPeriod => true,
            Self::Thinned { warmup, stride } => t <= warmup || stride <= 1 || (t - warmup) % stride == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub schedule: RefitSchedule,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_PILOT_LAMBDA,
            tol: DEFAULT_NEWTON_TOL,
            max_iter: DEFAULT_NEWTON_MAX_ITER,
            schedule: RefitSchedule::EveryPeriod,
        }
    }
}

/// Pilot estimates `θ̂_t` for `t = 1..=T+1`, each fitted on periods `< t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSequence<S> {
    /// `estimates[t-1]` is the estimate used in period `t`; the last entry is
    /// the final pilot fitted on all `T` periods without ridge.
    pub estimates: Vec<Vec<S>>,
    pub grad_norms: Vec<S>,
    pub converged: Vec<bool>,
    pub fallback_count: usize,
}

impl<S: Scalar> PilotSequence<S> {
    pub fn horizon(&self) -> usize {
        self.estimates.len() - 1
    }

    /// The estimate for (1-based) period `t`.
    pub fn at(&self, t: usize) -> &[S] {
        &self.estimates[t - 1]
    }

    pub fn final_estimate(&self) -> &[S] {
        self.estimates.last().expect("non-empty pilot sequence")
    }
}

/// Incremental fitter shared by [`pilot_sequence`] and the pricing policies.
///
/// `estimate()` is always the fit on every observation pushed so far.
#[derive(Debug, Clone)]
pub struct SequentialFitter<S> {
    family: DemandFamily<S>,
    options: FitOptions,
    obs: Observations<S>,
    gram: Matrix<S>,
    rhs: Vec<S>,
    current: Vec<S>,
    /// Logistic data part at `current` over every pushed observation.
    cached: Option<Local<S>>,
    /// A pushed logistic demand was not 0/1; every later fit fails.
    invalid_demand: bool,
    pub fallback_count: usize,
}

/// Outcome of one sequential refit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefitOutcome<S> {
    pub grad_norm: S,
    pub converged: bool,
}

impl<S: Scalar> SequentialFitter<S> {
    pub fn new(spec: &ModelSpec<S>, options: FitOptions) -> Self {
        let d = spec.dim();
        Self {
            family: spec.family.clone(),
            options,
            obs: Observations::new(d),
            gram: Matrix::zeros(d, d),
            rhs: vec![S::zero(); d],
            current: vec![S::zero(); d],
            cached: None,
            invalid_demand: false,
            fallback_count: 0,
        }
    }

    pub fn estimate(&self) -> &[S] {
        &self.current
    }

    pub fn observations(&self) -> &Observations<S> {
        &self.obs
    }

    pub fn push(&mut self, phi: &[S], d: S) {
        self.obs.push(phi, d);
        self.gram.add_scaled_outer(S::one(), phi);
        for (r, &v) in self.rhs.iter_mut().zip(phi) {
            *r = *r + v * d;
        }
        if self.family.is_logistic() {
            self.invalid_demand |= d != S::zero() && d != S::one();
            if let Some(local) = self.cached.as_mut() {
                local.add(phi, d, &self.current);
            }
        }
    }

    /// Refits on all observations with ridge `lambda`. On failure the
    /// previous estimate is kept and the fallback counter incremented.
    pub fn refit(&mut self, lambda: S) -> RefitOutcome<S> {
        let (theta, grad_norm, converged) = match self.family {
            DemandFamily::Linear { .. } => match self.fit_linear(lambda) {
                Ok((theta, grad_norm)) => (Some(theta), grad_norm, true),
                Err(_) => (None, S::nan(), false),
            },
            DemandFamily::Logistic if self.invalid_demand => (None, S::nan(), false),
            DemandFamily::Logistic => {
                let data = match self.cached.take() {
                    Some(local) => local,
                    None => Local::at(self.obs.view(), &self.current),
                };
                let (fit, fit_data) = newton(
                    self.obs.view(),
                    lambda,
                    self.current.clone(),
                    data.clone(),
                    S::lit(self.options.tol),
                    self.options.max_iter,
                );
                if fit.converged {
                    self.cached = Some(fit_data);
                    (Some(fit.theta), fit.grad_norm, true)
                } else {
                    self.cached = Some(data);
                    (None, fit.grad_norm, false)
                }
            }
        };
        match theta {
            Some(theta) if converged => self.current = theta,
            _ => self.fallback_count += 1,
        }
        RefitOutcome { grad_norm, converged }
    }

    fn fit_linear(&self, lambda: S) -> Result<(Vec<S>, S)> {
        let theta = solve_normal_equations(self.gram.clone(), self.rhs.clone(), lambda)?;
        // Gradient of the ridge least-squares objective.
        let gt = self.gram.matvec(&theta).map_err(EstimatorError::Linalg)?;
        let grad: Vec<S> = gt
            .iter()
            .zip(&self.rhs)
            .zip(&theta)
            .map(|((&a, &b), &th)| S::lit(2.0) * (a - b + lambda * th))
            .collect();
        Ok((theta, norm2(&grad)))
    }
}

/// Sequential pilot estimates for a whole history.
///
/// `θ̂_1` is the zero vector; `θ̂_t` for `2 <= t <= T` is the ridge fit (with
/// `options.lambda`) on periods `< t`, warm-started from `θ̂_{t-1}`; `θ̂_{T+1}`
/// is fitted on all periods with no ridge. Failed fits reuse the previous
/// estimate and are counted in `fallback_count`.
pub fn pilot_sequence<S: Scalar>(
    history: &History<S>,
    spec: &ModelSpec<S>,
    options: FitOptions,
) -> Result<PilotSequence<S>> {
    let obs = Observations::from_history(history, spec)?;
    if spec.family.is_logistic() {
        check_binary(&history.demands)?;
    }
    let t_max = obs.len();
    let mut fitter = SequentialFitter::new(spec, options);
    let mut estimates = Vec::with_capacity(t_max + 1);
    let mut grad_norms = Vec::with_capacity(t_max + 1);
    let mut converged = Vec::with_capacity(t_max + 1);
    estimates.push(fitter.estimate().to_vec());
    grad_norms.push(S::zero());
    converged.push(true);
    let lambda = S::lit(options.lambda);
    for t in 2..=t_max + 1 {
        fitter.push(obs.phi(t - 2), obs.demand(t - 2));
        let is_final = t == t_max + 1;
        if is_final || options.schedule.refit_at(t) {
            let out = fitter.refit(if is_final { S::zero() } else { lambda });
            grad_norms.push(out.grad_norm);
            converged.push(out.converged);
        } else {
            grad_norms.push(S::nan());
            converged.push(true);
        }
        estimates.push(fitter.estimate().to_vec());
    }
    Ok(PilotSequence { estimates, grad_norms, converged, fallback_count: fitter.fallback_count })
}
