//! Debiased estimator, point-wise intervals, Monte-Carlo uniform bands and
//! the Wald (inverse information) baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{self, DemandError, DemandFamily, ModelSpec};
use crate::env::History;
use crate::estimator::{self, EstimatorError, Observations};
use crate::linalg::{self, LinalgError, Matrix, MvnSampler, SymmetricPD};
use crate::scalar::{dot, Scalar};
use crate::whitening::WhiteningMatrix;

/// Eigenvalue floor applied to near-singular covariance estimates.
pub const COV_EIGEN_FLOOR: f64 = 1e-12;
/// Relative eigenvalue below which the information matrix counts as singular.
pub const INFO_SINGULAR_RATIO: f64 = 1e-12;
pub const DEFAULT_MC_DRAWS: usize = 2000;
pub const MIN_MC_DRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("information matrix is singular (condition number {condition:.3e})")]
    SingularInformation { condition: f64 },
    #[error("argument out of domain: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(InferenceError::Domain(format!("alpha must be in (0, 1), got {alpha}")))
    }
}

/// `z_{α/2}`, the upper `α/2` standard normal quantile.
pub fn z_two_sided<S: Scalar>(alpha: f64) -> Result<S> {
    check_alpha(alpha)?;
    Ok(linalg::std_normal_quantile(S::lit(1.0 - alpha / 2.0))?)
}

/// Floors eigenvalues below [`COV_EIGEN_FLOOR`]; the flag reports whether any
/// were raised.
fn floor_covariance<S: Scalar>(cov: SymmetricPD<S>) -> (SymmetricPD<S>, bool) {
    let floor = S::lit(COV_EIGEN_FLOOR);
    let (values, vectors) = linalg::sym_eigen(&cov);
    if values.iter().all(|&v| v >= floor) {
        return (cov, false);
    }
    (linalg::spectral_map(&values, &vectors, |v| v.max(floor)), true)
}

#[derive(Debug, Clone)]
pub struct DebiasedEstimate<S> {
    pub theta_d: Vec<S>,
    pub theta_p: Vec<S>,
    /// `d_t - f(p_t, x_t; θ̂ᵖ)`.
    pub residuals: Vec<S>,
    /// Estimated variances `ν(p_t, x_t; θ̂ᵖ)^2`.
    pub d_hat: Vec<S>,
    /// `W D̂ W^T`, eigenvalue-floored when `cov_clipped` is set.
    pub cov_hat: SymmetricPD<S>,
    pub cov_clipped: bool,
}

/// `θ̂ᵈ = θ̂ᵖ + W (d - f̂)` with `f̂` and `D̂` evaluated at `theta_p`.
pub fn debias<S: Scalar>(
    theta_p: &[S],
    w: &WhiteningMatrix<S>,
    history: &History<S>,
    spec: &ModelSpec<S>,
) -> Result<DebiasedEstimate<S>> {
    let t_max = history.len();
    if w.horizon() != t_max || w.dim() != theta_p.len() {
        return Err(InferenceError::Domain(format!(
            "whitening is {}x{}, history has {} periods and theta {} entries",
            w.dim(),
            w.horizon(),
            t_max,
            theta_p.len()
        )));
    }
    let mut residuals = Vec::with_capacity(t_max);
    let mut d_hat = Vec::with_capacity(t_max);
    let mut phi = vec![S::zero(); spec.dim()];
    for t in 0..t_max {
        spec.feature_map.feature_into(history.prices[t], history.context(t), &mut phi)?;
        let eta = dot(&phi, theta_p);
        residuals.push(history.demands[t] - spec.family.mean_from_index(eta));
        d_hat.push(spec.family.variance_from_index(eta));
    }
    let correction = w.apply(&residuals);
    let theta_d = theta_p.iter().zip(&correction).map(|(&a, &b)| a + b).collect();
    let (cov_hat, cov_clipped) = floor_covariance(w.weighted_gram(&d_hat));
    Ok(DebiasedEstimate { theta_d, theta_p: theta_p.to_vec(), residuals, d_hat, cov_hat, cov_clipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    Pointwise,
    Uniform,
    WaldPointwise,
    WaldUniform,
}

/// Rectangular evaluation grid: every price against every context point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid<S> {
    pub prices: Vec<S>,
    /// Context points, each of length `context_dim`.
    pub contexts: Vec<Vec<S>>,
}

impl<S: Scalar> UniformGrid<S> {
    /// `n_prices` points on `price_range` times `n_contexts` points per
    /// coordinate on `context_range`.
    pub fn rectangular(
        price_range: (S, S),
        n_prices: usize,
        context_range: (S, S),
        n_contexts: usize,
        context_dim: usize,
    ) -> Result<Self> {
        if n_prices == 0 || n_contexts == 0 {
            return Err(InferenceError::Domain("grid needs at least one point per axis".into()));
        }
        let axis = |(lo, hi): (S, S), n: usize| -> Vec<S> {
            if n == 1 {
                return vec![lo];
            }
            let denom = S::from_usize_lossy(n - 1);
            (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * S::from_usize_lossy(i) / denom }).collect()
        };
        let prices = axis(price_range, n_prices);
        let coord = axis(context_range, n_contexts);
        let mut contexts: Vec<Vec<S>> = vec![Vec::new()];
        for _ in 0..context_dim {
            contexts = contexts
                .into_iter()
                .flat_map(|head| {
                    coord.iter().map(move |&c| {
                        let mut v = head.clone();
                        v.push(c);
                        v
                    })
                })
                .collect();
        }
        Ok(Self { prices, contexts })
    }

    pub fn single(p: S, x: Vec<S>) -> Self {
        Self { prices: vec![p], contexts: vec![x] }
    }

    pub fn len(&self) -> usize {
        self.prices.len() * self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> impl Iterator<Item = (S, &[S])> + '_ {
        self.prices.iter().flat_map(move |&p| self.contexts.iter().map(move |x| (p, x.as_slice())))
    }

    /// Gradients `∇_θ f(p, x; θ)` at every grid point, one row each.
    pub fn gradients(&self, spec: &ModelSpec<S>, theta: &[S]) -> Result<Matrix<S>> {
        let d = spec.dim();
        let mut data = Vec::with_capacity(self.len() * d);
        for (p, x) in self.points() {
            data.extend(demand::grad_mean_demand(spec, theta, p, x)?);
        }
        Ok(Matrix::from_vec(self.len(), d, data)?)
    }

    /// `f(p, x; θ)` at every grid point.
    pub fn means(&self, spec: &ModelSpec<S>, theta: &[S]) -> Result<Vec<S>> {
        self.points().map(|(p, x)| Ok(demand::mean_demand(spec, theta, p, x)?)).collect()
    }

    pub fn metadata(&self) -> serde_json::Value {
        let span = |v: &[S]| (v.first().map(|s| s.f64()), v.last().map(|s| s.f64()));
        serde_json::json!({
            "n_prices": self.prices.len(),
            "price_span": span(&self.prices),
            "n_contexts": self.contexts.len(),
            "points": self.len(),
        })
    }
}

/// A confidence statement for `f(p, x; θ0)`: either an interval at one query
/// or a constant-width band around a center curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand<S> {
    pub kind: BandKind,
    pub alpha: f64,
    /// Parameter of the center curve `f(., .; center_theta)`.
    pub center_theta: Vec<S>,
    pub half_width: S,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<PointQuery<S>>,
    /// Standard error at the query (point-wise kinds).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<S>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_draws: Option<usize>,
    pub cov_clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointQuery<S> {
    pub p: S,
    pub x: Vec<S>,
    pub center: S,
    pub lower: S,
    pub upper: S,
}

impl<S: Scalar> ConfidenceBand<S> {
    /// `(lower, upper)` at `(p, x)`.
    pub fn bounds_at(&self, spec: &ModelSpec<S>, p: S, x: &[S]) -> Result<(S, S)> {
        let c = demand::mean_demand(spec, &self.center_theta, p, x)?;
        Ok((c - self.half_width, c + self.half_width))
    }

    pub fn to_json(&self) -> serde_json::Value
    where
        S: Serialize,
    {
        serde_json::to_value(self).expect("band serializes")
    }
}

fn point_band<S: Scalar>(
    kind: BandKind,
    alpha: f64,
    center_theta: &[S],
    g: &[S],
    cov: &SymmetricPD<S>,
    cov_clipped: bool,
    p: S,
    x: &[S],
    spec: &ModelSpec<S>,
) -> Result<ConfidenceBand<S>> {
    let z: S = z_two_sided(alpha)?;
    let center = demand::mean_demand(spec, center_theta, p, x)?;
    let se = cov.matrix().quad_form(g)?.max(S::zero()).sqrt();
    let half_width = z * se;
    Ok(ConfidenceBand {
        kind,
        alpha,
        center_theta: center_theta.to_vec(),
        half_width,
        query: Some(PointQuery { p, x: x.to_vec(), center, lower: center - half_width, upper: center + half_width }),
        std_error: Some(se),
        grid: None,
        mc_draws: None,
        cov_clipped,
    })
}

/// Standard error `sqrt(g^T W D̂ W^T g)` with `g = ∇_θ f(p, x; θ̂ᵖ)`.
pub fn debiased_std_error<S: Scalar>(est: &DebiasedEstimate<S>, p: S, x: &[S], spec: &ModelSpec<S>) -> Result<S> {
    let g = demand::grad_mean_demand(spec, &est.theta_p, p, x)?;
    Ok(est.cov_hat.matrix().quad_form(&g)?.max(S::zero()).sqrt())
}

/// `f(p, x; θ̂ᵈ) ± z_{α/2} sqrt(g^T W D̂ W^T g)`, `g = ∇_θ f(p, x; θ̂ᵖ)`.
pub fn pointwise_ci<S: Scalar>(
    est: &DebiasedEstimate<S>,
    p: S,
    x: &[S],
    alpha: f64,
    spec: &ModelSpec<S>,
) -> Result<ConfidenceBand<S>> {
    let g = demand::grad_mean_demand(spec, &est.theta_p, p, x)?;
    point_band(BandKind::Pointwise, alpha, &est.theta_d, &g, &est.cov_hat, est.cov_clipped, p, x, spec)
}

/// Upper empirical quantile: the `ceil(q M)`-th smallest value (1-based).
pub fn empirical_quantile<S: Scalar>(values: &[S], q: f64) -> Result<S> {
    if values.is_empty() {
        return Err(InferenceError::Domain("quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(InferenceError::Domain(format!("quantile level must be in (0, 1), got {q}")));
    }
    let mut v = values.to_vec();
    let k = quantile_rank(v.len(), q);
    let (_, nth, _) = v.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).expect("comparable values"));
    Ok(*nth)
}

/// 0-based index of the `ceil(q M)`-th order statistic. The tiny offset keeps
/// products like `0.9 * 2000` from rounding up past an exact integer.
fn quantile_rank(m: usize, q: f64) -> usize {
    let pos = (q * m as f64 - 1e-9).ceil().max(1.0) as usize;
    pos.min(m) - 1
}

/// Same as [`empirical_quantile`] for an already ascending sample.
pub fn sorted_quantile<S: Scalar>(sorted: &[S], q: f64) -> Result<S> {
    if sorted.is_empty() {
        return Err(InferenceError::Domain("quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(InferenceError::Domain(format!("quantile level must be in (0, 1), got {q}")));
    }
    Ok(sorted[quantile_rank(sorted.len(), q)])
}

/// Monte-Carlo sup statistics `a(m) = max_grid |<g(p, x), ζ_m>|` with
/// `ζ_m ~ N(0, cov)`, returned in ascending order.
pub fn sup_statistics<S: Scalar, R: Rng + ?Sized>(
    grads: &Matrix<S>,
    cov: &SymmetricPD<S>,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<S>> {
    if draws < MIN_MC_DRAWS {
        return Err(InferenceError::Domain(format!("need at least {MIN_MC_DRAWS} Monte-Carlo draws, got {draws}")));
    }
    if grads.rows() == 0 {
        return Err(InferenceError::Domain("empty grid".into()));
    }
    let sampler = MvnSampler::new(vec![S::zero(); cov.dim()], cov)?;
    let mut stats = Vec::with_capacity(draws);
    for _ in 0..draws {
        let zeta = sampler.sample(rng);
        let a = (0..grads.rows()).fold(S::zero(), |m, j| m.max(dot(grads.row(j), &zeta).abs()));
        stats.push(a);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    Ok(stats)
}

/// Constant-width band `f(., .; center) ± s_α` from precomputed sup statistics.
pub fn band_from_statistics<S: Scalar>(
    kind: BandKind,
    center_theta: &[S],
    sorted_stats: &[S],
    alpha: f64,
    grid: &UniformGrid<S>,
    cov_clipped: bool,
) -> Result<ConfidenceBand<S>> {
    check_alpha(alpha)?;
    Ok(ConfidenceBand {
        kind,
        alpha,
        center_theta: center_theta.to_vec(),
        half_width: sorted_quantile(sorted_stats, 1.0 - alpha)?,
        query: None,
        std_error: None,
        grid: Some(grid.metadata()),
        mc_draws: Some(sorted_stats.len()),
        cov_clipped,
    })
}

/// Uniform band around `f(., .; θ̂ᵈ)` with half-width the `(1-α)` quantile of
/// `a(m)`, gradients taken at `θ̂ᵖ`.
pub fn uniform_ci<S: Scalar, R: Rng + ?Sized>(
    est: &DebiasedEstimate<S>,
    alpha: f64,
    draws: usize,
    grid: &UniformGrid<S>,
    spec: &ModelSpec<S>,
    rng: &mut R,
) -> Result<ConfidenceBand<S>> {
    check_alpha(alpha)?;
    let grads = grid.gradients(spec, &est.theta_p)?;
    let stats = sup_statistics(&grads, &est.cov_hat, draws, rng)?;
    band_from_statistics(BandKind::Uniform, &est.theta_d, &stats, alpha, grid, est.cov_clipped)
}

/// Maximum-likelihood fit with its sample information matrix.
#[derive(Debug, Clone)]
pub struct WaldFit<S> {
    pub theta: Vec<S>,
    pub info: SymmetricPD<S>,
    pub info_inv: SymmetricPD<S>,
    pub condition: S,
}

/// Information matrix at `theta`: `Σ f(1-f) φ φ^T` (logistic) or
/// `Σ φ φ^T / ν^2` (linear).
pub fn information_matrix<S: Scalar>(history: &History<S>, spec: &ModelSpec<S>, theta: &[S]) -> Result<SymmetricPD<S>> {
    let obs = Observations::from_history(history, spec)?;
    let d = spec.dim();
    let mut info = Matrix::zeros(d, d);
    for i in 0..obs.len() {
        let phi = obs.phi(i);
        let weight = match spec.family {
            DemandFamily::Logistic => spec.family.mean_slope(dot(phi, theta)),
            DemandFamily::Linear { noise_std, .. } => {
                if !(noise_std > S::zero()) {
                    return Err(InferenceError::Domain("linear information needs noise_std > 0".into()));
                }
                S::one() / (noise_std * noise_std)
            }
        };
        info.add_scaled_outer(weight, phi);
    }
    Ok(SymmetricPD::symmetrized(info))
}

/// Wald fit at a given maximum-likelihood estimate.
pub fn wald_fit_at<S: Scalar>(history: &History<S>, spec: &ModelSpec<S>, theta: &[S]) -> Result<WaldFit<S>> {
    let info = information_matrix(history, spec, theta)?;
    let (values, vectors) = linalg::sym_eigen(&info);
    let max = values.iter().fold(S::zero(), |m, &v| m.max(v.abs()));
    let min = values[0];
    if !(min > S::lit(INFO_SINGULAR_RATIO) * max) {
        let condition = if min > S::zero() { (max / min).f64() } else { f64::INFINITY };
        return Err(InferenceError::SingularInformation { condition });
    }
    let info_inv = linalg::spectral_map(&values, &vectors, |v| S::one() / v);
    Ok(WaldFit { theta: theta.to_vec(), info, info_inv, condition: max / min })
}

/// Maximum likelihood (no ridge) followed by [`wald_fit_at`].
pub fn wald_fit<S: Scalar>(history: &History<S>, spec: &ModelSpec<S>) -> Result<WaldFit<S>> {
    let obs = Observations::from_history(history, spec)?;
    let theta = match spec.family {
        DemandFamily::Linear { .. } => estimator::fit_least_squares(obs.view(), S::zero())?,
        DemandFamily::Logistic => {
            let fit = estimator::fit_logistic_newton(
                obs.view(),
                S::zero(),
                &vec![S::zero(); spec.dim()],
                S::lit(estimator::DEFAULT_NEWTON_TOL),
                estimator::DEFAULT_NEWTON_MAX_ITER,
            )?;
            if !fit.converged {
                return Err(InferenceError::Estimator(EstimatorError::Domain(
                    "maximum likelihood did not converge".into(),
                )));
            }
            fit.theta
        }
    };
    wald_fit_at(history, spec, &theta)
}

/// `f(p, x; θ̂) ± z_{α/2} sqrt(g^T Î^{-1} g)` with `g = ∇_θ f(p, x; θ̂)`.
pub fn wald_pointwise<S: Scalar>(
    fit: &WaldFit<S>,
    p: S,
    x: &[S],
    alpha: f64,
    spec: &ModelSpec<S>,
) -> Result<ConfidenceBand<S>> {
    let g = demand::grad_mean_demand(spec, &fit.theta, p, x)?;
    point_band(BandKind::WaldPointwise, alpha, &fit.theta, &g, &fit.info_inv, false, p, x, spec)
}

pub fn wald_ci<S: Scalar>(
    history: &History<S>,
    spec: &ModelSpec<S>,
    p: S,
    x: &[S],
    alpha: f64,
) -> Result<ConfidenceBand<S>> {
    wald_pointwise(&wald_fit(history, spec)?, p, x, alpha, spec)
}

/// Uniform band built the same way as [`uniform_ci`] but from the Wald
/// ingredients: center and gradients at `θ̂`, draws from `N(0, Î^{-1})`.
pub fn wald_uniform<S: Scalar, R: Rng + ?Sized>(
    fit: &WaldFit<S>,
    alpha: f64,
    draws: usize,
    grid: &UniformGrid<S>,
    spec: &ModelSpec<S>,
    rng: &mut R,
) -> Result<ConfidenceBand<S>> {
    check_alpha(alpha)?;
    let grads = grid.gradients(spec, &fit.theta)?;
    let stats = sup_statistics(&grads, &fit.info_inv, draws, rng)?;
    band_from_statistics(BandKind::WaldUniform, &fit.theta, &stats, alpha, grid, false)
}

/// Standardized estimation and prediction errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedErrors<S> {
    /// Whitened parameter error, one entry per coordinate.
    pub eps: Vec<S>,
    /// `[f(q; θ̂) - f(q; θ0)] / σ̂_q` per query.
    pub predictions: Vec<S>,
}

/// `M^{1/2} v` or `M^{-1/2} v` for symmetric positive semi-definite `M`.
fn sym_power_apply<S: Scalar>(m: &SymmetricPD<S>, v: &[S], inverse: bool) -> Result<Vec<S>> {
    let (values, vectors) = linalg::sym_eigen(m);
    let floor = S::lit(COV_EIGEN_FLOOR);
    let root = linalg::spectral_map(&values, &vectors, |l| {
        let s = l.max(floor).sqrt();
        if inverse {
            S::one() / s
        } else {
            s
        }
    });
    Ok(root.matrix().matvec(v)?)
}

/// Debiased errors: `(W D W^T)^{-1/2} (θ̂ᵈ - θ0)` with `D` the true variances,
/// and prediction errors standardized by the estimated `σ̂ᵈ`.
pub fn debiased_normalized_errors<S: Scalar>(
    est: &DebiasedEstimate<S>,
    w: &WhiteningMatrix<S>,
    history: &History<S>,
    spec: &ModelSpec<S>,
    queries: &[(S, Vec<S>)],
) -> Result<NormalizedErrors<S>> {
    let mut d_true = Vec::with_capacity(history.len());
    for t in 0..history.len() {
        d_true.push(demand::variance_fn(spec, &spec.theta0, history.prices[t], history.context(t))?);
    }
    let cov = w.weighted_gram(&d_true);
    let diff: Vec<S> = est.theta_d.iter().zip(&spec.theta0).map(|(&a, &b)| a - b).collect();
    let eps = sym_power_apply(&cov, &diff, true)?;
    let mut predictions = Vec::with_capacity(queries.len());
    for (p, x) in queries {
        let err = demand::mean_demand(spec, &est.theta_d, *p, x)? - demand::mean_demand(spec, &spec.theta0, *p, x)?;
        predictions.push(err / debiased_std_error(est, *p, x, spec)?);
    }
    Ok(NormalizedErrors { eps, predictions })
}

/// Wald errors: `Î(θ̂)^{1/2} (θ̂ - θ0)` and prediction errors over the delta
/// method standard error.
pub fn wald_normalized_errors<S: Scalar>(
    fit: &WaldFit<S>,
    spec: &ModelSpec<S>,
    queries: &[(S, Vec<S>)],
) -> Result<NormalizedErrors<S>> {
    let diff: Vec<S> = fit.theta.iter().zip(&spec.theta0).map(|(&a, &b)| a - b).collect();
    let eps = sym_power_apply(&fit.info, &diff, false)?;
    let mut predictions = Vec::with_capacity(queries.len());
    for (p, x) in queries {
        let g = demand::grad_mean_demand(spec, &fit.theta, *p, x)?;
        let se = fit.info_inv.matrix().quad_form(&g)?.max(S::zero()).sqrt();
        let err = demand::mean_demand(spec, &fit.theta, *p, x)? - demand::mean_demand(spec, &spec.theta0, *p, x)?;
        predictions.push(err / se);
    }
    Ok(NormalizedErrors { eps, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{standard_logistic_spec, FeatureMap};
    use crate::whitening::whiten_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_spec(noise: f64) -> ModelSpec<f64> {
        ModelSpec::new(
            DemandFamily::Linear { noise_std: noise, truncate_noise: false },
            FeatureMap::Concat { context_dim: 1 },
            vec![1.0, 0.0],
            (0.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn debias_hand_instance() {
        // d = 1 via a one-dimensional linear feature map φ = (p).
        let spec = ModelSpec::new(
            DemandFamily::Linear { noise_std: 1.0, truncate_noise: false },
            FeatureMap::Concat { context_dim: 0 },
            vec![1.0],
            (0.0, 1.0),
        )
        .unwrap();
        let mut h = History::new(0);
        // f̂ = 0.8 p at p = 1, residuals (0.2, -0.1, 7).
        for r in [0.2, -0.1, 7.0] {
            h.push(1.0, &[], 0.8 + r);
        }
        let mut w = whiten_gradients(Matrix::from_vec(3, 1, vec![1.0; 3]).unwrap(), 0.5).unwrap();
        w.columns = Matrix::from_vec(3, 1, vec![0.5, 0.5, 0.0]).unwrap();
        let est = debias(&[0.8], &w, &h, &spec).unwrap();
        assert!((est.theta_d[0] - 0.85_f64).abs() < 1e-12);
    }

    #[test]
    fn zero_residuals_and_zero_w() {
        let spec = linear_spec(0.5);
        let mut h = History::new(1);
        let theta_p = [0.7, 0.2];
        for (p, x) in [(0.1, 0.3), (0.5, -0.2), (0.9, 0.8)] {
            h.push(p, &[x], 0.7 * p + 0.2 * x);
        }
        let g = Matrix::from_rows(&[vec![0.1, 0.3], vec![0.5, -0.2], vec![0.9, 0.8]]).unwrap();
        let w = whiten_gradients(g, 10.0).unwrap();
        let est = debias(&theta_p, &w, &h, &spec).unwrap();
        assert!(est.theta_d.iter().zip(&theta_p).all(|(a, b)| (a - b).abs() < 1e-15));

        let mut h2 = h.clone();
        h2.demands = vec![5.0, -3.0, 2.0];
        let mut w0 = w.clone();
        w0.columns = Matrix::zeros(3, 2);
        let est = debias(&theta_p, &w0, &h2, &spec).unwrap();
        assert_eq!(est.theta_d, theta_p.to_vec());
    }

    #[test]
    fn pointwise_half_width_and_degenerate() {
        let spec = linear_spec(1.0);
        let est = DebiasedEstimate {
            theta_d: vec![0.3, 0.0],
            theta_p: vec![0.3, 0.0],
            residuals: vec![],
            d_hat: vec![],
            cov_hat: SymmetricPD::identity(2),
            cov_clipped: false,
        };
        // φ = (p, x) so g = (1, 0) at p = 1, x = 0.
        let band = pointwise_ci(&est, 1.0, &[0.0], 0.05, &spec).unwrap();
        assert!((band.half_width - 1.959_963_984_540_054).abs() < 1e-9);
        let band = pointwise_ci(&est, 0.0, &[0.0], 0.05, &spec).unwrap();
        assert_eq!(band.half_width, 0.0);
        let q = band.query.unwrap();
        assert_eq!(q.lower, q.upper);
        assert!(pointwise_ci(&est, 0.5, &[0.0], 1.0, &spec).is_err());
    }

    #[test]
    fn quantile_rule() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[5.0], 0.3).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&[4.0, 1.0, 3.0, 2.0], 0.75).unwrap(), 3.0);
        let v: Vec<f64> = (1..=2000).map(|i| i as f64).collect();
        assert_eq!(sorted_quantile(&v, 0.9).unwrap(), 1800.0);
        assert_eq!(sorted_quantile(&v, 0.8).unwrap(), 1600.0);
        assert!(empirical_quantile::<f64>(&[], 0.5).is_err());
        assert!(empirical_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn uniform_band_degenerate_and_single_point() {
        let spec = standard_logistic_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = UniformGrid::rectangular((0.0, 1.0), 5, (-1.0, 1.0), 3, 1).unwrap();
        assert_eq!(grid.len(), 15);
        let zero = SymmetricPD::new(Matrix::zeros(2, 2)).unwrap();
        let grads = grid.gradients(&spec, &spec.theta0).unwrap();
        let stats = sup_statistics(&grads, &zero, 200, &mut rng).unwrap();
        assert!(stats.iter().all(|&a| a == 0.0));

        // A single grid point: the sup statistic is |N(0, σ^2)|.
        let single = UniformGrid::single(0.5, vec![0.0]);
        let g = single.gradients(&spec, &spec.theta0).unwrap();
        let cov = SymmetricPD::new(Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap()).unwrap();
        let sigma = cov.matrix().quad_form(g.row(0)).unwrap().sqrt();
        let stats = sup_statistics(&g, &cov, 200_000, &mut rng).unwrap();
        let s = sorted_quantile(&stats, 0.95).unwrap();
        assert!((s / sigma - 1.959_963_984_540_054).abs() < 0.02, "{}", s / sigma);
        assert!(sup_statistics(&g, &cov, 50, &mut rng).is_err());
    }

    #[test]
    fn wald_matches_textbook_ols() {
        // Orthogonal design, known noise σ: Var(θ̂) = σ^2 (X^T X)^{-1}.
        let sigma = 0.3;
        let spec = linear_spec(sigma);
        let mut h = History::new(1);
        let design = [(1.0, 0.0), (0.0, 1.0), (1.0, 0.0), (0.0, -1.0)];
        let ys = [1.1, 0.2, 0.9, -0.1];
        for (&(p, x), &y) in design.iter().zip(&ys) {
            h.push(p, &[x], y);
        }
        let band = wald_ci(&h, &spec, 1.0, &[0.5], 0.1).unwrap();
        // Closed form: θ̂ = (mean of p-rows, (0.2 + 0.1) / 2), X^T X = diag(2, 2).
        let theta = [1.0, 0.15];
        let center = theta[0] + 0.5 * theta[1];
        let se = sigma * (1.0 / 2.0 + 0.25 / 2.0_f64).sqrt();
        let z = 1.644_853_626_951_472_2;
        let q = band.query.unwrap();
        assert!((q.center - center).abs() < 1e-8);
        assert!((q.lower - (center - z * se)).abs() < 1e-8);
        assert!((q.upper - (center + z * se)).abs() < 1e-8);
    }

    #[test]
    fn singular_information_reports_condition() {
        let spec = linear_spec(1.0);
        let mut h = History::new(1);
        h.push(0.5, &[0.5], 1.0);
        h.push(1.0, &[1.0], 2.0);
        let err = wald_fit_at(&h, &spec, &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, InferenceError::SingularInformation { .. }));
    }

    #[test]
    fn exact_estimates_have_zero_errors() {
        let spec = standard_logistic_spec();
        let mut h = History::new(1);
        for (p, x, d) in [(0.2, 0.1, 1.0), (0.8, -0.5, 0.0), (0.5, 0.9, 1.0), (0.1, -0.9, 0.0)] {
            h.push(p, &[x], d);
        }
        let fit = wald_fit_at(&h, &spec, &spec.theta0).unwrap();
        let e = wald_normalized_errors(&fit, &spec, &[(0.5, vec![0.0])]).unwrap();
        assert!(e.eps.iter().chain(&e.predictions).all(|&v| v == 0.0));
    }
}
