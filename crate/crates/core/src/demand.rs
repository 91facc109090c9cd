//! Demand families, feature maps and the per-observation risk functions.
//!
//! Two generalized linear families are supported. Both have mean
//! `f(p, x; θ) = link(<φ(p, x), θ>)`:
//!
//! - linear: identity link, Gaussian noise with known standard deviation;
//! - logistic: sigmoid link, Bernoulli demand in {0, 1}.
//!
//! The gradient in θ is therefore always `link'(<φ, θ>) φ`, which the
//! estimator and inference modules exploit by caching `φ` per observation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{dot, Scalar};

/// Linear index is clamped to this range before exponentiation.
pub const LOGIT_CLAMP: f64 = 500.0;
/// Optional truncation of Gaussian noise, in standard deviations.
pub const NOISE_TRUNCATION_SIGMAS: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, DemandError>;

/// Feature values tabulated on a rectangular (price x context) grid and
/// evaluated by multilinear interpolation. Queries outside the grid are
/// clamped to its boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable<S> {
    pub price_grid: Vec<S>,
    /// One sorted grid per context coordinate.
    pub context_grids: Vec<Vec<S>>,
    /// Feature vectors at the grid nodes, row-major over (price, ctx_1, ..., ctx_k).
    pub values: Vec<Vec<S>>,
    pub output_dim: usize,
}

impl<S: Scalar> FeatureTable<S> {
    fn validate(&self) -> Result<()> {
        let mut axes = vec![&self.price_grid];
        axes.extend(self.context_grids.iter());
        for (k, axis) in axes.iter().enumerate() {
            if axis.is_empty() {
                return Err(DemandError::InvalidSpec(format!("table axis {k} is empty")));
            }
            if axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(DemandError::InvalidSpec(format!("table axis {k} is not strictly increasing")));
            }
        }
        let nodes: usize = axes.iter().map(|a| a.len()).product();
        if self.values.len() != nodes {
            return Err(DemandError::InvalidSpec(format!("table has {} values, grid has {nodes} nodes", self.values.len())));
        }
        if self.values.iter().any(|v| v.len() != self.output_dim) {
            return Err(DemandError::InvalidSpec("table value with wrong output dimension".into()));
        }
        Ok(())
    }

    fn eval(&self, p: S, x: &[S]) -> Vec<S> {
        let mut axes: Vec<&[S]> = vec![&self.price_grid];
        axes.extend(self.context_grids.iter().map(Vec::as_slice));
        let coords: Vec<S> = std::iter::once(p).chain(x.iter().copied()).collect();
        // Per axis: lower node index and interpolation weight of the upper node.
        let cells: Vec<(usize, S)> = axes.iter().zip(&coords).map(|(axis, &c)| bracket(axis, c)).collect();
        let mut strides = vec![1usize; axes.len()];
        for k in (0..axes.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].len();
        }
        let mut out = vec![S::zero(); self.output_dim];
        for corner in 0..(1usize << axes.len()) {
            let mut weight = S::one();
            let mut idx = 0;
            for (k, &(lo, t)) in cells.iter().enumerate() {
                let upper = (corner >> k) & 1 == 1;
                let node = if upper { (lo + 1).min(axes[k].len() - 1) } else { lo };
                weight = weight * if upper { t } else { S::one() - t };
                idx += node * strides[k];
            }
            if weight == S::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&self.values[idx]) {
                *o = *o + weight * v;
            }
        }
        out
    }
}

fn bracket<S: Scalar>(axis: &[S], c: S) -> (usize, S) {
    let n = axis.len();
    if n == 1 || c <= axis[0] {
        return (0, S::zero());
    }
    if c >= axis[n - 1] {
        return (n - 1, S::zero());
    }
    let hi = axis.partition_point(|&a| a <= c);
    let lo = hi - 1;
    (lo, (c - axis[lo]) / (axis[hi] - axis[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap<S> {
    /// `φ(p, x) = (a + b p, x_1, ..., x_k)`.
    AffinePriceContext { a: S, b: S, context_dim: usize },
    /// `φ(p, x) = (p, x_1, ..., x_k)`.
    Concat { context_dim: usize },
    CustomTable(FeatureTable<S>),
}

impl<S: Scalar> FeatureMap<S> {
    pub fn output_dim(&self) -> usize {
        match self {
            Self::AffinePriceContext { context_dim, .. } | Self::Concat { context_dim } => 1 + context_dim,
            Self::CustomTable(t) => t.output_dim,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            Self::AffinePriceContext { context_dim, .. } | Self::Concat { context_dim } => *context_dim,
            Self::CustomTable(t) => t.context_grids.len(),
        }
    }

    /// Writes `φ(p, x)` into `out` (length `output_dim`).
    pub fn feature_into(&self, p: S, x: &[S], out: &mut [S]) -> Result<()> {
        if x.len() != self.context_dim() {
            return Err(DemandError::DimensionMismatch(format!(
                "context has length {}, feature map expects {}",
                x.len(),
                self.context_dim()
            )));
        }
        if out.len() != self.output_dim() {
            return Err(DemandError::DimensionMismatch(format!("output buffer length {}", out.len())));
        }
        match self {
            Self::AffinePriceContext { a, b, .. } => {
                out[0] = *a + *b * p;
                out[1..].copy_from_slice(x);
            }
            Self::Concat { .. } => {
                out[0] = p;
                out[1..].copy_from_slice(x);
            }
            Self::CustomTable(t) => out.copy_from_slice(&t.eval(p, x)),
        }
        Ok(())
    }
}

/// `φ(p, x)`.
pub fn feature<S: Scalar>(map: &FeatureMap<S>, p: S, x: &[S]) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); map.output_dim()];
    map.feature_into(p, x, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemandFamily<S> {
    Linear {
        noise_std: S,
        #[serde(default)]
        truncate_noise: bool,
    },
    Logistic,
}

impl<S: Scalar> DemandFamily<S> {
    pub fn is_logistic(&self) -> bool {
        matches!(self, Self::Logistic)
    }

    /// Mean demand as a function of the linear index `<φ, θ>`.
    #[inline]
    pub fn mean_from_index(&self, eta: S) -> S {
        match self {
            Self::Linear { .. } => eta,
            Self::Logistic => sigmoid(eta),
        }
    }

    /// Derivative of the mean with respect to the linear index.
    #[inline]
    pub fn mean_slope(&self, eta: S) -> S {
        match self {
            Self::Linear { .. } => S::one(),
            Self::Logistic => {
                let f = sigmoid(eta);
                f * (S::one() - f)
            }
        }
    }

    /// Conditional variance of the demand given the linear index.
    #[inline]
    pub fn variance_from_index(&self, eta: S) -> S {
        match self {
            Self::Linear { noise_std, .. } => *noise_std * *noise_std,
            Self::Logistic => {
                let f = sigmoid(eta);
                f * (S::one() - f)
            }
        }
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1).
#[inline]
pub fn sigmoid<S: Scalar>(eta: S) -> S {
    let c = S::lit(LOGIT_CLAMP);
    let eta = eta.max(-c).min(c);
    let f = if eta >= S::zero() {
        S::one() / (S::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (S::one() + e)
    };
    f.max(S::min_positive_value()).min(S::one() - S::epsilon() / S::lit(2.0))
}

/// `log(1 + e^eta)` without overflow.
#[inline]
fn softplus<S: Scalar>(eta: S) -> S {
    eta.max(S::zero()) + (-eta.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec<S> {
    pub family: DemandFamily<S>,
    pub feature_map: FeatureMap<S>,
    pub theta0: Vec<S>,
    pub price_range: (S, S),
    pub context_dim: usize,
}

impl<S: Scalar> ModelSpec<S> {
    pub fn new(
        family: DemandFamily<S>,
        feature_map: FeatureMap<S>,
        theta0: Vec<S>,
        price_range: (S, S),
    ) -> Result<Self> {
        let context_dim = feature_map.context_dim();
        let spec = Self { family, feature_map, theta0, price_range, context_dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.price_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(DemandError::InvalidSpec(format!("price range [{lo}, {hi}] is empty or non-finite")));
        }
        if self.theta0.len() != self.dim() {
            return Err(DemandError::InvalidSpec(format!(
                "theta0 has length {}, feature map has output dimension {}",
                self.theta0.len(),
                self.dim()
            )));
        }
        if self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(DemandError::InvalidSpec("theta0 must be finite".into()));
        }
        if self.context_dim != self.feature_map.context_dim() {
            return Err(DemandError::InvalidSpec(format!(
                "context_dim {} disagrees with feature map ({})",
                self.context_dim,
                self.feature_map.context_dim()
            )));
        }
        if let DemandFamily::Linear { noise_std, .. } = self.family {
            if !(noise_std >= S::zero()) || !noise_std.is_finite() {
                return Err(DemandError::InvalidSpec(format!("noise_std must be >= 0, got {noise_std}")));
            }
        }
        if let FeatureMap::CustomTable(t) = &self.feature_map {
            t.validate()?;
        }
        Ok(())
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.feature_map.output_dim()
    }

    pub fn feature(&self, p: S, x: &[S]) -> Result<Vec<S>> {
        feature(&self.feature_map, p, x)
    }

    fn index(&self, theta: &[S], p: S, x: &[S]) -> Result<(Vec<S>, S)> {
        let phi = self.feature(p, x)?;
        if theta.len() != phi.len() {
            return Err(DemandError::DimensionMismatch(format!(
                "theta has length {}, features have {}",
                theta.len(),
                phi.len()
            )));
        }
        let eta = dot(&phi, theta);
        Ok((phi, eta))
    }
}

/// `f(p, x; θ)`.
pub fn mean_demand<S: Scalar>(spec: &ModelSpec<S>, theta: &[S], p: S, x: &[S]) -> Result<S> {
    let (_, eta) = spec.index(theta, p, x)?;
    Ok(spec.family.mean_from_index(eta))
}

/// `∇_θ f(p, x; θ)`.
pub fn grad_mean_demand<S: Scalar>(spec: &ModelSpec<S>, theta: &[S], p: S, x: &[S]) -> Result<Vec<S>> {
    let (phi, eta) = spec.index(theta, p, x)?;
    let slope = spec.family.mean_slope(eta);
    Ok(phi.into_iter().map(|v| slope * v).collect())
}

/// `ν(p, x; θ)^2`, the conditional demand variance.
pub fn variance_fn<S: Scalar>(spec: &ModelSpec<S>, theta: &[S], p: S, x: &[S]) -> Result<S> {
    let (_, eta) = spec.index(theta, p, x)?;
    Ok(spec.family.variance_from_index(eta))
}

/// Draws a demand at `(p, x)` under the true parameter `spec.theta0`.
pub fn sample_demand<S: Scalar, R: Rng + ?Sized>(spec: &ModelSpec<S>, p: S, x: &[S], rng: &mut R) -> Result<S> {
    let f = mean_demand(spec, &spec.theta0, p, x)?;
    Ok(sample_from_mean(&spec.family, f, rng))
}

pub(crate) fn sample_from_mean<S: Scalar, R: Rng + ?Sized>(family: &DemandFamily<S>, f: S, rng: &mut R) -> S {
    match family {
        DemandFamily::Logistic => {
            let u: f64 = rng.random();
            if S::lit(u) < f {
                S::one()
            } else {
                S::zero()
            }
        }
        DemandFamily::Linear { noise_std, truncate_noise } => {
            if *noise_std == S::zero() {
                return f;
            }
            let z = loop {
                let z: f64 = rng.sample(StandardNormal);
                if !truncate_noise || z.abs() <= NOISE_TRUNCATION_SIGMAS {
                    break z;
                }
            };
            f + *noise_std * S::lit(z)
        }
    }
}

fn check_demand<S: Scalar>(family: &DemandFamily<S>, d: S) -> Result<()> {
    if family.is_logistic() && d != S::zero() && d != S::one() {
        return Err(DemandError::Domain(format!("logistic demand must be 0 or 1, got {d}")));
    }
    if !d.is_finite() {
        return Err(DemandError::Domain(format!("demand must be finite, got {d}")));
    }
    Ok(())
}

/// Risk value from the linear index, without argument checks.
#[inline]
pub(crate) fn risk_from_index<S: Scalar>(family: &DemandFamily<S>, eta: S, d: S) -> S {
    match family {
        DemandFamily::Linear { .. } => (d - eta) * (d - eta),
        DemandFamily::Logistic => softplus(eta) - d * eta,
    }
}

/// Derivative of the risk with respect to the linear index.
#[inline]
pub(crate) fn risk_slope<S: Scalar>(family: &DemandFamily<S>, eta: S, d: S) -> S {
    match family {
        DemandFamily::Linear { .. } => S::lit(2.0) * (eta - d),
        DemandFamily::Logistic => sigmoid(eta) - d,
    }
}

/// Second derivative of the risk with respect to the linear index.
#[inline]
pub(crate) fn risk_curvature<S: Scalar>(family: &DemandFamily<S>, eta: S) -> S {
    match family {
        DemandFamily::Linear { .. } => S::lit(2.0),
        DemandFamily::Logistic => family.mean_slope(eta),
    }
}

/// Per-observation loss ρ(d, p, x; θ): squared error for the linear family,
/// negative log-likelihood for the logistic family.
pub fn risk<S: Scalar>(spec: &ModelSpec<S>, theta: &[S], d: S, p: S, x: &[S]) -> Result<S> {
    check_demand(&spec.family, d)?;
    let (_, eta) = spec.index(theta, p, x)?;
    Ok(risk_from_index(&spec.family, eta, d))
}

pub fn risk_grad<S: Scalar>(spec: &ModelSpec<S>, theta: &[S], d: S, p: S, x: &[S]) -> Result<Vec<S>> {
    check_demand(&spec.family, d)?;
    let (phi, eta) = spec.index(theta, p, x)?;
    let s = risk_slope(&spec.family, eta, d);
    Ok(phi.into_iter().map(|v| s * v).collect())
}

pub fn risk_hess<S: Scalar>(spec: &ModelSpec<S>, theta: &[S], d: S, p: S, x: &[S]) -> Result<Matrix<S>> {
    check_demand(&spec.family, d)?;
    let (phi, eta) = spec.index(theta, p, x)?;
    let mut h = Matrix::zeros(phi.len(), phi.len());
    h.add_scaled_outer(risk_curvature(&spec.family, eta), &phi);
    Ok(h)
}

/// The logistic model used throughout the experiments: `φ(p, x) = (0.9 + 0.1 p, x)`,
/// `θ0 = (-1, 1)`, prices in `[0, 1]`.
pub fn standard_logistic_spec() -> ModelSpec<f64> {
    ModelSpec::new(
        DemandFamily::Logistic,
        FeatureMap::AffinePriceContext { a: 0.9, b: 0.1, context_dim: 1 },
        vec![-1.0, 1.0],
        (0.0, 1.0),
    )
    .expect("valid built-in spec")
}
