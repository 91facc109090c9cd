//! Sequential construction of the whitening matrix `W` with a per-column norm
//! budget, and the diagnostics that go with it.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{self, DemandError, ModelSpec};
use crate::env::History;
use crate::estimator::PilotSequence;
use crate::linalg::{min_eigenvalue, operator_norm, Matrix, SymmetricPD};
use crate::scalar::{dot, norm2, Scalar};

/// Default exponent `υ` in `η = T^{-υ}`.
pub const DEFAULT_UPSILON: f64 = 0.6;

#[derive(Debug, Error)]
pub enum WhiteningError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error("invalid whitening input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, WhiteningError>;

/// `η = T^{-υ}`.
pub fn default_eta(horizon: usize, upsilon: f64) -> f64 {
    (horizon.max(1) as f64).powf(-upsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningDiagnostics<S> {
    /// `||I - W G||_op` with `G` built from the final pilot.
    pub iwg_opnorm: S,
    /// `Σ ||w_t||^3`.
    pub cube_sum: S,
    /// `λ_min(W D̂ W^T)` with `D̂` at the final pilot.
    pub min_eig_cov: S,
    pub clip_fraction: S,
    pub zero_grad_count: usize,
}

/// The whitening matrix `W` (`d × T`) together with its construction trace.
#[derive(Debug, Clone)]
pub struct WhiteningMatrix<S> {
    /// Row `t` holds the column `w_{t+1}`, so the matrix is `W^T` (`T × d`).
    pub columns: Matrix<S>,
    pub eta: S,
    pub z_final: Matrix<S>,
    /// `||Z||_F` before the first update and after each one (length `T + 1`).
    pub z_frob_trace: Vec<S>,
    /// Gradients `u_t` at the per-period pilots (`T × d`).
    pub u_seq: Matrix<S>,
    pub clip_count: usize,
    pub zero_grad_count: usize,
    /// Filled in by [`whiten`]; `None` when built from raw gradients.
    pub diagnostics: Option<WhiteningDiagnostics<S>>,
}

impl<S: Scalar> WhiteningMatrix<S> {
    pub fn horizon(&self) -> usize {
        self.columns.rows()
    }

    pub fn dim(&self) -> usize {
        self.columns.cols()
    }

    /// Column `w_t` for 0-based `t`.
    pub fn column(&self, t: usize) -> &[S] {
        self.columns.row(t)
    }

    /// `W v` for a length-`T` vector `v`.
    pub fn apply(&self, v: &[S]) -> Vec<S> {
        self.columns.tmatvec(v).expect("length-T vector")
    }

    /// `W diag(weights) W^T`.
    pub fn weighted_gram(&self, weights: &[S]) -> SymmetricPD<S> {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for (t, &wt) in weights.iter().enumerate() {
            m.add_scaled_outer(wt, self.column(t));
        }
        SymmetricPD::symmetrized(m)
    }

    /// `W G` for a `T × d` matrix `G` whose rows are gradients.
    pub fn times(&self, g: &Matrix<S>) -> Matrix<S> {
        self.columns.transpose().matmul(g).expect("conforming gradient matrix")
    }

    /// One row per column: `t,w1..wd,u1..ud`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.dim();
        let head: Vec<String> =
            (1..=d).map(|k| format!("w{k}")).chain((1..=d).map(|k| format!("u{k}"))).collect();
        writeln!(w, "t,{}", head.join(","))?;
        for t in 0..self.horizon() {
            let vals: Vec<String> =
                self.column(t).iter().chain(self.u_seq.row(t)).map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", t + 1, vals.join(","))?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "horizon": self.horizon(),
            "dim": self.dim(),
            "eta": self.eta.f64(),
            "clip_count": self.clip_count,
            "zero_grad_count": self.zero_grad_count,
            "z_final_frobenius": self.z_final.frobenius().f64(),
            "diagnostics": self.diagnostics.as_ref().map(|d| serde_json::json!({
                "iwg_opnorm": d.iwg_opnorm.f64(),
                "cube_sum": d.cube_sum.f64(),
                "min_eig_cov": d.min_eig_cov.f64(),
                "clip_fraction": d.clip_fraction.f64(),
                "zero_grad_count": d.zero_grad_count,
            })),
        })
    }
}

/// Runs the column recursion on given gradients `u_t` (rows of `grads`).
///
/// `Z` starts at the identity; `w_t = Z u_t / ||u_t||^2`, rescaled to norm `η`
/// when `||w_t|| >= η`, then `Z <- Z - w_t u_t^T`. A zero gradient gives a zero
/// column and leaves `Z` unchanged.
pub fn whiten_gradients<S: Scalar>(grads: Matrix<S>, eta: S) -> Result<WhiteningMatrix<S>> {
    if !(eta > S::zero()) {
        return Err(WhiteningError::Invalid(format!("eta must be positive, got {eta}")));
    }
    let (t_max, d) = (grads.rows(), grads.cols());
    let mut z = Matrix::identity(d);
    let mut columns = Matrix::zeros(t_max, d);
    let mut frob = Vec::with_capacity(t_max + 1);
    frob.push(z.frobenius());
    let (mut clip_count, mut zero_grad_count) = (0, 0);
    let mut w = vec![S::zero(); d];
    for t in 0..t_max {
        let u = grads.row(t);
        let uu = dot(u, u);
        if !(uu > S::zero()) {
            zero_grad_count += 1;
            frob.push(*frob.last().expect("non-empty"));
            continue;
        }
        let zu = z.matvec(u).expect("square Z");
        for (wk, zk) in w.iter_mut().zip(&zu) {
            *wk = *zk / uu;
        }
        let norm = norm2(&w);
        if norm >= eta {
            clip_count += 1;
            for wk in w.iter_mut() {
                *wk = *wk * eta / norm;
            }
            // Rounding can leave the norm a few ulps above eta.
            while norm2(&w) > eta {
                for wk in w.iter_mut() {
                    *wk = *wk * (S::one() - S::epsilon());
                }
            }
        }
        let previous = z.clone();
        z.sub_outer(&w, u);
        // When Z u is tiny the update is a no-op up to rounding, which can
        // push the norm up by an ulp. Shrink back so the trace is monotone.
        let mut f = z.frobenius();
        if f > frob[t] {
            z = z.scale(frob[t] / f);
            f = z.frobenius();
            for _ in 0..8 {
                if f <= frob[t] {
                    break;
                }
                z = z.scale(S::one() - S::epsilon());
                f = z.frobenius();
            }
            // Subnormal entries do not shrink under scaling.
            if f > frob[t] {
                z = previous;
                f = frob[t];
            }
        }
        frob.push(f);
        for (k, &wk) in w.iter().enumerate() {
            columns[(t, k)] = wk;
        }
    }
    Ok(WhiteningMatrix {
        columns,
        eta,
        z_final: z,
        z_frob_trace: frob,
        u_seq: grads,
        clip_count,
        zero_grad_count,
        diagnostics: None,
    })
}

/// Gradients `∇_θ f(p_t, x_t; θ_t)` stacked as rows, with `θ_t` chosen per period.
pub fn gradient_rows<S: Scalar>(
    history: &History<S>,
    spec: &ModelSpec<S>,
    theta_at: impl Fn(usize) -> Vec<S>,
) -> Result<Matrix<S>> {
    let d = spec.dim();
    let mut g = Matrix::zeros(history.len(), d);
    for t in 0..history.len() {
        let row = demand::grad_mean_demand(spec, &theta_at(t), history.prices[t], history.context(t))?;
        for (k, v) in row.into_iter().enumerate() {
            g[(t, k)] = v;
        }
    }
    Ok(g)
}

/// Builds `W` from a history and its pilot sequence, using the per-period
/// pilots `θ̂_t` (fitted on periods before `t`) for the gradients, and fills in
/// the diagnostics at the final pilot.
pub fn whiten<S: Scalar>(
    history: &History<S>,
    pilots: &PilotSequence<S>,
    spec: &ModelSpec<S>,
    eta: S,
) -> Result<WhiteningMatrix<S>> {
    let t_max = history.len();
    if pilots.estimates.len() != t_max + 1 {
        return Err(WhiteningError::Invalid(format!(
            "pilot sequence has {} entries, expected {}",
            pilots.estimates.len(),
            t_max + 1
        )));
    }
    let u = gradient_rows(history, spec, |t| pilots.estimates[t].clone())?;
    let mut w = whiten_gradients(u, eta)?;
    w.diagnostics = Some(whitening_diagnostics(&w, history, pilots.final_estimate(), spec)?);
    Ok(w)
}

/// Diagnostics of `W` against `G_final` (gradients at the final pilot).
pub fn whitening_diagnostics<S: Scalar>(
    w: &WhiteningMatrix<S>,
    history: &History<S>,
    final_pilot: &[S],
    spec: &ModelSpec<S>,
) -> Result<WhiteningDiagnostics<S>> {
    if w.horizon() != history.len() {
        return Err(WhiteningError::Invalid("whitening and history lengths differ".into()));
    }
    let g_final = gradient_rows(history, spec, |_| final_pilot.to_vec())?;
    let mut variances = Vec::with_capacity(history.len());
    for t in 0..history.len() {
        variances.push(demand::variance_fn(spec, final_pilot, history.prices[t], history.context(t))?);
    }
    Ok(diagnostics_from_parts(w, &g_final, &variances))
}

/// Diagnostics given an explicit gradient matrix and variances.
pub fn diagnostics_from_parts<S: Scalar>(
    w: &WhiteningMatrix<S>,
    g: &Matrix<S>,
    variances: &[S],
) -> WhiteningDiagnostics<S> {
    let d = w.dim();
    let iwg = Matrix::identity(d).sub(&w.times(g)).expect("d x d");
    let cube_sum = (0..w.horizon()).map(|t| norm2(w.column(t)).powi(3)).sum();
    let t = S::from_usize_lossy(w.horizon().max(1));
    WhiteningDiagnostics {
        iwg_opnorm: operator_norm(&iwg),
        cube_sum,
        min_eig_cov: min_eigenvalue(&w.weighted_gram(variances)),
        clip_fraction: S::from_usize_lossy(w.clip_count) / t,
        zero_grad_count: w.zero_grad_count,
    }
}
