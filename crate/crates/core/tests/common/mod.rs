//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use demand_ci::demand::{self, standard_logistic_spec, DemandFamily, FeatureMap, ModelSpec};
use demand_ci::env::{run_episode, ContextConfig, History, Policy};
use demand_ci::estimator::{fit_logistic_newton, pilot_sequence, FitOptions, Observations};
use demand_ci::inference::debias;
use demand_ci::linalg::{cholesky, std_normal_quantile, Matrix, SymmetricPD};
use demand_ci::whitening::{default_eta, whiten, whiten_gradients, WhiteningMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Φ` from the complementary error function of a separate implementation.
fn oracle_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Bisection on `Φ(x) = p`, or on the upper tail `1 - Φ(x) = 1 - p` (exact in
/// floating point) when `p > 1/2`, since `Φ` has no resolution near 1.
fn bisect_quantile(p: f64) -> f64 {
    if p > 0.5 {
        return -bisect_quantile(1.0 - p);
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if oracle_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest `|Φ⁻¹(Φ(x)) - x|` for `x` on a 0.01 grid over `[-5, 5]`.
pub fn quantile_round_trip_error() -> f64 {
    (-500..=500)
        .map(|i| {
            let x = i as f64 / 100.0;
            (std_normal_quantile(oracle_cdf(x)).unwrap() - x).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest `|Φ⁻¹(p) - bisection(p)|` over a grid spanning `[1e-10, 1 - 1e-10]`.
pub fn quantile_max_error() -> f64 {
    let mut probs: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
    for k in 4..=10 {
        let tail = 10f64.powi(-k);
        probs.extend([tail, 3.0 * tail, 1.0 - tail]);
    }
    probs
        .iter()
        .map(|&p| (std_normal_quantile(p).unwrap() - bisect_quantile(p)).abs())
        .fold(0.0, f64::max)
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SymmetricPD<f64> {
    let a = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut m = a.matmul(&a.transpose()).unwrap();
    for i in 0..n {
        m[(i, i)] += 0.1;
    }
    SymmetricPD::symmetrized(m)
}

/// Largest `max|L Lᵀ - A|` over random SPD matrices of sizes 1 to 12.
pub fn cholesky_max_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for n in 1..=12 {
        for _ in 0..20 {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a).unwrap();
            let recon = l.matmul(&l.transpose()).unwrap();
            worst = worst.max(recon.max_abs_diff(a.matrix()).unwrap());
        }
    }
    worst
}

fn logistic_data(n: usize, theta: &[f64], rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut phis = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    for _ in 0..n {
        let phi = [0.9 + 0.1 * rng.random::<f64>(), rng.random_range(-1.0..1.0)];
        let eta = phi[0] * theta[0] + phi[1] * theta[1];
        let f = 1.0 / (1.0 + (-eta).exp());
        ds.push(if rng.random::<f64>() < f { 1.0 } else { 0.0 });
        phis.push(phi);
    }
    (phis, ds)
}

/// Plain gradient descent on `(1/n) (Σ ρ + λ ‖θ‖²)`, written out by hand.
fn gradient_descent(phis: &[[f64; 2]], ds: &[f64], lambda: f64, steps: usize, step: f64) -> [f64; 2] {
    let n = phis.len() as f64;
    let mut th = [0.0, 0.0];
    for _ in 0..steps {
        let mut g = [2.0 * lambda * th[0], 2.0 * lambda * th[1]];
        for (phi, &d) in phis.iter().zip(ds) {
            let f = 1.0 / (1.0 + (-(phi[0] * th[0] + phi[1] * th[1])).exp());
            g[0] += (f - d) * phi[0];
            g[1] += (f - d) * phi[1];
        }
        th[0] -= step * g[0] / n;
        th[1] -= step * g[1] / n;
    }
    th
}

/// Largest coordinate gap between Newton and a 10⁶-step gradient-descent
/// oracle (step 0.01), with and without ridge. `steps` can be lowered for
/// quick runs.
pub fn newton_vs_gd_error(steps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (phis, ds) = logistic_data(60, &[-1.0, 1.0], &mut rng);
    let mut obs = Observations::new(2);
    for (phi, &d) in phis.iter().zip(&ds) {
        obs.push(phi, d);
    }
    let mut worst = 0.0_f64;
    for lambda in [0.0, 1.0] {
        let fit = fit_logistic_newton(obs.view(), lambda, &[0.0, 0.0], 1e-12, 100).unwrap();
        assert!(fit.converged);
        let gd = gradient_descent(&phis, &ds, lambda, steps, 0.01);
        worst = worst.max((fit.theta[0] - gd[0]).abs()).max((fit.theta[1] - gd[1]).abs());
    }
    worst
}

fn specs() -> Vec<ModelSpec<f64>> {
    vec![
        standard_logistic_spec(),
        ModelSpec::new(
            DemandFamily::Linear { noise_std: 0.2, truncate_noise: false },
            FeatureMap::AffinePriceContext { a: 1.0, b: -0.5, context_dim: 1 },
            vec![1.0, 0.3],
            (0.0, 1.0),
        )
        .unwrap(),
        ModelSpec::new(DemandFamily::Logistic, FeatureMap::Concat { context_dim: 2 }, vec![-0.5, 0.8, -0.3], (0.0, 2.0))
            .unwrap(),
    ]
}

fn perturbed(theta: &[f64], k: usize, h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    t[k] += h;
    t
}

/// Largest gap between analytic gradients (of `f` and of the risk) and central
/// differences, over random points of several models.
pub fn gradient_fd_error() -> f64 {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for spec in specs() {
        for _ in 0..50 {
            let p = rng.random_range(spec.price_range.0..spec.price_range.1);
            let x: Vec<f64> = (0..spec.context_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta: Vec<f64> = spec.theta0.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let d = if rng.random::<bool>() { 1.0 } else { 0.0 };
            let g = demand::grad_mean_demand(&spec, &theta, p, &x).unwrap();
            let rg = demand::risk_grad(&spec, &theta, d, p, &x).unwrap();
            for k in 0..theta.len() {
                let (tp, tm) = (perturbed(&theta, k, h), perturbed(&theta, k, -h));
                let fd = (demand::mean_demand(&spec, &tp, p, &x).unwrap()
                    - demand::mean_demand(&spec, &tm, p, &x).unwrap())
                    / (2.0 * h);
                let rfd = (demand::risk(&spec, &tp, d, p, &x).unwrap() - demand::risk(&spec, &tm, d, p, &x).unwrap())
                    / (2.0 * h);
                worst = worst.max((g[k] - fd).abs()).max((rg[k] - rfd).abs());
            }
        }
    }
    worst
}

/// Largest gap between the analytic risk Hessian and central differences of the
/// analytic risk gradient.
pub fn hessian_fd_error() -> f64 {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    for spec in specs() {
        for _ in 0..50 {
            let p = rng.random_range(spec.price_range.0..spec.price_range.1);
            let x: Vec<f64> = (0..spec.context_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta: Vec<f64> = spec.theta0.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let d = if rng.random::<bool>() { 1.0 } else { 0.0 };
            let hess = demand::risk_hess(&spec, &theta, d, p, &x).unwrap();
            for k in 0..theta.len() {
                let gp = demand::risk_grad(&spec, &perturbed(&theta, k, h), d, p, &x).unwrap();
                let gm = demand::risk_grad(&spec, &perturbed(&theta, k, -h), d, p, &x).unwrap();
                for j in 0..theta.len() {
                    worst = worst.max((hess[(j, k)] - (gp[j] - gm[j]) / (2.0 * h)).abs());
                }
            }
        }
    }
    worst
}

/// Supremum of `|σ''|` for the logistic link: `1 / (6√3)`.
pub const LOGISTIC_SECOND_DERIVATIVE_BOUND: f64 = 0.096_225_044_864_937_6;

/// Outcome of checking `θ̂ᵈ - θ0 = (I - WG)(θ̂ᵖ - θ0) + Wξ + b`.
#[derive(Debug, Clone, Copy)]
pub struct DecompositionCheck {
    /// `‖b‖`.
    pub remainder: f64,
    /// `C ‖θ̂ᵖ - θ0‖²`.
    pub bound: f64,
    pub pilot_error: f64,
}

/// Simulates one episode, debiases, and measures the remainder of the
/// decomposition with `G` the gradients at the final pilot. For the logistic
/// family `C = ½ sup|σ''| max‖φ_t‖² Σ‖w_t‖` (Taylor remainder per period); for
/// linear demand `C = 0`.
pub fn decomposition_check(spec: &ModelSpec<f64>, horizon: usize, seed: u64) -> DecompositionCheck {
    let episode = run_episode(spec, &Policy::epsilon_greedy(0.05), ContextConfig::default(), horizon, seed).unwrap();
    let h = &episode.history;
    let pilots = pilot_sequence(h, spec, FitOptions::default()).unwrap();
    let w = whiten(h, &pilots, spec, default_eta(horizon, 0.6)).unwrap();
    let theta_p = pilots.final_estimate().to_vec();
    let est = debias(&theta_p, &w, h, spec).unwrap();
    let d = spec.dim();

    let mut g = Matrix::zeros(h.len(), d);
    let mut xi = Vec::with_capacity(h.len());
    let mut max_phi2 = 0.0_f64;
    for t in 0..h.len() {
        let row = demand::grad_mean_demand(spec, &theta_p, h.prices[t], h.context(t)).unwrap();
        for k in 0..d {
            g[(t, k)] = row[k];
        }
        xi.push(h.demands[t] - demand::mean_demand(spec, &spec.theta0, h.prices[t], h.context(t)).unwrap());
        let phi = spec.feature(h.prices[t], h.context(t)).unwrap();
        max_phi2 = max_phi2.max(phi.iter().map(|v| v * v).sum());
    }
    let delta: Vec<f64> = theta_p.iter().zip(&spec.theta0).map(|(a, b)| a - b).collect();
    let iwg = Matrix::identity(d).sub(&w.times(&g)).unwrap();
    let lhs: Vec<f64> = est.theta_d.iter().zip(&spec.theta0).map(|(a, b)| a - b).collect();
    let a = iwg.matvec(&delta).unwrap();
    let b = w.apply(&xi);
    let remainder = (0..d).map(|k| (lhs[k] - a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
    let pilot_error = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c = match spec.family {
        DemandFamily::Logistic => {
            let col_sum: f64 = (0..w.horizon()).map(|t| w.column(t).iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
            0.5 * LOGISTIC_SECOND_DERIVATIVE_BOUND * max_phi2 * col_sum
        }
        DemandFamily::Linear { .. } => 0.0,
    };
    DecompositionCheck { remainder, bound: c * pilot_error * pilot_error, pilot_error }
}

/// The hand trace `d = 1`, `u_t = 1`, `η = 0.5`. Returns a description of the
/// first mismatch.
pub fn hand_trace_mismatch() -> Option<String> {
    let w = whiten_gradients(Matrix::from_vec(6, 1, vec![1.0; 6]).unwrap(), 0.5).unwrap();
    let cols: Vec<f64> = (0..6).map(|t| w.column(t)[0]).collect();
    if cols != [0.5, 0.5, 0.0, 0.0, 0.0, 0.0] {
        return Some(format!("columns {cols:?}"));
    }
    if w.z_final[(0, 0)] != 0.0 {
        return Some(format!("Z_final {}", w.z_final[(0, 0)]));
    }
    let wg = w.times(&w.u_seq)[(0, 0)];
    if wg != 1.0 {
        return Some(format!("WG {wg}"));
    }
    None
}

/// `‖w_t‖ ≤ η` (exactly) and `‖Z_t‖_F` non-increasing (both exactly). Returns
/// the first violation.
pub fn norm_invariant_violation(w: &WhiteningMatrix<f64>) -> Option<String> {
    for t in 0..w.horizon() {
        let n = w.column(t).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > w.eta {
            return Some(format!("‖w_{}‖ = {n:e} > η = {:e}", t + 1, w.eta));
        }
    }
    for (t, pair) in w.z_frob_trace.windows(2).enumerate() {
        if pair[1] > pair[0] {
            return Some(format!("‖Z‖_F rose from {:e} to {:e} at step {}", pair[0], pair[1], t + 1));
        }
    }
    None
}

/// Replaces periods `>= keep` of `history` with those of `other`.
pub fn splice(history: &History<f64>, other: &History<f64>, keep: usize) -> History<f64> {
    let mut out = history.prefix(keep);
    for t in keep..other.len() {
        out.push(other.prices[t], other.context(t), other.demands[t]);
    }
    out
}

/// Whitening of `history` and of its splice with `other` after `keep`
/// periods must agree on the first `keep` columns bit for bit.
pub fn prefix_mismatch(spec: &ModelSpec<f64>, history: &History<f64>, other: &History<f64>, keep: usize) -> Option<String> {
    let eta = default_eta(history.len(), 0.6);
    let build = |h: &History<f64>| {
        let pilots = pilot_sequence(h, spec, FitOptions::default()).unwrap();
        whiten(h, &pilots, spec, eta).unwrap()
    };
    let a = build(history);
    let b = build(&splice(history, other, keep));
    (0..keep).find(|&t| a.column(t) != b.column(t)).map(|t| format!("column {} differs", t + 1))
}
