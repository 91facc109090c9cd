mod common;

use demand_ci::demand::standard_logistic_spec;
use demand_ci::env::{run_episode, ContextConfig, Policy};
use demand_ci::linalg::Matrix;
use demand_ci::whitening::whiten_gradients;
use proptest::prelude::*;

fn gradients(max_t: usize, max_d: usize) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max_t, 1..=max_d).prop_flat_map(|(t, d)| {
        prop::collection::vec(prop_oneof![4 => -3.0..3.0_f64, 1 => Just(0.0)], t * d)
            .prop_map(move |data| Matrix::from_vec(t, d, data).unwrap())
    })
}

proptest! {
    #[test]
    fn column_norms_and_frobenius(g in gradients(80, 4), eta in 0.01..2.0_f64) {
        let w = whiten_gradients(g, eta).unwrap();
        prop_assert_eq!(common::norm_invariant_violation(&w), None);
        let cube: f64 = (0..w.horizon()).map(|t| w.column(t).iter().map(|v| v * v).sum::<f64>().powf(1.5)).sum();
        prop_assert!(cube <= w.horizon() as f64 * eta.powi(3) * (1.0 + 1e-12));
    }

    #[test]
    fn prefix_columns_ignore_future_rows(g in gradients(60, 3), other in prop::collection::vec(-3.0..3.0_f64, 180), eta in 0.01..2.0_f64, cut in 0usize..60) {
        let (t, d) = (g.rows(), g.cols());
        let keep = cut.min(t);
        let mut h = g.clone();
        for r in keep..t {
            for k in 0..d {
                h[(r, k)] = other[(r * d + k) % other.len()];
            }
        }
        let a = whiten_gradients(g, eta).unwrap();
        let b = whiten_gradients(h, eta).unwrap();
        for r in 0..keep {
            prop_assert_eq!(a.column(r), b.column(r));
        }
    }

    #[test]
    fn zero_gradients_leave_z_alone(t in 1usize..20, d in 1usize..4) {
        let w = whiten_gradients(Matrix::zeros(t, d), 0.3).unwrap();
        prop_assert_eq!(w.zero_grad_count, t);
        prop_assert_eq!(w.z_final, Matrix::identity(d));
    }
}

#[test]
fn hand_trace() {
    assert_eq!(common::hand_trace_mismatch(), None);
}

#[test]
fn walk_episode_invariants_and_prefix_determinism() {
    let spec = standard_logistic_spec();
    let policy = Policy::epsilon_greedy(0.05);
    for seed in 0..4 {
        let a = run_episode(&spec, &policy, ContextConfig::default(), 400, seed).unwrap();
        let b = run_episode(&spec, &policy, ContextConfig::default(), 400, seed + 100).unwrap();
        for keep in [0, 1, 150, 399] {
            assert_eq!(common::prefix_mismatch(&spec, &a.history, &b.history, keep), None, "seed {seed}, keep {keep}");
        }
    }
}
