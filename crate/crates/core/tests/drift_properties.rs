//! Property tests for the drifting-field estimators: invariants that must
//! hold for arbitrary residual sets, not just hand-picked examples.

use proptest::prelude::*;
use rddm_core::drift::{
    attraction, drift_field, drift_loss, kernel_weights, repulsion, NormScaling, ResidualBatch,
};
use rddm_core::graph::Graph;
use rddm_core::tensor::Tensor;

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d)
}

fn set_strategy(d: usize, max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_strategy(d), 1..=max_n)
}

fn batch_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(data, &[rows.len(), 1, 1, d]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Swapping the toward/away sets negates the field exactly.
    #[test]
    fn anti_symmetry(
        d in 1usize..=16,
        tau in prop::sample::select(vec![0.05, 0.2, 1.0]),
        seed in any::<u64>(),
    ) {
        let mut rng = rddm_core::rng::NoiseSource::new(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.normal_scalar()).collect();
        let na = 1 + (seed % 8) as usize;
        let nb = 1 + ((seed / 8) % 8) as usize;
        let a: Vec<Vec<f64>> =
            (0..na).map(|_| (0..d).map(|_| rng.normal_scalar()).collect()).collect();
        let b: Vec<Vec<f64>> =
            (0..nb).map(|_| (0..d).map(|_| rng.normal_scalar()).collect()).collect();
        let fwd: Vec<f64> = attraction(&x, &a, tau, NormScaling::PerDimension).unwrap()
            .iter()
            .zip(repulsion(&x, &b, tau, NormScaling::PerDimension).unwrap())
            .map(|(p, q)| p - q)
            .collect();
        let rev: Vec<f64> = attraction(&x, &b, tau, NormScaling::PerDimension).unwrap()
            .iter()
            .zip(repulsion(&x, &a, tau, NormScaling::PerDimension).unwrap())
            .map(|(p, q)| p - q)
            .collect();
        for (f, r) in fwd.iter().zip(&rev) {
            prop_assert!((f + r).abs() <= 1e-12);
        }
    }

    // Generated set equal to the real set (same order) ⇒ drift vanishes.
    #[test]
    fn equilibrium(rows in set_strategy(6, 8), tau in 0.05f64..2.0) {
        let t = batch_tensor(&rows);
        let gen = ResidualBatch::generated_detached(t.clone()).unwrap();
        let real = ResidualBatch::real(t).unwrap();
        let f = drift_field(&gen, &real, tau, NormScaling::PerDimension).unwrap();
        for v in f.drift.data() {
            prop_assert!(v.abs() <= 1e-12);
        }
    }

    // Normalized kernel weights are a probability vector.
    #[test]
    fn weight_simplex(
        x in vec_strategy(5),
        set in set_strategy(5, 10),
        tau in prop::sample::select(vec![0.1, 0.5, 1.5]),
    ) {
        let w = kernel_weights(&x, &set, tau, NormScaling::PerDimension).unwrap();
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    // The reported loss value equals (1/B) Σ ‖V_i‖² for the same field.
    #[test]
    fn loss_matches_field_norm(
        gen_rows in set_strategy(4, 6),
        real_rows in set_strategy(4, 6),
        tau in prop::sample::select(vec![0.2, 1.0]),
    ) {
        let gen_t = batch_tensor(&gen_rows).with_requires_grad();
        let real_t = batch_tensor(&real_rows);
        let mut graph = Graph::new();
        let rhat = graph.leaf(&gen_t);
        let gen = ResidualBatch::generated(&graph, rhat).unwrap();
        let real = ResidualBatch::real(real_t).unwrap();
        let loss = drift_loss(&mut graph, &gen, &real, tau, NormScaling::PerDimension).unwrap();
        let field = drift_field(&gen, &real, tau, NormScaling::PerDimension).unwrap();
        let b = gen_rows.len() as f64;
        let expect: f64 = field.drift.data().iter().map(|v| v * v).sum::<f64>() / b;
        let got = graph.value(loss)[0];
        prop_assert!((got - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    // Adding the same constant to every residual leaves the field unchanged.
    #[test]
    fn translation_equivariance(
        gen_rows in set_strategy(4, 5),
        shift in -2.0f64..2.0,
        tau in prop::sample::select(vec![0.2, 1.0]),
    ) {
        let real_rows: Vec<Vec<f64>> =
            gen_rows.iter().map(|r| r.iter().map(|v| v * 0.5 + 0.1).collect()).collect();
        let shifted = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect()
        };
        let f0 = drift_field(
            &ResidualBatch::generated_detached(batch_tensor(&gen_rows)).unwrap(),
            &ResidualBatch::real(batch_tensor(&real_rows)).unwrap(),
            tau,
            NormScaling::PerDimension,
        ).unwrap();
        let f1 = drift_field(
            &ResidualBatch::generated_detached(batch_tensor(&shifted(&gen_rows))).unwrap(),
            &ResidualBatch::real(batch_tensor(&shifted(&real_rows))).unwrap(),
            tau,
            NormScaling::PerDimension,
        ).unwrap();
        prop_assert!(f0.drift.max_abs_diff(&f1.drift).unwrap() <= 1e-10);
    }
}
