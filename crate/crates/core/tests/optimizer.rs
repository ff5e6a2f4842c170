//! Plain and momentum SGD on a quadratic bowl.

use vac_core::nn::{sgd_step, OptimizerConfig, ParamSet};
use vac_core::Tensor;

/// `f(p) = ½ Σ h_i p_i²` with curvatures `h`.
fn loss(p: &[f64], h: &[f64]) -> f64 {
    0.5 * p.iter().zip(h).map(|(v, c)| c * v * v).sum::<f64>()
}

fn descend(h: &[f64], cfg: &OptimizerConfig, steps: usize) -> Vec<f64> {
    let mut params = ParamSet::new();
    let id = params.add("classifier.w", Tensor::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
    let mut losses = vec![loss(params.value(id).data(), h)];
    for _ in 0..steps {
        let p = params.get_mut(id);
        let g: Vec<f64> = p.value.data().iter().zip(h).map(|(v, c)| c * v).collect();
        p.grad.data_mut().copy_from_slice(&g);
        sgd_step(&mut params, cfg, 0).unwrap();
        losses.push(loss(params.value(id).data(), h));
    }
    losses
}

#[test]
fn plain_sgd_decreases_a_convex_quadratic_below_the_curvature_bound() {
    let h = [1.0, 4.0, 10.0];
    for lr in [0.01, 0.1, 0.19] {
        let cfg = OptimizerConfig { learning_rate: lr, momentum: 0.0, weight_decay: 0.0, ..OptimizerConfig::default() };
        let losses = descend(&h, &cfg, 200);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "lr {lr}");
    }
}

#[test]
fn plain_sgd_diverges_above_the_curvature_bound() {
    let cfg = OptimizerConfig { learning_rate: 0.21, momentum: 0.0, weight_decay: 0.0, ..OptimizerConfig::default() };
    let losses = descend(&[1.0, 4.0, 10.0], &cfg, 50);
    assert!(losses[50] > losses[0]);
}

#[test]
fn momentum_converges_to_the_minimum() {
    let cfg = OptimizerConfig { learning_rate: 0.05, momentum: 0.9, weight_decay: 0.0, ..OptimizerConfig::default() };
    let losses = descend(&[1.0, 4.0, 10.0], &cfg, 500);
    assert!(losses[500] < 1e-10, "{}", losses[500]);
}

#[test]
fn weight_decay_pulls_toward_zero_without_gradient() {
    let mut params = ParamSet::new();
    let id = params.add("decoder.w", Tensor::from_vec(vec![2.0])).unwrap();
    let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.5, ..OptimizerConfig::default() };
    sgd_step(&mut params, &cfg, 0).unwrap();
    assert!((params.value(id).data()[0] - 1.9).abs() < 1e-15);
}
