//! Projection invariants and the closed-form attack on a linear scorer.

use proptest::prelude::*;
use vac_core::attack::{pgd, project, AttackConfig, InputGradient, Norm, StepRule};
use vac_core::{Result, Tensor};

/// Loss `−w_y · x`, whose input gradient is the constant `−w_y`.
struct Linear {
    weights: Vec<Vec<f64>>,
}

impl InputGradient for Linear {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let mut losses = Vec::new();
        let mut g = Tensor::zeros(x.shape());
        for (i, &y) in labels.iter().enumerate() {
            let w = &self.weights[y];
            losses.push(-w.iter().zip(x.item(i)).map(|(a, b)| a * b).sum::<f64>());
            for (gv, wv) in g.item_mut(i).iter_mut().zip(w) {
                *gv = -wv;
            }
        }
        Ok((losses, g))
    }
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_stays_in_ball_and_box(
        origin in pixels(12),
        offsets in prop::collection::vec(-2.0f64..2.0, 12),
        eps in 0.0f64..1.0,
        use_l2 in any::<bool>(),
    ) {
        let norm = if use_l2 { Norm::L2 } else { Norm::Linf };
        let cfg = AttackConfig { epsilon: eps, norm, ..AttackConfig::default() };
        let cand: Vec<f64> = origin.iter().zip(&offsets).map(|(o, d)| o + d).collect();
        let p = project(&tensor(&[cand]), &tensor(&[origin.clone()]), &cfg).unwrap();
        let p = p.item(0);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let dist = if use_l2 { l2(p, &origin) } else { linf(p, &origin) };
        prop_assert!(dist <= eps * (1.0 + 1e-12) + 1e-15, "distance {} > {}", dist, eps);
    }

    #[test]
    fn attack_output_stays_in_ball_and_box(
        origin in pixels(6),
        w in prop::collection::vec(-1.0f64..1.0, 6),
        eps in 0.0f64..0.5,
        steps in 0usize..12,
        alpha in 0.01f64..0.2,
        use_l2 in any::<bool>(),
        raw in any::<bool>(),
    ) {
        let cfg = AttackConfig {
            epsilon: eps,
            alpha,
            steps,
            norm: if use_l2 { Norm::L2 } else { Norm::Linf },
            step_rule: if raw { StepRule::Raw } else { StepRule::Steepest },
            ..AttackConfig::default()
        };
        let model = Linear { weights: vec![w] };
        let x = tensor(&[origin.clone()]);
        let adv = pgd(&x, &[0], &model, &cfg).unwrap();
        let a = adv.item(0);
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let dist = if use_l2 { l2(a, &origin) } else { linf(a, &origin) };
        prop_assert!(dist <= eps * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn linf_attack_on_linear_scorer_is_the_sign_solution(
        origin in pixels(8),
        w in prop::collection::vec(prop_oneof![-1.0f64..-1e-3, 1e-3f64..1.0], 8),
        eps in 0.0f64..0.5,
        alpha in 0.01f64..0.1,
        extra in 0usize..5,
    ) {
        let steps = (eps / alpha).ceil() as usize + extra;
        let cfg = AttackConfig { epsilon: eps, alpha, steps, ..AttackConfig::default() };
        let model = Linear { weights: vec![w.clone()] };
        let adv = pgd(&tensor(&[origin.clone()]), &[0], &model, &cfg).unwrap();
        for ((&a, &o), &wv) in adv.item(0).iter().zip(&origin).zip(&w) {
            let expected = if wv < 0.0 { (o + eps).min(1.0) } else { (o - eps).max(0.0) };
            prop_assert_eq!(a, expected);
        }
    }
}

#[test]
fn zero_radius_and_zero_steps_are_identities() {
    let model = Linear { weights: vec![vec![0.3, -0.7, 0.1]] };
    let x = tensor(&[vec![0.2, 0.5, 0.9]]);
    let at_zero = AttackConfig { epsilon: 0.0, ..AttackConfig::default() };
    assert_eq!(pgd(&x, &[0], &model, &at_zero).unwrap().data(), x.data());
    let no_steps = AttackConfig { steps: 0, ..AttackConfig::default() };
    assert_eq!(pgd(&x, &[0], &model, &no_steps).unwrap().data(), x.data());
}

#[test]
fn every_attack_raises_the_loss() {
    let mut raised = 0;
    let n = 200;
    for case in 0..n {
        let w: Vec<f64> = (0..5).map(|k| ((case * 7 + k * 13) as f64 * 0.37).sin()).collect();
        let origin: Vec<f64> = (0..5).map(|k| 0.5 + 0.4 * ((case * 3 + k) as f64 * 1.1).cos()).collect();
        let model = Linear { weights: vec![w] };
        let x = tensor(&[origin]);
        let cfg = AttackConfig { epsilon: 0.1, alpha: 0.02, steps: 10, ..AttackConfig::default() };
        let adv = pgd(&x, &[0], &model, &cfg).unwrap();
        let before = model.loss_and_input_grad(&x, &[0]).unwrap().0[0];
        let after = model.loss_and_input_grad(&adv, &[0]).unwrap().0[0];
        if after > before {
            raised += 1;
        }
    }
    assert!(raised as f64 >= 0.95 * n as f64, "{raised}/{n}");
}
