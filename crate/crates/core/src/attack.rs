//! Projected gradient ascent on the classification loss within an ε-ball.

use rayon::prelude::*;

use crate::data::{Dataset, LabeledBatch};
use crate::error::{Result, VacError};
use crate::model::VacModel;
use crate::tensor::Tensor;
use crate::vac::{accuracy_of, predict_classes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Norm {
    #[default]
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `α·sign(g)` under ℓ∞, `α·g/‖g‖₂` under ℓ2.
    #[default]
    Steepest,
    /// `α·g`, the literal gradient step.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    /// Radius in pixel units (pixels live in `[lower, upper]`).
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub norm: Norm,
    pub step_rule: StepRule,
    pub lower: f64,
    pub upper: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            alpha: 0.01,
            steps: 40,
            norm: Norm::Linf,
            step_rule: StepRule::Steepest,
            lower: 0.0,
            upper: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(VacError::Config(format!("attack: epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(VacError::Config("attack: alpha must be positive".into()));
        }
        if !(self.lower < self.upper) {
            return Err(VacError::Config("attack: empty pixel range".into()));
        }
        Ok(())
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..*self }
    }
}

/// Anything that can report per-sample losses and `∂(Σ loss)/∂x`.
pub trait InputGradient: Sync {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)>;
}

impl InputGradient for VacModel {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        self.class_loss_input_grad(x, labels)
    }
}

/// Projects every batch item of `candidate` onto the ε-ball around the
/// matching item of `origin`, then onto the pixel box.
pub fn project(candidate: &Tensor, origin: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    candidate.expect_shape("projection candidate", origin.shape())?;
    let mut out = candidate.clone();
    let eps = cfg.epsilon;
    for i in 0..origin.batch() {
        let o = origin.item(i);
        let c = out.item_mut(i);
        match cfg.norm {
            Norm::Linf => {
                for (v, &ov) in c.iter_mut().zip(o) {
                    *v = v.clamp(ov - eps, ov + eps);
                }
            }
            Norm::L2 => {
                let n = c.iter().zip(o).map(|(v, ov)| (v - ov) * (v - ov)).sum::<f64>().sqrt();
                if n > eps {
                    let s = eps / n;
                    for (v, &ov) in c.iter_mut().zip(o) {
                        *v = ov + (*v - ov) * s;
                    }
                }
            }
        }
        for v in c.iter_mut() {
            *v = v.clamp(cfg.lower, cfg.upper);
        }
    }
    Ok(out)
}

fn step_direction(g: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    match (cfg.step_rule, cfg.norm) {
        (StepRule::Raw, _) => g.iter().map(|v| cfg.alpha * v).collect(),
        (StepRule::Steepest, Norm::Linf) => g
            .iter()
            .map(|&v| if v > 0.0 { cfg.alpha } else if v < 0.0 { -cfg.alpha } else { 0.0 })
            .collect(),
        (StepRule::Steepest, Norm::L2) => {
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|v| cfg.alpha * v / n).collect()
            }
        }
    }
}

/// `k` ascent-then-project iterations starting at `x`.
pub fn pgd(x: &Tensor, labels: &[usize], model: &impl InputGradient, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut cur = x.clone();
    for step in 0..cfg.steps {
        let (_, g) = model.loss_and_input_grad(&cur, labels)?;
        g.check_finite(&format!("attack gradient at step {step}"))?;
        for i in 0..cur.batch() {
            let dir = step_direction(g.item(i), cfg);
            for (v, d) in cur.item_mut(i).iter_mut().zip(dir) {
                *v += d;
            }
        }
        cur = project(&cur, x, cfg)?;
    }
    Ok(cur)
}

/// [`pgd`] over independent chunks of the batch in parallel.
pub fn pgd_parallel(
    x: &Tensor,
    labels: &[usize],
    model: &impl InputGradient,
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<Tensor> {
    let b = x.batch();
    let starts: Vec<usize> = (0..b).step_by(chunk.max(1)).collect();
    let parts: Vec<Result<Tensor>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + chunk).min(b);
            let idx: Vec<usize> = (s..e).collect();
            pgd(&x.select(&idx), &labels[s..e], model, cfg)
        })
        .collect();
    Tensor::concat(&parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Accuracy on the adversarial counterpart of a dataset at one ε.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSummary {
    pub epsilon: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Attacks `dataset` at every ε of the grid, `wave` samples at a time.
/// `sink` receives each adversarial wave (with its predictions) in order, so
/// callers can stream shards to disk.
pub fn attack_dataset(
    dataset: &Dataset,
    model: &VacModel,
    cfg: &AttackConfig,
    epsilons: &[f64],
    wave: usize,
    mut sink: impl FnMut(f64, &LabeledBatch, &[usize]) -> Result<()>,
) -> Result<Vec<AttackSummary>> {
    if dataset.is_empty() {
        return Err(VacError::Data("attack on an empty dataset".into()));
    }
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let ecfg = cfg.with_epsilon(eps);
        ecfg.validate()?;
        let mut predicted = Vec::with_capacity(dataset.len());
        for idx in dataset.chunks(wave) {
            let batch = dataset.batch(&idx);
            let adv = pgd_parallel(&batch.images, &batch.labels, model, &ecfg, 8)?;
            let pred = predict_classes(&adv, model, 32)?;
            sink(
                eps,
                &LabeledBatch {
                    images: adv,
                    labels: batch.labels,
                },
                &pred,
            )?;
            predicted.extend(pred);
        }
        let accuracy = accuracy_of(&predicted, &dataset.labels)?;
        log::info!("epsilon {eps}: adversarial accuracy {accuracy:.4}");
        out.push(AttackSummary {
            epsilon: eps,
            accuracy,
            count: dataset.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(norm: Norm, eps: f64) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            norm,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn inside_point_is_unchanged() {
        let o = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let c = Tensor::new(vec![1, 2], vec![0.52, 0.47]).unwrap();
        assert_eq!(project(&c, &o, &cfg(Norm::Linf, 0.1)).unwrap().data(), c.data());
        assert_eq!(project(&c, &o, &cfg(Norm::L2, 0.1)).unwrap().data(), c.data());
    }

    #[test]
    fn linf_clamps() {
        let o = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let c = Tensor::new(vec![1, 1], vec![0.75]).unwrap();
        let p = project(&c, &o, &cfg(Norm::Linf, 0.1)).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn l2_rescales_to_radius() {
        let o = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let c = Tensor::new(vec![1, 2], vec![0.8, 0.5]).unwrap();
        let p = project(&c, &o, &cfg(Norm::L2, 0.1)).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(p.data()[1], 0.5);
    }

    #[test]
    fn box_binds_after_ball() {
        let o = Tensor::new(vec![1, 1], vec![0.95]).unwrap();
        let c = Tensor::new(vec![1, 1], vec![1.2]).unwrap();
        assert_eq!(project(&c, &o, &cfg(Norm::Linf, 0.1)).unwrap().data(), &[1.0]);
    }

    #[test]
    fn bad_epsilon_is_rejected() {
        assert!(cfg(Norm::Linf, 1.5).validate().is_err());
        assert!(cfg(Norm::Linf, -0.1).validate().is_err());
    }
}
