use super::params::ParamSet;
use crate::error::{Result, VacError};

/// SGD with momentum, coupled weight decay and a step learning-rate drop.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices (0-based) from which the rate is divided once more.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-6,
            lr_drop_epochs: vec![10, 30],
            lr_drop_factor: 10.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VacError::Config(format!("optimizer.{m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad("lr_drop_factor must be positive");
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_drop_epochs must be strictly increasing");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate / self.lr_drop_factor.powi(drops as i32)
    }
}

/// One descent step on the populated gradient buffers:
/// `v ← momentum·v + (g + wd·p)`, `p ← p − lr(epoch)·v`; gradients are
/// zeroed afterwards. Parameters are left untouched if any update would be
/// non-finite.
pub fn sgd_step(params: &mut ParamSet, cfg: &OptimizerConfig, epoch: usize) -> Result<()> {
    let lr = cfg.learning_rate_at(epoch);
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(VacError::numeric(format!("gradient of `{}`", p.name)));
        }
    }
    let mut staged = Vec::with_capacity(params.len());
    for p in params.iter() {
        let mut v = p.momentum.clone();
        let mut next = p.value.clone();
        for ((vi, &gi), (pi, &p0)) in v
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(next.data_mut().iter_mut().zip(p.value.data()))
        {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * p0;
            *pi = p0 - lr * *vi;
        }
        if !next.is_finite() {
            return Err(VacError::numeric(format!("update of `{}`", p.name)));
        }
        staged.push((v, next));
    }
    for (p, (v, next)) in params.iter_mut().zip(staged) {
        p.momentum = v;
        p.value = next;
        p.grad.fill(0.0);
    }
    Ok(())
}
