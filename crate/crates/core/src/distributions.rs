//! Diagonal-Gaussian latent machinery and the output likelihoods.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VacError};
use crate::rng;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-6;

/// `q(z|x) = N(mu, diag(exp(logvar)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    logvar: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(VacError::shape("gaussian logvar", &[mu.len()], &[logvar.len()]));
        }
        if !mu.iter().chain(&logvar).all(|v| v.is_finite()) {
            return Err(VacError::numeric("gaussian parameters"));
        }
        Ok(Self { mu, logvar })
    }

    /// The prior `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    /// Log-density at `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(z)
            .map(|((&m, &lv), &zi)| -0.5 * (ln2pi + lv + (zi - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// `KL(q ‖ N(0, I)) = ½ Σ (μ² + e^{logvar} − 1 − logvar)`.
pub fn kl_to_standard(q: &DiagonalGaussian) -> f64 {
    q.mu
        .iter()
        .zip(&q.logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
        * 0.5
}

/// Gradient of [`kl_to_standard`]: `(∂/∂μ, ∂/∂logvar) = (μ, ½(e^{logvar} − 1))`.
pub fn kl_to_standard_grad(q: &DiagonalGaussian) -> (Vec<f64>, Vec<f64>) {
    (
        q.mu.clone(),
        q.logvar.iter().map(|&lv| 0.5 * (lv.exp() - 1.0)).collect(),
    )
}

/// Standard-normal draw `ξ`, keyed by `(seed, sample, draw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub xi: Vec<f64>,
    pub seed: u64,
    pub sample: u64,
    pub draw: u64,
}

impl NoiseDraw {
    pub fn generate(seed: u64, sample: u64, draw: u64, dim: usize) -> Self {
        let mut r = rng::stream(seed, &[rng::TAG_NOISE, sample, draw]);
        let xi = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        Self {
            xi,
            seed,
            sample,
            draw,
        }
    }

    /// Fixed noise vector (no provenance), e.g. ξ = 0 for the mean path.
    pub fn fixed(xi: Vec<f64>) -> Self {
        Self {
            xi,
            seed: 0,
            sample: 0,
            draw: 0,
        }
    }
}

/// `z = μ + ξ·exp(½ logvar)`.
pub fn reparam_sample(q: &DiagonalGaussian, noise: &NoiseDraw) -> Result<Vec<f64>> {
    if noise.xi.len() != q.dim() {
        return Err(VacError::shape("noise", &[q.dim()], &[noise.xi.len()]));
    }
    Ok(q.mu
        .iter()
        .zip(&q.logvar)
        .zip(&noise.xi)
        .map(|((&m, &lv), &e)| m + e * (0.5 * lv).exp())
        .collect())
}

/// Pulls `∂L/∂z` back to `(∂L/∂μ, ∂L/∂logvar)` through [`reparam_sample`].
pub fn reparam_backward(q: &DiagonalGaussian, noise: &NoiseDraw, dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dmu = dz.to_vec();
    let dlogvar = dz
        .iter()
        .zip(&q.logvar)
        .zip(&noise.xi)
        .map(|((&g, &lv), &e)| g * 0.5 * e * (0.5 * lv).exp())
        .collect();
    (dmu, dlogvar)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_len(context: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        Err(VacError::shape(context, &[b.len()], &[a.len()]))
    } else {
        Ok(())
    }
}

/// `Σ x·log p + (1−x)·log(1−p)` with `p` clamped away from 0 and 1.
pub fn bernoulli_loglik(probs: &[f64], x: &[f64]) -> Result<f64> {
    check_len("bernoulli probabilities", probs, x)?;
    Ok(probs
        .iter()
        .zip(x)
        .map(|(&p, &xi)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
        })
        .sum())
}

/// Bernoulli log-likelihood of `x` under `p = sigmoid(logits)`, and its
/// gradient with respect to the logits (`x − p`, zero where the clamp binds).
pub fn bernoulli_loglik_logits(logits: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("bernoulli logits", logits, x)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&l, &xi) in logits.iter().zip(x) {
        let p = sigmoid(l);
        let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        value += xi * clamped.ln() + (1.0 - xi) * (1.0 - clamped).ln();
        grad.push(if clamped == p { xi - p } else { 0.0 });
    }
    Ok((value, grad))
}

/// Log-density of `x` under `N(decoded, I)`.
pub fn gaussian_loglik(decoded: &[f64], x: &[f64]) -> Result<f64> {
    Ok(gaussian_loglik_grad(decoded, x)?.0)
}

/// [`gaussian_loglik`] and its gradient with respect to `decoded`.
pub fn gaussian_loglik_grad(decoded: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("gaussian decoded", decoded, x)?;
    let half_ln2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut sq = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&d, &xi) in decoded.iter().zip(x) {
        sq += (xi - d) * (xi - d);
        grad.push(xi - d);
    }
    Ok((-0.5 * sq - x.len() as f64 * half_ln2pi, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, DEFAULT_STEP};

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_standard(&DiagonalGaussian::standard(5)), 0.0);
        let q = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_to_standard(&q) - 0.5).abs() < 1e-15);
        let q = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        assert!((kl_to_standard(&q) - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-15);
        assert!((kl_to_standard(&q) - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = DiagonalGaussian::new(vec![0.3, -1.2], vec![0.5, -0.7]).unwrap();
        let (dmu, dlv) = kl_to_standard_grad(&q);
        let point = [q.mu(), q.logvar()].concat();
        let analytic = [dmu, dlv].concat();
        let r = grad_check(
            |p| Ok(kl_to_standard(&DiagonalGaussian::new(p[..2].to_vec(), p[2..].to_vec())?)),
            &point,
            &analytic,
            None,
            DEFAULT_STEP,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn reparam_special_cases() {
        let prior = DiagonalGaussian::standard(3);
        let noise = NoiseDraw::fixed(vec![1.0, -2.0, 0.5]);
        assert_eq!(reparam_sample(&prior, &noise).unwrap(), noise.xi);
        let q = DiagonalGaussian::new(vec![0.4, 0.5, -0.6], vec![1.0, 2.0, 3.0]).unwrap();
        let zero = NoiseDraw::fixed(vec![0.0; 3]);
        assert_eq!(reparam_sample(&q, &zero).unwrap(), q.mu());
    }

    #[test]
    fn reparam_gradient_coefficients() {
        let q = DiagonalGaussian::new(vec![0.2], vec![0.6]).unwrap();
        let noise = NoiseDraw::fixed(vec![1.3]);
        let (dmu, dlv) = reparam_backward(&q, &noise, &[1.0]);
        assert_eq!(dmu, vec![1.0]);
        assert!((dlv[0] - 0.5 * 1.3 * (0.3f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn noise_is_reproducible_by_coordinates() {
        let a = NoiseDraw::generate(5, 10, 0, 4);
        let b = NoiseDraw::generate(5, 10, 0, 4);
        let c = NoiseDraw::generate(5, 10, 1, 4);
        assert_eq!(a, b);
        assert_ne!(a.xi, c.xi);
    }

    #[test]
    fn bernoulli_examples() {
        let v = bernoulli_loglik(&[1.0 - 1e-6], &[1.0]).unwrap();
        assert!(v.abs() < 2e-6);
        let v = bernoulli_loglik(&[0.5], &[0.5]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        assert!((v + 0.69315).abs() < 1e-5);
        assert!(bernoulli_loglik(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bernoulli_logit_gradient_matches_finite_differences() {
        let logits = [-2.0, -0.3, 0.0, 0.8, 3.1];
        let x = [0.0, 1.0, 0.25, 0.9, 1.0];
        let (_, g) = bernoulli_loglik_logits(&logits, &x).unwrap();
        let r = grad_check(
            |l| Ok(bernoulli_loglik_logits(l, &x)?.0),
            &logits,
            &g,
            None,
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn gaussian_examples() {
        let v = gaussian_loglik(&[0.3], &[0.3]).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((v + 0.91894).abs() < 1e-5);
        let x = [0.1, 0.2, 0.3, 0.4];
        let shifted: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let exact = gaussian_loglik(&x, &x).unwrap();
        let off = gaussian_loglik(&shifted, &x).unwrap();
        assert!((off - (exact - 0.5 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_ascent_recovers_data() {
        let x = [0.2, 0.9, 0.4];
        let mut decoded = vec![0.0; 3];
        for _ in 0..200 {
            let (_, g) = gaussian_loglik_grad(&decoded, &x).unwrap();
            for (d, gi) in decoded.iter_mut().zip(g) {
                *d += 0.1 * gi;
            }
        }
        for (d, xi) in decoded.iter().zip(x) {
            assert!((d - xi).abs() < 1e-8);
        }
    }
}
