//! Attack detection by one-dimensional logistic regression on the
//! reconstruction error.

use crate::attack::{pgd_parallel, AttackConfig};
use crate::data::{Dataset, Split};
use crate::distributions::sigmoid;
use crate::error::{Result, VacError};
use crate::model::{LikelihoodHead, VacModel};
use crate::vae::reconstruction_errors;

/// `P(adversarial | e) = sigmoid(weight·e + bias)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorModel {
    pub weight: f64,
    pub bias: f64,
}

impl DetectorModel {
    pub const ZERO: Self = Self { weight: 0.0, bias: 0.0 };

    pub fn probability(&self, error: f64) -> f64 {
        sigmoid(self.weight * error + self.bias)
    }

    /// Flags `error` as adversarial when the probability exceeds one half.
    pub fn is_adversarial(&self, error: f64) -> bool {
        self.weight * error + self.bias > 0.0
    }

    /// Error value at which the decision flips (`None` for a flat detector).
    pub fn threshold(&self) -> Option<f64> {
        (self.weight != 0.0).then(|| -self.bias / self.weight)
    }
}

/// Cap on the weight, in units of standardized error.
pub const WEIGHT_CAP: f64 = 1e3;
pub const FIT_TOL: f64 = 1e-8;
pub const FIT_MAX_ITERS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorFit {
    pub model: DetectorModel,
    pub iterations: usize,
    /// The two populations are split by a single threshold.
    pub separable: bool,
    /// Every value is identical; the detector carries no information.
    pub degenerate: bool,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Maximum-likelihood logistic fit with labels clean = 0, adversarial = 1.
///
/// Errors are standardized internally, so refitting on affinely rescaled
/// errors yields the same decisions. Separable inputs get the capped
/// weight with the threshold midway across the gap.
pub fn fit_detector(clean: &[f64], adv: &[f64]) -> Result<DetectorFit> {
    if clean.is_empty() || adv.is_empty() {
        return Err(VacError::Data("detector fit needs both clean and adversarial errors".into()));
    }
    if clean.iter().chain(adv).any(|v| !v.is_finite()) {
        return Err(VacError::numeric("reconstruction errors fed to the detector"));
    }
    let all = clean.iter().chain(adv).copied();
    let (mean, std) = mean_std(all);
    let prior_bias = (adv.len() as f64 / clean.len() as f64).ln();
    if std == 0.0 {
        log::warn!("detector fit is degenerate: every reconstruction error equals {mean}");
        return Ok(DetectorFit {
            model: DetectorModel { weight: 0.0, bias: prior_bias },
            iterations: 0,
            separable: false,
            degenerate: true,
        });
    }
    let std_of = |v: f64| (v - mean) / std;
    let to_raw = |w: f64, b: f64| DetectorModel {
        weight: w / std,
        bias: b - w * mean / std,
    };

    let (cmin, cmax) = min_max(clean);
    let (amin, amax) = min_max(adv);
    let gap = if cmax < amin {
        Some(((std_of(cmax) + std_of(amin)) / 2.0, 1.0))
    } else if amax < cmin {
        Some(((std_of(amax) + std_of(cmin)) / 2.0, -1.0))
    } else {
        None
    };
    if let Some((mid, sign)) = gap {
        let w = sign * WEIGHT_CAP;
        return Ok(DetectorFit {
            model: to_raw(w, -w * mid),
            iterations: 0,
            separable: true,
            degenerate: false,
        });
    }

    // In standardized units the mean log-likelihood has curvature at most
    // 1/4 along either coordinate, so a step of 4 is stable.
    let n = (clean.len() + adv.len()) as f64;
    let samples: Vec<(f64, f64)> = clean
        .iter()
        .map(|&e| (std_of(e), 0.0))
        .chain(adv.iter().map(|&e| (std_of(e), 1.0)))
        .collect();
    let (mut w, mut b) = (0.0f64, prior_bias);
    let mut iterations = 0;
    while iterations < FIT_MAX_ITERS {
        let (mut gw, mut gb) = (0.0, 0.0);
        for &(t, y) in &samples {
            let r = y - sigmoid(w * t + b);
            gw += r * t;
            gb += r;
        }
        gw /= n;
        gb /= n;
        iterations += 1;
        if gw.hypot(gb) < FIT_TOL {
            break;
        }
        w = (w + 4.0 * gw).clamp(-WEIGHT_CAP, WEIGHT_CAP);
        b += 4.0 * gb;
    }
    if !(w.is_finite() && b.is_finite()) {
        return Err(VacError::numeric("detector parameters"));
    }
    Ok(DetectorFit {
        model: to_raw(w, b),
        iterations,
        separable: false,
        degenerate: false,
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Balanced classification rate: the larger population is truncated to the
/// size of the smaller before counting correct decisions.
pub fn detection_rate(model: &DetectorModel, clean: &[f64], adv: &[f64]) -> Result<f64> {
    let n = clean.len().min(adv.len());
    if n == 0 {
        return Err(VacError::Data("detection rate of an empty set".into()));
    }
    let correct = clean[..n].iter().filter(|&&e| !model.is_adversarial(e)).count()
        + adv[..n].iter().filter(|&&e| model.is_adversarial(e)).count();
    Ok(correct as f64 / (2 * n) as f64)
}

/// Reconstruction errors of clean inputs and of their adversarial
/// counterparts at each ε, all from one split.
#[derive(Clone, Debug)]
pub struct ErrorSet {
    pub split: Split,
    pub clean: Vec<f64>,
    pub adversarial: Vec<(f64, Vec<f64>)>,
}

impl ErrorSet {
    fn at(&self, eps: f64) -> Result<&[f64]> {
        self.adversarial
            .iter()
            .find(|(e, _)| *e == eps)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| VacError::Data(format!("no adversarial errors for epsilon {eps}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DetectorMode {
    /// One detector per ε.
    #[default]
    PerEpsilon,
    /// A single detector fit on the adversarial errors of every ε.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionRow {
    pub epsilon: f64,
    pub n_clean: usize,
    pub n_adv: usize,
    pub detector: DetectorModel,
    pub rate: f64,
    pub mean_clean_error: f64,
    pub mean_adv_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DetectionReport {
    pub rows: Vec<DetectionRow>,
}

pub const REPORT_HEADER: &str = "epsilon,n_clean,n_adv,detector_weight,detector_bias,detection_rate";

impl DetectionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epsilon, r.n_clean, r.n_adv, r.detector.weight, r.detector.bias, r.rate
            ));
        }
        s
    }

    pub fn rate_at(&self, eps: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.epsilon == eps).map(|r| r.rate)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Fits on `fit` (training split) and evaluates on `eval` (test split).
pub fn detection_report(fit: &ErrorSet, eval: &ErrorSet, epsilons: &[f64], mode: DetectorMode) -> Result<DetectionReport> {
    if fit.split != Split::Train || eval.split != Split::Test {
        return Err(VacError::Config(
            "detectors are fit on training-split errors and evaluated on test-split errors".into(),
        ));
    }
    let mut sorted = epsilons.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pooled = match mode {
        DetectorMode::PerEpsilon => None,
        DetectorMode::Pooled => {
            let mut all = Vec::new();
            for &e in &sorted {
                all.extend_from_slice(fit.at(e)?);
            }
            Some(fit_detector(&fit.clean, &all)?.model)
        }
    };
    let mut rows = Vec::with_capacity(sorted.len());
    for eps in sorted {
        let detector = match pooled {
            Some(d) => d,
            None => fit_detector(&fit.clean, fit.at(eps)?)?.model,
        };
        let adv = eval.at(eps)?;
        let n = eval.clean.len().min(adv.len());
        rows.push(DetectionRow {
            epsilon: eps,
            n_clean: n,
            n_adv: n,
            detector,
            rate: detection_rate(&detector, &eval.clean, adv)?,
            mean_clean_error: mean(&eval.clean[..n]),
            mean_adv_error: mean(&adv[..n]),
        });
    }
    Ok(DetectionReport { rows })
}

/// Reconstruction errors of `dataset` and of its PGD counterparts.
pub fn error_set(
    dataset: &Dataset,
    model: &VacModel,
    head: LikelihoodHead,
    attack: &AttackConfig,
    epsilons: &[f64],
) -> Result<ErrorSet> {
    let clean = reconstruction_errors(&dataset.images, model, head, 32)?;
    let mut adversarial = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let adv = pgd_parallel(&dataset.images, &dataset.labels, model, &attack.with_epsilon(eps), 8)?;
        adversarial.push((eps, reconstruction_errors(&adv, model, head, 32)?));
    }
    Ok(ErrorSet {
        split: dataset.split,
        clean,
        adversarial,
    })
}

/// Attacks both splits, fits detectors on the training errors and reports
/// detection rates on the test errors.
pub fn detect_pipeline(
    model: &VacModel,
    head: LikelihoodHead,
    train: &Dataset,
    test: &Dataset,
    attack: &AttackConfig,
    epsilons: &[f64],
    mode: DetectorMode,
) -> Result<DetectionReport> {
    let fit = error_set(train, model, head, attack, epsilons)?;
    let eval = error_set(test, model, head, attack, epsilons)?;
    detection_report(&fit, &eval, epsilons, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_zero_one() {
        let clean = [0.0; 5];
        let adv = [1.0; 5];
        let fit = fit_detector(&clean, &adv).unwrap();
        assert!(fit.separable);
        let t = fit.model.threshold().unwrap();
        assert!(t > 0.0 && t < 1.0, "{t}");
        assert_eq!(detection_rate(&fit.model, &clean, &adv).unwrap(), 1.0);
    }

    #[test]
    fn bracketed_threshold() {
        let fit = fit_detector(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        let t = fit.model.threshold().unwrap();
        assert!(t > 0.2 && t < 0.8);
    }

    #[test]
    fn overlapping_fit_converges() {
        let clean = [0.1, 0.2, 0.3, 0.5];
        let adv = [0.25, 0.4, 0.6, 0.7];
        let fit = fit_detector(&clean, &adv).unwrap();
        assert!(!fit.separable);
        assert!(fit.iterations < FIT_MAX_ITERS);
        assert!(fit.model.weight > 0.0);
    }

    #[test]
    fn zero_detector_is_a_coin_flip() {
        let r = detection_rate(&DetectorModel::ZERO, &[0.1, 0.5, 0.2], &[0.3, 0.9, 0.4]).unwrap();
        assert_eq!(r, 0.5);
    }

    #[test]
    fn constant_inputs_are_degenerate() {
        let fit = fit_detector(&[0.3, 0.3], &[0.3, 0.3]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.model.weight, 0.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(fit_detector(&[], &[1.0]).is_err());
        assert!(detection_rate(&DetectorModel::ZERO, &[], &[1.0]).is_err());
    }

    #[test]
    fn splits_are_enforced() {
        let set = ErrorSet {
            split: Split::Test,
            clean: vec![0.1],
            adversarial: vec![(0.1, vec![0.2])],
        };
        assert!(detection_report(&set, &set, &[0.1], DetectorMode::PerEpsilon).is_err());
    }
}
