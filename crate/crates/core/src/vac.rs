//! Classifier side of the model: the joint objective, mean-path
//! prediction and accuracy.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Result, VacError};
use crate::model::VacModel;
use crate::nn::softmax;
use crate::tensor::Tensor;
use crate::vae::{objective, ElboTerms, NoiseDraws, TrainConfig};

/// Joint objective with the classifier log-likelihood and ℓ1 penalty.
pub fn vac_elbo(
    x: &Tensor,
    labels: &[usize],
    model: &VacModel,
    cfg: &TrainConfig,
    c: f64,
    noise: &NoiseDraws,
) -> Result<ElboTerms> {
    Ok(objective(model, x, Some(labels), cfg, c, noise, false)?.0)
}

/// Class probabilities `p(y | z = μ(x))`, one row per image.
pub fn predict(x: &Tensor, model: &VacModel) -> Result<Vec<Vec<f64>>> {
    let (mu, _) = model.encode(x)?;
    let logits = model.classify_logits(&mu)?;
    Ok((0..logits.batch()).map(|i| softmax(logits.item(i))).collect())
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Predicted class of every image, evaluated in parallel chunks.
pub fn predict_classes(x: &Tensor, model: &VacModel, chunk: usize) -> Result<Vec<usize>> {
    let b = x.batch();
    let starts: Vec<usize> = (0..b).step_by(chunk.max(1)).collect();
    let parts: Vec<Result<Vec<usize>>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(b)).collect();
            Ok(predict(&x.select(&idx), model)?.iter().map(|p| argmax(p)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(b);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of correct predictions.
pub fn accuracy_of(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(VacError::Data("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate_accuracy(dataset: &Dataset, model: &VacModel) -> Result<f64> {
    if dataset.is_empty() {
        return Err(VacError::Data("accuracy of an empty set".into()));
    }
    accuracy_of(&predict_classes(&dataset.images, model, 32)?, &dataset.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn accuracy_extremes() {
        assert_eq!(accuracy_of(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy_of(&[0, 1, 2], &[1, 2, 0]).unwrap(), 0.0);
        assert!(accuracy_of(&[], &[]).is_err());
    }
}
