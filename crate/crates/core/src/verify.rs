//! Finite-difference checks of every differentiable operation and of the
//! full objective, on small randomly drawn inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::synthetic_blobs;
use crate::distributions::{
    bernoulli_loglik_logits, gaussian_loglik_grad, kl_to_standard, kl_to_standard_grad, reparam_backward,
    reparam_sample, DiagonalGaussian, NoiseDraw,
};
use crate::error::Result;
use crate::model::{ArchConfig, LikelihoodHead, Pooling, VacModel};
use crate::nn::gradcheck::{grad_check, grad_check_floored, GradCheckReport, DEFAULT_STEP};
use crate::nn::{softmax_cross_entropy, Conv2d, Layer, Linear, ParamSet, Sequential};
use crate::rng;
use crate::tensor::Tensor;
use crate::vae::{objective, NoiseDraws, Reduction, TrainConfig};

pub const TOLERANCE: f64 = 1e-5;

/// Names of the checks produced by [`all_checks`], in order.
pub const CHECK_NAMES: [&str; 16] = [
    "conv2d/input",
    "conv2d/params",
    "conv2d-stride2/input",
    "conv2d-stride2/params",
    "linear/input",
    "linear/params",
    "relu",
    "upsample2x",
    "global-avg-pool",
    "softmax-cross-entropy",
    "kl-standard-normal",
    "reparametrization",
    "bernoulli-loglik",
    "gaussian-loglik",
    "objective/bernoulli-supervised",
    "objective/gaussian-mean",
];

fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn check(
    f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    grad_check(f, point, analytic, indices, DEFAULT_STEP, TOLERANCE)
}

/// `f(x) = Σ r·layer(x)` checked against the input and parameter gradients.
fn layer_checks(layer: &Layer, params: &ParamSet, x: Tensor, r: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let out_shape = layer.output_shape(x.shape())?;
    let proj = Tensor::new(out_shape, normals(r, layer.output_shape(x.shape())?.iter().product()))?;
    let dot = |a: &Tensor| a.data().iter().zip(proj.data()).map(|(u, v)| u * v).sum::<f64>();
    let (_, cache) = layer.forward(params, &x)?;
    let mut grads = params.grad_buffer();
    let dx = layer.backward(params, &cache, &proj, Some(&mut grads))?;
    let shape = x.shape().to_vec();
    let mut reports = vec![check(
        |p| Ok(dot(&layer.forward(params, &Tensor::new(shape.clone(), p.to_vec())?)?.0)),
        x.data(),
        dx.data(),
        None,
    )?];
    if !params.is_empty() {
        let mut ps = params.clone();
        reports.push(check(
            |p| {
                ps.set_flat_values(p)?;
                Ok(dot(&layer.forward(&ps, &x)?.0))
            },
            &params.flat_values(),
            &grads.flat(),
            None,
        )?);
    }
    Ok(reports)
}

fn randomized(mut params: ParamSet, r: &mut ChaCha8Rng) -> Result<ParamSet> {
    let v = normals(r, params.numel());
    params.set_flat_values(&v)?;
    Ok(params)
}

/// Inputs bounded away from the ReLU kink by more than the difference step.
fn off_kink(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    normals(r, n)
        .into_iter()
        .map(|v: f64| v.signum() * (v.abs() + 0.05))
        .collect()
}

fn tiny_arch(pooling: Pooling) -> ArchConfig {
    ArchConfig {
        channels: 1,
        height: 8,
        width: 8,
        conv_widths: vec![3, 4],
        latent_dim: 3,
        classifier_hidden: vec![5, 4],
        num_classes: 2,
        pooling,
    }
}

/// Smallest `|input|` seen by any ReLU of `net`.
fn relu_margin(net: &Sequential, params: &ParamSet, x: &Tensor) -> Result<(f64, Tensor)> {
    let mut margin = f64::INFINITY;
    let mut h = x.clone();
    for (_, layer) in net.layers() {
        if matches!(layer, Layer::Relu) {
            margin = h.data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
        h = layer.forward(params, &h)?.0;
    }
    Ok((margin, h))
}

/// Distance of the objective from its nearest kink (ReLU inputs, `kl − c`,
/// penalized weights) on this batch and noise.
fn kink_margin(model: &VacModel, x: &Tensor, noise: &NoiseDraws, cfg: &TrainConfig, c: f64) -> Result<f64> {
    let (mut margin, feat) = relu_margin(&model.trunk, &model.params, x)?;
    let mu = model.mu_head.infer(&model.params, &feat)?;
    let logvar = model.logvar_head.infer(&model.params, &feat)?;
    let d = model.arch.latent_dim;
    let kl_scale = cfg.reduction.kl_scale(d);
    for i in 0..x.batch() {
        let q = DiagonalGaussian::new(mu.item(i).to_vec(), logvar.item(i).to_vec())?;
        margin = margin.min((kl_to_standard(&q) * kl_scale - c).abs());
    }
    if cfg.l1_strength > 0.0 {
        for p in model.classifier_weights() {
            margin = p.value.data().iter().fold(margin, |m, w| m.min(w.abs()));
        }
    }
    for xi in &noise.draws {
        let mut z = mu.clone();
        for ((zv, &e), &lv) in z.data_mut().iter_mut().zip(xi.data()).zip(logvar.data()) {
            *zv += e * (0.5 * lv).exp();
        }
        margin = margin.min(relu_margin(&model.decoder, &model.params, &z)?.0);
        margin = margin.min(relu_margin(&model.classifier, &model.params, &z)?.0);
    }
    Ok(margin)
}

/// Relative-error floor for the objective, as a fraction of the largest
/// gradient component. Differencing a sum of hundreds of log-likelihood
/// terms cannot resolve components far below it.
pub const OBJECTIVE_FLOOR: f64 = 1e-4;

/// Required distance from every ReLU kink at the checked point.
const KINK_MARGIN: f64 = 1e-4;

/// Checks `∂(−objective)` on 40 random parameters of a tiny model with
/// frozen noise. Biases are redrawn until no ReLU sits within
/// [`KINK_MARGIN`] of its kink, where the objective is not differentiable.
pub fn objective_check(cfg: &TrainConfig, c: f64, supervised: bool, pooling: Pooling, seed: u64) -> Result<GradCheckReport> {
    let ds = synthetic_blobs(4, 8, 0.2, seed)?;
    let noise = NoiseDraws::generate(seed, 3, 4, cfg.mc_samples, 3);
    let labels = supervised.then_some(ds.labels.as_slice());
    let mut model = VacModel::new(tiny_arch(pooling), seed)?;
    let mut r = rng::stream(seed, &[0x6c6b]);
    for attempt in 0.. {
        for p in model.params.iter_mut() {
            if p.name.ends_with(".bias") {
                let v = normals(&mut r, p.value.len());
                p.value.data_mut().iter_mut().zip(v).for_each(|(b, n)| *b = 0.1 * n);
            }
        }
        if kink_margin(&model, &ds.images, &noise, cfg, c)? > KINK_MARGIN || attempt == 50 {
            break;
        }
    }
    let (_, grads) = objective(&model, &ds.images, labels, cfg, c, &noise, true)?;
    let analytic = grads.expect("requested gradients").flat();
    let point = model.params.flat_values();
    let idx: Vec<usize> = (0..40).map(|_| r.random_range(0..point.len())).collect();
    let floor = OBJECTIVE_FLOOR * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    grad_check_floored(
        |p| {
            model.params.set_flat_values(p)?;
            Ok(-objective(&model, &ds.images, labels, cfg, c, &noise, false)?.0.objective)
        },
        &point,
        &analytic,
        Some(&idx),
        DEFAULT_STEP,
        TOLERANCE,
        floor,
    )
}

/// One random case of every check, keyed by `seed`. Entries follow
/// [`CHECK_NAMES`].
pub fn all_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = rng::stream(seed, &[0x6763]);
    let mut reports = Vec::new();

    for stride in [1, 2] {
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, "encoder.conv", 2, 3, 3, stride, 1, &mut r)?;
        let ps = randomized(ps, &mut r)?;
        let x = Tensor::new(vec![2, 2, 5, 5], normals(&mut r, 100))?;
        reports.extend(layer_checks(&Layer::Conv2d(conv), &ps, x, &mut r)?);
    }

    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, "classifier.fc", 4, 3, &mut r)?;
    let ps = randomized(ps, &mut r)?;
    let x = Tensor::new(vec![3, 4], normals(&mut r, 12))?;
    reports.extend(layer_checks(&Layer::Linear(lin), &ps, x, &mut r)?);

    let empty = ParamSet::new();
    let x = Tensor::new(vec![2, 3, 2, 2], off_kink(&mut r, 24))?;
    reports.extend(layer_checks(&Layer::Relu, &empty, x, &mut r)?);
    let x = Tensor::new(vec![2, 2, 3, 3], normals(&mut r, 36))?;
    reports.extend(layer_checks(&Layer::Upsample2x, &empty, x, &mut r)?);
    let x = Tensor::new(vec![2, 3, 3, 3], normals(&mut r, 54))?;
    reports.extend(layer_checks(&Layer::GlobalAvgPool, &empty, x, &mut r)?);

    let logits = normals(&mut r, 12);
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    let t = Tensor::new(vec![3, 4], logits.clone())?;
    let (_, g) = softmax_cross_entropy(&t, &labels)?;
    reports.push(check(
        |p| Ok(softmax_cross_entropy(&Tensor::new(vec![3, 4], p.to_vec())?, &labels)?.0),
        &logits,
        g.data(),
        None,
    )?);

    let mu = normals(&mut r, 4);
    let logvar: Vec<f64> = normals(&mut r, 4).into_iter().map(|v| 0.5 * v).collect();
    let split = |p: &[f64]| DiagonalGaussian::new(p[..4].to_vec(), p[4..].to_vec());
    let point: Vec<f64> = mu.iter().chain(&logvar).copied().collect();
    let q = split(&point)?;
    let (gm, gl) = kl_to_standard_grad(&q);
    let analytic: Vec<f64> = gm.into_iter().chain(gl).collect();
    reports.push(check(|p| Ok(kl_to_standard(&split(p)?)), &point, &analytic, None)?);

    let noise = NoiseDraw::fixed(normals(&mut r, 4));
    let proj = normals(&mut r, 4);
    let (dm, dl) = reparam_backward(&q, &noise, &proj);
    let analytic: Vec<f64> = dm.into_iter().chain(dl).collect();
    reports.push(check(
        |p| {
            let z = reparam_sample(&split(p)?, &noise)?;
            Ok(z.iter().zip(&proj).map(|(a, b)| a * b).sum())
        },
        &point,
        &analytic,
        None,
    )?);

    let x: Vec<f64> = (0..6).map(|_| r.random::<f64>()).collect();
    let logits = normals(&mut r, 6);
    let (_, g) = bernoulli_loglik_logits(&logits, &x)?;
    reports.push(check(|p| Ok(bernoulli_loglik_logits(p, &x)?.0), &logits, &g, None)?);
    let decoded = normals(&mut r, 6);
    let (_, g) = gaussian_loglik_grad(&decoded, &x)?;
    reports.push(check(|p| Ok(gaussian_loglik_grad(p, &x)?.0), &decoded, &g, None)?);

    let supervised = TrainConfig {
        beta: 3.0,
        l1_strength: 0.05,
        mc_samples: 2,
        ..TrainConfig::default()
    };
    reports.push(objective_check(&supervised, 0.5, true, Pooling::GlobalAverage, seed)?);
    let gaussian = TrainConfig {
        beta: 3.0,
        likelihood: LikelihoodHead::Gaussian,
        reduction: Reduction::Mean,
        ..TrainConfig::default()
    };
    reports.push(objective_check(&gaussian, 0.1, false, Pooling::Flatten, seed)?);

    debug_assert_eq!(reports.len(), CHECK_NAMES.len());
    Ok(CHECK_NAMES.into_iter().zip(reports).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for seed in 0..3 {
            for (name, rep) in all_checks(seed).unwrap() {
                assert!(rep.passed(), "{name} seed {seed}: {}", rep.max_rel_error);
            }
        }
    }
}
