//! The capacity-constrained variational objective, its gradient, and the
//! training loop shared by the unsupervised and the classifying model.

use rayon::prelude::*;

use crate::data::{batches, BatchPlan, Dataset};
use crate::distributions::{bernoulli_loglik_logits, gaussian_loglik_grad, kl_to_standard, DiagonalGaussian, NoiseDraw};
use crate::error::{Result, VacError};
use crate::model::{LikelihoodHead, VacModel};
use crate::nn::{log_softmax, sgd_step, softmax, Grads, OptimizerConfig, ParamGroup, ParamKind};
use crate::rng;
use crate::tensor::Tensor;

/// How per-sample sums over pixels (reconstruction) and latent dimensions
/// (KL) are normalized before entering the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Plain sums.
    #[default]
    Sum,
    /// Reconstruction averaged over pixels and KL averaged over latent
    /// dimensions, so `C` is a per-dimension capacity.
    Mean,
}

impl Reduction {
    pub fn recon_scale(self, pixels: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / pixels as f64,
        }
    }

    pub fn kl_scale(self, latent: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / latent as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mc_samples: usize,
    pub beta: f64,
    pub capacity: f64,
    /// Iterations over which `c` ramps from 0 to `capacity`; `None` ramps
    /// over the first half of training.
    pub capacity_ramp_iters: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    /// Strength of the absolute-value penalty on classifier weights.
    pub l1_strength: f64,
    pub likelihood: LikelihoodHead,
    pub reduction: Reduction,
    /// Samples per parallel work unit. Partial sums are combined in a fixed
    /// order, so results do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            mc_samples: 1,
            beta: 1000.0,
            capacity: 1.0,
            capacity_ramp_iters: None,
            epochs: 60,
            seed: 0,
            l1_strength: 0.0,
            likelihood: LikelihoodHead::Bernoulli,
            reduction: Reduction::Sum,
            chunk_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VacError::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.capacity >= 0.0) {
            return bad("capacity must be non-negative");
        }
        if self.capacity_ramp_iters == Some(0) {
            return bad("capacity_ramp_iters must be positive");
        }
        if !(self.l1_strength >= 0.0 && self.l1_strength.is_finite()) {
            return bad("l1_strength must be finite and non-negative");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive");
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn ramp_iters(&self, n: usize) -> usize {
        self.capacity_ramp_iters
            .unwrap_or_else(|| (self.epochs * self.iterations_per_epoch(n) / 2).max(1))
    }
}

/// Objective terms, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub recon_loglik: f64,
    pub kl: f64,
    pub capacity_penalty: f64,
    pub class_loglik: f64,
    pub l1_penalty: f64,
    pub objective: f64,
}

impl ElboTerms {
    fn finish(mut self) -> Self {
        self.objective = self.recon_loglik + self.class_loglik - self.capacity_penalty - self.l1_penalty;
        self
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("recon_loglik", self.recon_loglik),
            ("kl", self.kl),
            ("capacity_penalty", self.capacity_penalty),
            ("class_loglik", self.class_loglik),
            ("l1_penalty", self.l1_penalty),
        ] {
            if !v.is_finite() {
                return Err(VacError::numeric(format!("objective term `{name}`")));
            }
        }
        Ok(())
    }
}

/// `c = C·min(1, j/ramp)`.
pub fn linear_schedule(capacity: f64, iteration: usize, ramp: usize) -> f64 {
    capacity * (iteration as f64 / ramp.max(1) as f64).min(1.0)
}

/// `M` standard-normal draws for every sample of a batch: `draws[m]` has
/// shape `[b, d]`.
#[derive(Clone, Debug)]
pub struct NoiseDraws {
    pub draws: Vec<Tensor>,
}

impl NoiseDraws {
    /// Draw `m` of batch position `i` is keyed by `(seed, iteration, i, m)`.
    pub fn generate(seed: u64, iteration: usize, batch: usize, mc_samples: usize, dim: usize) -> Self {
        let key = rng::mix_seed(seed, &[iteration as u64]);
        let draws = (0..mc_samples)
            .map(|m| {
                let mut data = Vec::with_capacity(batch * dim);
                for i in 0..batch {
                    data.extend(NoiseDraw::generate(key, i as u64, m as u64, dim).xi);
                }
                Tensor::new(vec![batch, dim], data).expect("noise shape")
            })
            .collect();
        Self { draws }
    }

    /// All-zero noise: every draw is the mean path.
    pub fn zeros(batch: usize, mc_samples: usize, dim: usize) -> Self {
        Self {
            draws: vec![Tensor::zeros(&[batch, dim]); mc_samples],
        }
    }

    pub fn mc_samples(&self) -> usize {
        self.draws.len()
    }

    fn rows(&self, idx: &[usize]) -> Self {
        Self {
            draws: self.draws.iter().map(|t| t.select(idx)).collect(),
        }
    }
}

fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batch-summed terms (before averaging) for a chunk of samples, plus the
/// gradient of the negated chunk objective when requested.
struct ChunkResult {
    recon: f64,
    kl: f64,
    penalty: f64,
    class: f64,
    grads: Option<Grads>,
}

#[allow(clippy::too_many_arguments)]
fn chunk_objective(
    model: &VacModel,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &TrainConfig,
    c: f64,
    noise: &NoiseDraws,
    weight: f64,
    want_grads: bool,
) -> Result<ChunkResult> {
    let b = x.batch();
    let d = model.arch.latent_dim;
    let pixels = model.arch.pixels();
    let m_count = noise.mc_samples();
    let recon_scale = cfg.reduction.recon_scale(pixels);
    let kl_scale = cfg.reduction.kl_scale(d);
    let mc = 1.0 / m_count as f64;

    let (mu, logvar, etrace) = model.encode_traced(x)?;
    let mut grads = want_grads.then(|| model.params.grad_buffer());
    let mut dmu = Tensor::zeros(&[b, d]);
    let mut dlogvar = Tensor::zeros(&[b, d]);
    let (mut recon, mut kl_sum, mut penalty, mut class) = (0.0, 0.0, 0.0, 0.0);

    let posts: Vec<DiagonalGaussian> = (0..b)
        .map(|i| DiagonalGaussian::new(mu.item(i).to_vec(), logvar.item(i).to_vec()))
        .collect::<Result<_>>()?;

    for (i, q) in posts.iter().enumerate() {
        let kl = kl_to_standard(q) * kl_scale;
        kl_sum += kl;
        penalty += cfg.beta * (kl - c).abs();
        if want_grads {
            // d(β|kl − c|)/d kl, with the kink at kl = c treated as flat
            let g = weight * cfg.beta * sign_or_zero(kl - c) * kl_scale;
            for (k, (&m, &lv)) in q.mu().iter().zip(q.logvar()).enumerate() {
                dmu.item_mut(i)[k] += g * m;
                dlogvar.item_mut(i)[k] += g * 0.5 * (lv.exp() - 1.0);
            }
        }
    }

    for xi in &noise.draws {
        xi.expect_shape("noise draw", &[b, d])?;
        let mut z = mu.clone();
        for ((zv, &e), &lv) in z.data_mut().iter_mut().zip(xi.data()).zip(logvar.data()) {
            *zv += e * (0.5 * lv).exp();
        }

        let (raw, dtrace) = model.decode_traced(&z)?;
        let mut draw = Tensor::zeros(raw.shape());
        for i in 0..b {
            let (value, grad) = match cfg.likelihood {
                LikelihoodHead::Bernoulli => bernoulli_loglik_logits(raw.item(i), x.item(i))?,
                LikelihoodHead::Gaussian => gaussian_loglik_grad(raw.item(i), x.item(i))?,
            };
            recon += value * recon_scale * mc;
            for (dst, g) in draw.item_mut(i).iter_mut().zip(grad) {
                *dst = -g * recon_scale * mc * weight;
            }
        }
        let mut dz = if want_grads {
            model.decoder_backward(&dtrace, &draw, grads.as_mut())?
        } else {
            Tensor::zeros(&[b, d])
        };

        if let Some(labels) = labels {
            let (logits, ctrace) = model.classify_traced(&z)?;
            let classes = logits.item_len();
            let mut dlogits = Tensor::zeros(logits.shape());
            for (i, &y) in labels.iter().enumerate() {
                if y >= classes {
                    return Err(VacError::Data(format!("label {y} out of range for {classes} classes")));
                }
                class += log_softmax(logits.item(i))[y] * mc;
                let p = softmax(logits.item(i));
                for (k, dst) in dlogits.item_mut(i).iter_mut().enumerate() {
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    *dst = -(onehot - p[k]) * mc * weight;
                }
            }
            if want_grads {
                let dzc = model.classifier_backward(&ctrace, &dlogits, grads.as_mut())?;
                dz.add_assign(&dzc)?;
            }
        }

        if want_grads {
            for k in 0..b * d {
                let g = dz.data()[k];
                dmu.data_mut()[k] += g;
                dlogvar.data_mut()[k] += g * 0.5 * xi.data()[k] * (0.5 * logvar.data()[k]).exp();
            }
        }
    }

    if want_grads {
        model.encoder_backward(&etrace, &dmu, Some(&dlogvar), grads.as_mut())?;
    }
    Ok(ChunkResult {
        recon,
        kl: kl_sum,
        penalty,
        class,
        grads,
    })
}

/// `l1 · Σ|w|` over classifier weights.
pub fn l1_penalty(model: &VacModel, strength: f64) -> f64 {
    if strength == 0.0 {
        return 0.0;
    }
    strength
        * model
            .classifier_weights()
            .flat_map(|p| p.value.data().iter())
            .map(|w| w.abs())
            .sum::<f64>()
}

fn add_l1_grad(model: &VacModel, strength: f64, grads: &mut Grads) {
    if strength == 0.0 {
        return;
    }
    for id in model.params.ids() {
        let p = model.params.get(id);
        if p.group == ParamGroup::Classifier && p.kind == ParamKind::Weight {
            for (g, &w) in grads.get_mut(id).data_mut().iter_mut().zip(p.value.data()) {
                *g += strength * sign_or_zero(w);
            }
        }
    }
}

/// Evaluates the batch-averaged objective and, if `want_grads`, the
/// gradient of its negation (the descent direction `sgd_step` expects).
///
/// `labels = None` gives the unsupervised objective (no classifier term).
pub fn objective(
    model: &VacModel,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &TrainConfig,
    c: f64,
    noise: &NoiseDraws,
    want_grads: bool,
) -> Result<(ElboTerms, Option<Grads>)> {
    let b = x.batch();
    if b == 0 {
        return Err(VacError::Data("empty batch".into()));
    }
    if let Some(l) = labels {
        if l.len() != b {
            return Err(VacError::Data(format!("{b} images but {} labels", l.len())));
        }
    }
    let weight = 1.0 / b as f64;
    let starts: Vec<usize> = (0..b).step_by(cfg.chunk_size.max(1)).collect();
    let parts: Vec<Result<ChunkResult>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + cfg.chunk_size).min(b)).collect();
            let xs = x.select(&idx);
            let ls = labels.map(|l| &l[idx[0]..idx[0] + idx.len()]);
            chunk_objective(model, &xs, ls, cfg, c, &noise.rows(&idx), weight, want_grads)
        })
        .collect();

    let mut terms = ElboTerms::default();
    let mut grads: Option<Grads> = None;
    for part in parts {
        let part = part?;
        terms.recon_loglik += part.recon;
        terms.kl += part.kl;
        terms.capacity_penalty += part.penalty;
        terms.class_loglik += part.class;
        if let Some(g) = part.grads {
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => grads = Some(g),
            }
        }
    }
    terms.recon_loglik *= weight;
    terms.kl *= weight;
    terms.capacity_penalty *= weight;
    terms.class_loglik *= weight;
    terms.l1_penalty = if labels.is_some() { l1_penalty(model, cfg.l1_strength) } else { 0.0 };
    let terms = terms.finish();
    terms.check_finite()?;
    if let Some(g) = grads.as_mut() {
        if labels.is_some() {
            add_l1_grad(model, cfg.l1_strength, g);
        }
    }
    Ok((terms, grads))
}

/// The unsupervised objective `recon − β|kl − c|` for a batch.
pub fn beta_elbo(x: &Tensor, model: &VacModel, cfg: &TrainConfig, c: f64, noise: &NoiseDraws) -> Result<ElboTerms> {
    Ok(objective(model, x, None, cfg, c, noise, false)?.0)
}

/// One logged training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub epoch: usize,
    pub iteration: usize,
    pub c: f64,
    pub terms: ElboTerms,
}

pub const LOG_HEADER: &str = "epoch,iter,recon_loglik,kl,c,capacity_penalty,class_loglik,l1_penalty,objective";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.iteration, t.recon_loglik, t.kl, self.c, t.capacity_penalty, t.class_loglik, t.l1_penalty, t.objective
        )
    }
}

/// Runs `epochs·⌈N/B⌉` ascent steps. With `supervised` the classifier term
/// and the ℓ1 penalty join the objective. `on_iter` sees every iteration.
pub fn train(
    dataset: &Dataset,
    model: &mut VacModel,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    supervised: bool,
    mut on_iter: impl FnMut(&IterationLog),
) -> Result<Vec<IterationLog>> {
    cfg.validate()?;
    opt.validate()?;
    if dataset.is_empty() {
        return Err(VacError::Data("training set is empty".into()));
    }
    let n = dataset.len();
    let plan = BatchPlan {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    };
    let ramp = cfg.ramp_iters(n);
    let d = model.arch.latent_dim;
    let mut log = Vec::with_capacity(cfg.epochs * plan.num_batches(n));
    let mut iteration = 0;
    model.params.zero_grads();
    for epoch in 0..cfg.epochs {
        for idx in batches(n, &plan, epoch) {
            let batch = dataset.batch(&idx);
            let c = linear_schedule(cfg.capacity, iteration, ramp);
            let noise = NoiseDraws::generate(cfg.seed, iteration, idx.len(), cfg.mc_samples, d);
            let labels = supervised.then_some(batch.labels.as_slice());
            let (terms, grads) = objective(model, &batch.images, labels, cfg, c, &noise, true)
                .map_err(|e| e.within(format!("iteration {iteration}")))?;
            model.params.accumulate(&grads.expect("gradients requested"))?;
            sgd_step(&mut model.params, opt, epoch).map_err(|e| e.within(format!("iteration {iteration}")))?;
            let entry = IterationLog {
                epoch,
                iteration,
                c,
                terms,
            };
            on_iter(&entry);
            log.push(entry);
            iteration += 1;
        }
        if let Some(last) = log.last() {
            log::info!(
                "epoch {epoch}: objective {:.4} recon {:.4} kl {:.4} class {:.4}",
                last.terms.objective,
                last.terms.recon_loglik,
                last.terms.kl,
                last.terms.class_loglik
            );
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconstructMode {
    /// Decode `z = μ(x)`.
    MeanPath,
    /// Decode one reparametrized draw.
    Sampled,
}

/// Decoded images in `[0, 1]`. `Sampled` uses `noise` (shape `[b, d]`).
pub fn reconstruct(
    x: &Tensor,
    model: &VacModel,
    head: LikelihoodHead,
    mode: ReconstructMode,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let (mu, logvar) = model.encode(x)?;
    let z = match mode {
        ReconstructMode::MeanPath => mu,
        ReconstructMode::Sampled => {
            let xi = noise.ok_or_else(|| VacError::Config("sampled reconstruction needs noise".into()))?;
            xi.expect_shape("noise", mu.shape())?;
            let mut z = mu;
            for ((zv, &e), &lv) in z.data_mut().iter_mut().zip(xi.data()).zip(logvar.data()) {
                *zv += e * (0.5 * lv).exp();
            }
            z
        }
    };
    Ok(VacModel::to_pixels(&model.decode_raw(&z)?, head))
}

/// Per-pixel squared error between each image and its reconstruction.
pub fn mse_per_sample(x: &Tensor, x_hat: &Tensor) -> Result<Vec<f64>> {
    x_hat.expect_shape("reconstruction", x.shape())?;
    Ok((0..x.batch())
        .map(|i| {
            let (a, b) = (x.item(i), x_hat.item(i));
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
        })
        .collect())
}

/// Mean-path reconstruction error of every sample, evaluated in parallel
/// chunks of `chunk` samples.
pub fn reconstruction_errors(x: &Tensor, model: &VacModel, head: LikelihoodHead, chunk: usize) -> Result<Vec<f64>> {
    let b = x.batch();
    let starts: Vec<usize> = (0..b).step_by(chunk.max(1)).collect();
    let parts: Vec<Result<Vec<f64>>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(b)).collect();
            let xs = x.select(&idx);
            mse_per_sample(&xs, &reconstruct(&xs, model, head, ReconstructMode::MeanPath, None)?)
        })
        .collect();
    let mut out = Vec::with_capacity(b);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Average per-pixel MSE of the mean-path reconstruction.
pub fn reconstruction_error(x: &Tensor, model: &VacModel, head: LikelihoodHead) -> Result<f64> {
    let e = reconstruction_errors(x, model, head, 32)?;
    Ok(e.iter().sum::<f64>() / e.len().max(1) as f64)
}

/// One-dimensional linear-Gaussian model with a closed-form evidence:
/// `z ~ N(0, 1)`, `x | z ~ N(w·z + b, 1)`, hence `x ~ N(b, w² + 1)`.
#[derive(Clone, Copy, Debug)]
pub struct LinearGaussianToy {
    pub w: f64,
    pub b: f64,
    pub x: f64,
}

impl LinearGaussianToy {
    pub fn log_evidence(&self) -> f64 {
        let var = self.w * self.w + 1.0;
        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (self.x - self.b).powi(2) / var)
    }

    /// ELBO of `q = N(m, e^logvar)` with the expectation taken in closed
    /// form and the KL from [`kl_to_standard`].
    pub fn exact_elbo(&self, q: &DiagonalGaussian) -> f64 {
        let (m, s2) = (q.mu()[0], q.logvar()[0].exp());
        let half_ln2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let expected = -half_ln2pi - 0.5 * ((self.x - self.w * m - self.b).powi(2) + self.w * self.w * s2);
        expected - kl_to_standard(q)
    }

    /// Single-draw reparametrized ELBO estimate and its gradient with
    /// respect to `(m, logvar)`.
    pub fn sampled_elbo(&self, q: &DiagonalGaussian, noise: &NoiseDraw) -> Result<(f64, [f64; 2])> {
        let z = crate::distributions::reparam_sample(q, noise)?;
        let decoded = [self.w * z[0] + self.b];
        let (ll, dll) = gaussian_loglik_grad(&decoded, &[self.x])?;
        let dz = [dll[0] * self.w];
        let (dmu, dlv) = crate::distributions::reparam_backward(q, noise, &dz);
        let (kmu, klv) = crate::distributions::kl_to_standard_grad(q);
        Ok((ll - kl_to_standard(q), [dmu[0] - kmu[0], dlv[0] - klv[0]]))
    }

    /// The optimal posterior `N(w(x−b)/(w²+1), 1/(w²+1))`.
    pub fn optimal_posterior(&self) -> DiagonalGaussian {
        let var = 1.0 / (self.w * self.w + 1.0);
        DiagonalGaussian::new(vec![self.w * (self.x - self.b) * var], vec![var.ln()]).expect("finite")
    }
}
