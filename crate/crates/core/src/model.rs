//! The β-VAC network: convolutional encoder producing `(μ, logvar)`, a
//! mirrored decoder, and a perceptron classifier on the latent code.

use crate::distributions::sigmoid;
use crate::error::{Result, VacError};
use crate::nn::{Conv2d, Grads, Layer, Linear, ParamSet, Sequential, Trace};
use crate::rng;
use crate::tensor::Tensor;

/// Output likelihood `p(x|z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LikelihoodHead {
    /// Decoder emits logits; `p = sigmoid(logits)`.
    #[default]
    Bernoulli,
    /// Decoder emits the mean of `N(mean, I)`.
    Gaussian,
}

/// Layer sizes. The encoder is a stack of 3×3 convolutions (the first at
/// stride 1, the rest at stride 2) followed by pooling and two dense heads;
/// the decoder mirrors it with nearest upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_widths: Vec<usize>,
    pub latent_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
    pub pooling: Pooling,
}

/// How the last feature map is turned into the vector the heads read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    /// Channel means (`[c]`).
    #[default]
    GlobalAverage,
    /// The whole map (`[c·h·w]`).
    Flatten,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 28,
            width: 28,
            conv_widths: vec![16, 32, 48],
            latent_dim: 100,
            classifier_hidden: vec![64, 64],
            num_classes: 10,
            pooling: Pooling::GlobalAverage,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VacError::Config(format!("arch: {m}")));
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return bad("conv_widths must be non-empty and positive".into());
        }
        let factor = 1usize << (self.conv_widths.len() - 1);
        if self.height % factor != 0 || self.width % factor != 0 || self.height == 0 || self.width == 0 {
            return bad(format!(
                "input {}x{} not divisible by the downsampling factor {factor}",
                self.height, self.width
            ));
        }
        if self.latent_dim == 0 || self.num_classes < 2 || self.channels == 0 {
            return bad("latent_dim, channels must be positive and num_classes ≥ 2".into());
        }
        if self.classifier_hidden.contains(&0) {
            return bad("classifier widths must be positive".into());
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn bottom_hw(&self) -> (usize, usize) {
        let factor = 1usize << (self.conv_widths.len() - 1);
        (self.height / factor, self.width / factor)
    }
}

/// Saved state of an encoder forward pass.
pub struct EncoderTrace {
    trunk: Trace,
    mu: Trace,
    logvar: Trace,
}

#[derive(Clone, Debug)]
pub struct VacModel {
    pub arch: ArchConfig,
    pub params: ParamSet,
    pub(crate) trunk: Sequential,
    pub(crate) mu_head: Sequential,
    pub(crate) logvar_head: Sequential,
    pub(crate) decoder: Sequential,
    pub(crate) classifier: Sequential,
}

impl VacModel {
    /// Builds the network with Kaiming fan-in weights and zero biases. The
    /// logits layer starts at zero, so an untrained classifier is uniform.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, &[rng::TAG_INIT]);
        let mut params = ParamSet::new();
        let widths = &arch.conv_widths;

        let mut trunk = Sequential::new();
        let mut in_ch = arch.channels;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let name = format!("conv{}", i + 1);
            let conv = Conv2d::new(&mut params, &format!("encoder.{name}"), in_ch, w, 3, stride, 1, &mut r)?;
            trunk.push(name.clone(), Layer::Conv2d(conv));
            trunk.push(format!("{name}.relu"), Layer::Relu);
            in_ch = w;
        }
        let last = *widths.last().unwrap();
        let (bh, bw) = arch.bottom_hw();
        let feat = match arch.pooling {
            Pooling::GlobalAverage => {
                trunk.push("pool", Layer::GlobalAvgPool);
                last
            }
            Pooling::Flatten => {
                trunk.push("flatten", Layer::Reshape(vec![last * bh * bw]));
                last * bh * bw
            }
        };

        let mut mu_head = Sequential::new();
        mu_head.push("mu", Layer::Linear(Linear::new(&mut params, "encoder.mu", feat, arch.latent_dim, &mut r)?));
        let mut logvar_head = Sequential::new();
        logvar_head.push(
            "logvar",
            Layer::Linear(Linear::new(&mut params, "encoder.logvar", feat, arch.latent_dim, &mut r)?),
        );

        let mut decoder = Sequential::new();
        decoder.push(
            "fc",
            Layer::Linear(Linear::new(&mut params, "decoder.fc", arch.latent_dim, last * bh * bw, &mut r)?),
        );
        decoder.push("fc.relu", Layer::Relu);
        decoder.push("unflatten", Layer::Reshape(vec![last, bh, bw]));
        let mut in_ch = last;
        for i in (0..widths.len()).rev() {
            let out_ch = if i == 0 { arch.channels } else { widths[i - 1] };
            let name = format!("deconv{}", widths.len() - i);
            let conv = Conv2d::new(&mut params, &format!("decoder.{name}"), in_ch, out_ch, 3, 1, 1, &mut r)?;
            decoder.push(name.clone(), Layer::Conv2d(conv));
            if i > 0 {
                decoder.push(format!("{name}.relu"), Layer::Relu);
                decoder.push(format!("{name}.up"), Layer::Upsample2x);
            }
            in_ch = out_ch;
        }

        let mut classifier = Sequential::new();
        let mut width = arch.latent_dim;
        for (i, &h) in arch.classifier_hidden.iter().enumerate() {
            let name = format!("fc{}", i + 1);
            classifier.push(
                name.clone(),
                Layer::Linear(Linear::new(&mut params, &format!("classifier.{name}"), width, h, &mut r)?),
            );
            classifier.push(format!("{name}.relu"), Layer::Relu);
            width = h;
        }
        classifier.push(
            "logits",
            Layer::Linear(Linear::new(&mut params, "classifier.logits", width, arch.num_classes, &mut r)?),
        );

        let logits = params.find("classifier.logits.weight").expect("registered above");
        params.get_mut(logits).value.fill(0.0);

        let model = Self {
            arch,
            params,
            trunk,
            mu_head,
            logvar_head,
            decoder,
            classifier,
        };
        model.check_wiring()?;
        Ok(model)
    }

    fn check_wiring(&self) -> Result<()> {
        let [c, h, w] = self.arch.image_shape();
        let feat = self.trunk.output_shape(&[1, c, h, w])?;
        self.mu_head.output_shape(&feat)?;
        self.logvar_head.output_shape(&feat)?;
        let out = self.decoder.output_shape(&[1, self.arch.latent_dim])?;
        if out != [1, c, h, w] {
            return Err(VacError::shape("decoder output", &[1, c, h, w], &out));
        }
        self.classifier.output_shape(&[1, self.arch.latent_dim])?;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.arch.image_shape();
        x.expect_shape("model input", &[x.batch(), c, h, w])
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let h = self.trunk.infer(&self.params, x)?;
        Ok((
            self.mu_head.infer(&self.params, &h)?,
            self.logvar_head.infer(&self.params, &h)?,
        ))
    }

    pub fn encode_traced(&self, x: &Tensor) -> Result<(Tensor, Tensor, EncoderTrace)> {
        self.check_input(x)?;
        let (h, trunk) = self.trunk.forward(&self.params, x)?;
        let (mu, mu_t) = self.mu_head.forward(&self.params, &h)?;
        let (logvar, lv_t) = self.logvar_head.forward(&self.params, &h)?;
        Ok((
            mu,
            logvar,
            EncoderTrace {
                trunk,
                mu: mu_t,
                logvar: lv_t,
            },
        ))
    }

    /// Back-propagates `(∂/∂μ, ∂/∂logvar)`; `dlogvar = None` skips that head.
    pub fn encoder_backward(
        &self,
        trace: &EncoderTrace,
        dmu: &Tensor,
        dlogvar: Option<&Tensor>,
        mut grads: Option<&mut Grads>,
    ) -> Result<Tensor> {
        let mut dh = self
            .mu_head
            .backward(&self.params, &trace.mu, dmu, grads.as_deref_mut())?;
        if let Some(dlv) = dlogvar {
            let dh_lv = self
                .logvar_head
                .backward(&self.params, &trace.logvar, dlv, grads.as_deref_mut())?;
            dh.add_assign(&dh_lv)?;
        }
        self.trunk.backward(&self.params, &trace.trunk, &dh, grads)
    }

    /// Raw decoder output (`[b, c, h, w]`): logits for the Bernoulli head,
    /// the mean for the Gaussian head.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.infer(&self.params, z)
    }

    pub fn decode_traced(&self, z: &Tensor) -> Result<(Tensor, Trace)> {
        self.decoder.forward(&self.params, z)
    }

    pub fn decoder_backward(&self, trace: &Trace, grad: &Tensor, grads: Option<&mut Grads>) -> Result<Tensor> {
        self.decoder.backward(&self.params, trace, grad, grads)
    }

    /// Maps raw decoder output into pixel space `[0, 1]`.
    pub fn to_pixels(raw: &Tensor, head: LikelihoodHead) -> Tensor {
        match head {
            LikelihoodHead::Bernoulli => raw.map(sigmoid),
            LikelihoodHead::Gaussian => raw.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn classify_logits(&self, z: &Tensor) -> Result<Tensor> {
        self.classifier.infer(&self.params, z)
    }

    pub fn classify_traced(&self, z: &Tensor) -> Result<(Tensor, Trace)> {
        self.classifier.forward(&self.params, z)
    }

    pub fn classifier_backward(&self, trace: &Trace, grad: &Tensor, grads: Option<&mut Grads>) -> Result<Tensor> {
        self.classifier.backward(&self.params, trace, grad, grads)
    }

    /// Classifier cross-entropy through the mean path `z = μ(x)`: per-sample
    /// losses and `∂(Σ losses)/∂x`. This is the loss the attack ascends.
    pub fn class_loss_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let (mu, _, trace) = self.encode_traced(x)?;
        let (logits, ctrace) = self.classify_traced(&mu)?;
        let b = x.batch();
        let (_, mut dlogits) = crate::nn::softmax_cross_entropy(&logits, labels)?;
        // undo the batch mean so each sample's gradient is its own
        dlogits.scale(b as f64);
        let losses = (0..b)
            .map(|i| -crate::nn::log_softmax(logits.item(i))[labels[i]])
            .collect();
        let dz = self.classifier_backward(&ctrace, &dlogits, None)?;
        let dx = self.encoder_backward(&trace, &dz, None, None)?;
        Ok((losses, dx))
    }

    /// Parameters whose name is in the classifier group and which are
    /// weights (not biases).
    pub fn classifier_weights(&self) -> impl Iterator<Item = &crate::nn::Param> {
        self.params.iter().filter(|p| {
            p.group == crate::nn::ParamGroup::Classifier && p.kind == crate::nn::ParamKind::Weight
        })
    }

    /// Fraction of classifier weights with `|w| < threshold`.
    pub fn classifier_sparsity(&self, threshold: f64) -> f64 {
        let (small, total) = self
            .classifier_weights()
            .flat_map(|p| p.value.data().iter())
            .fold((0usize, 0usize), |(s, t), w| (s + usize::from(w.abs() < threshold), t + 1));
        small as f64 / total.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_wires_up() {
        let m = VacModel::new(ArchConfig::default(), 0).unwrap();
        let x = Tensor::full(&[2, 1, 28, 28], 0.5);
        let (mu, lv) = m.encode(&x).unwrap();
        assert_eq!(mu.shape(), &[2, 100]);
        assert_eq!(lv.shape(), &[2, 100]);
        let out = m.decode_raw(&mu).unwrap();
        assert_eq!(out.shape(), &[2, 1, 28, 28]);
        assert_eq!(m.classify_logits(&mu).unwrap().shape(), &[2, 10]);
    }

    #[test]
    fn every_parameter_is_grouped() {
        let m = VacModel::new(ArchConfig::default(), 0).unwrap();
        for p in m.params.iter() {
            assert!(p.name.starts_with(p.group.prefix()));
            if p.kind == crate::nn::ParamKind::Bias {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let arch = ArchConfig {
            height: 30,
            ..ArchConfig::default()
        };
        assert!(VacModel::new(arch, 0).is_err());
    }
}
