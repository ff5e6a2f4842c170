use super::layers::{Cache, Layer};
use super::params::{Grads, ParamSet};
use crate::error::{Result, VacError};
use crate::tensor::Tensor;

/// An ordered chain of named layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    layers: Vec<(String, Layer)>,
}

/// Forward-pass caches for one [`Sequential::forward`] call.
#[derive(Debug)]
pub struct Trace {
    caches: Vec<Cache>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l))
    }

    /// Propagates a shape through every layer, failing on the first layer
    /// whose input does not chain.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (name, layer) in &self.layers {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| VacError::Config(format!("layer `{name}`: {e}")))?;
        }
        Ok(shape)
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (name, layer) in &self.layers {
            let (out, cache) = layer
                .forward(params, &cur)
                .map_err(|e| e.within(format!("layer `{name}`")))?;
            out.check_finite(&format!("layer `{name}` output"))?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, Trace { caches }))
    }

    /// Forward pass without keeping caches.
    pub fn infer(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (name, layer) in &self.layers {
            let (out, _) = layer
                .forward(params, &cur)
                .map_err(|e| e.within(format!("layer `{name}`")))?;
            out.check_finite(&format!("layer `{name}` output"))?;
            cur = out;
        }
        Ok(cur)
    }

    /// Back-propagates `grad_out` through the trace, accumulating parameter
    /// gradients into `grads` when given, and returns the input gradient.
    pub fn backward(
        &self,
        params: &ParamSet,
        trace: &Trace,
        grad_out: &Tensor,
        mut grads: Option<&mut Grads>,
    ) -> Result<Tensor> {
        if trace.caches.len() != self.layers.len() {
            return Err(VacError::Config("trace does not belong to this network".into()));
        }
        let mut g = grad_out.clone();
        for ((name, layer), cache) in self.layers.iter().zip(&trace.caches).rev() {
            g = layer
                .backward(params, cache, &g, grads.as_deref_mut())
                .map_err(|e| e.within(format!("layer `{name}`")))?;
            g.check_finite(&format!("layer `{name}` gradient"))?;
        }
        Ok(g)
    }
}

/// Scalar loss applied to a network output.
#[derive(Clone, Copy, Debug)]
pub enum LossHead<'a> {
    /// Sum of every output value.
    Sum,
    /// Mean softmax cross-entropy over the batch against integer labels.
    SoftmaxCrossEntropy(&'a [usize]),
}

impl LossHead<'_> {
    /// Loss value and its gradient with respect to `output`.
    pub fn evaluate(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossHead::Sum => Ok((output.sum(), Tensor::full(output.shape(), 1.0))),
            LossHead::SoftmaxCrossEntropy(labels) => softmax_cross_entropy(output, labels),
        }
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy of `logits` (`[batch, classes]`) against `labels`,
/// with its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[b, k] = logits.shape() else {
        return Err(VacError::shape("cross-entropy logits", &[labels.len(), 0], logits.shape()));
    };
    if labels.len() != b {
        return Err(VacError::shape("cross-entropy labels", &[b], &[labels.len()]));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(VacError::Data(format!("label {y} out of range for {k} classes")));
        }
        let logp = log_softmax(logits.item(i));
        loss -= logp[y];
        let g = grad.item_mut(i);
        for (gj, lp) in g.iter_mut().zip(&logp) {
            *gj = lp.exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Result of [`forward_backward`].
#[derive(Debug)]
pub struct ForwardBackward {
    pub loss: f64,
    pub output: Tensor,
    pub input_grad: Tensor,
    pub grads: Grads,
}

/// Runs `net` on `input`, applies `head`, and back-propagates: returns the
/// loss, `∂loss/∂input` and `∂loss/∂param` for every parameter.
pub fn forward_backward(
    net: &Sequential,
    params: &ParamSet,
    input: &Tensor,
    head: LossHead<'_>,
) -> Result<ForwardBackward> {
    net.output_shape(input.shape())?;
    let (output, trace) = net.forward(params, input)?;
    let (loss, grad_out) = head.evaluate(&output)?;
    if !loss.is_finite() {
        let last = net.layers().last().map(|(n, _)| n).unwrap_or("input");
        return Err(VacError::numeric(format!("loss after layer `{last}`")));
    }
    let mut grads = params.grad_buffer();
    let input_grad = net.backward(params, &trace, &grad_out, Some(&mut grads))?;
    Ok(ForwardBackward {
        loss,
        output,
        input_grad,
        grads,
    })
}
