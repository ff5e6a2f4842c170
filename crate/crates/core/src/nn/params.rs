use std::fmt;

use crate::error::{Result, VacError};
use crate::tensor::Tensor;

/// Parameter partition: encoder φ, decoder θ, classifier ω.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [Self::Encoder, Self::Decoder, Self::Classifier];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Decoder => "decoder",
            Self::Classifier => "classifier",
        }
    }

    /// Group named by the first dotted component of a parameter name.
    pub fn of_name(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

impl ParamKind {
    fn of_name(name: &str) -> Self {
        if name.ends_with(".bias") {
            Self::Bias
        } else {
            Self::Weight
        }
    }
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

/// Named parameters with paired gradient and momentum buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique and start with the
    /// group prefix (`encoder.`, `decoder.`, `classifier.`); a `.bias`
    /// suffix marks a bias.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let group = ParamGroup::of_name(name).ok_or_else(|| {
            VacError::Config(format!("parameter `{name}` lacks a group prefix"))
        })?;
        if self.find(name).is_some() {
            return Err(VacError::Config(format!("duplicate parameter `{name}`")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            group,
            kind: ParamKind::of_name(name),
            grad: zeros.clone(),
            momentum: zeros,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Fresh zeroed gradient accumulator shaped like this set.
    pub fn grad_buffer(&self) -> Grads {
        Grads(
            self.params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        )
    }

    /// Adds `grads` into the paired gradient buffers.
    pub fn accumulate(&mut self, grads: &Grads) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(VacError::Config(format!(
                "gradient buffer has {} entries for {} parameters",
                grads.0.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Flattened copy of all parameter values, in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(VacError::shape("flat parameters", &[self.numel()], &[flat.len()]));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copies values from `other` by name. Every parameter here must be
    /// present there with the same shape.
    pub fn load_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(VacError::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| VacError::Format(format!("checkpoint lacks `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(VacError::shape(&p.name, p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Grads(pub(crate) Vec<Tensor>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            g.scale(factor);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}
