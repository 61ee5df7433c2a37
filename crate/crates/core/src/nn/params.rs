use indexmap::IndexMap;

use crate::tensor::Tensor;

/// Weight tensors keyed by parameter name, in registration order.
pub type NamedTensors = IndexMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Linear or convolution weight: the only kind that is pruned, quantized,
    /// or regularized.
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_norm_affine(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }

    /// Weight decay applies to conv/linear weights only.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Shape and role of a trainable tensor, as registered by a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub fan_in: usize,
    /// Name of the layer that owns the parameter.
    pub layer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        Self {
            name: name.into(),
            kind,
            value,
        }
    }
}

/// An ordered collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Parameter>,
}

impl ParamSet {
    pub fn insert(&mut self, p: Parameter) {
        self.params.insert(p.name.clone(), p);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn to_named(&self) -> NamedTensors {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }
}
