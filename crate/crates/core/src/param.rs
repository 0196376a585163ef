//! Named parameters and the store that owns them.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Accounting bucket for a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Biases,
    Head,
    Prompts,
    Metanet,
    Adapters,
    Side,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Backbone,
        ParamGroup::Biases,
        ParamGroup::Head,
        ParamGroup::Prompts,
        ParamGroup::Metanet,
        ParamGroup::Adapters,
        ParamGroup::Side,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Biases => "biases",
            ParamGroup::Head => "head",
            ParamGroup::Prompts => "prompts",
            ParamGroup::Metanet => "metanet",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Side => "side",
        }
    }

    /// Backbone parameters whose names mark them as additive offsets.
    pub fn is_backbone(self) -> bool {
        matches!(self, ParamGroup::Backbone | ParamGroup::Biases)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a parameter name denotes a bias or layer-norm shift.
pub fn is_bias_name(name: &str) -> bool {
    name.ends_with("bias") || name.ends_with("shift")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor<E>,
    /// Allocated on first accumulation; frozen parameters never get one.
    pub grad: Option<Vec<E>>,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>, group: ParamGroup) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            group,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    params: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<E>) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Config(format!("duplicate parameter name `{}`", param.name)));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<E>> {
        let id = self.id(name)?;
        Ok(&self.params[id.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<E>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id.0])
    }

    pub fn by_id(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Zeroes every allocated gradient buffer in place.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = E::zero());
            }
        }
    }

    /// Adds `grad` into the parameter's gradient buffer. Frozen parameters are skipped.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[E]) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        let n = p.value.numel();
        let buf = p.grad.get_or_insert_with(|| vec![E::zero(); n]);
        for (b, g) in buf.iter_mut().zip(grad) {
            *b += *g;
        }
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(Parameter {
                name: p.name.clone(),
                value: p.value.cast(),
                grad: None,
                trainable: p.trainable,
                group: p.group,
            })
            .expect("names already unique");
        }
        out
    }

    /// FNV-1a over names and raw value bytes of the parameters selected by `filter`.
    pub fn checksum(&self, filter: impl Fn(&Parameter<E>) -> bool) -> u64 {
        let mut h = FnvHasher::default();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.write(p.name.as_bytes());
            h.write(&p.value.to_le_bytes());
        }
        h.finish()
    }

    /// Copies values (not flags) for every name present in both stores.
    pub fn copy_values_from(&mut self, other: &ParamStore<E>) {
        for p in &mut self.params {
            if let Ok(src) = other.get(&p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                }
            }
        }
    }
}
