use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Error, Tensor};

/// Which part of the model a parameter belongs to.
///
/// Encoder and decoder together form the main network; the stethoscope
/// partition is trained only by the probe's own optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Encoder,
    Decoder,
    Stethoscope,
}

impl Partition {
    pub fn is_main(self) -> bool {
        matches!(self, Partition::Encoder | Partition::Decoder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor,
}

/// Named trainable tensors, each tagged with exactly one partition.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        partition: Partition,
        value: Tensor,
    ) -> Result<ParamId, Error> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            partition,
            value,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_where(&self, pred: impl Fn(Partition) -> bool) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| pred(p.partition))
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar entries across the parameters matching `pred`.
    pub fn scalar_count(&self, pred: impl Fn(Partition) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.partition))
            .map(|p| p.value.len())
            .sum()
    }

    /// Order-sensitive digest of the raw bits of every matching parameter.
    pub fn checksum(&self, pred: impl Fn(Partition) -> bool) -> u64 {
        // FNV-1a over the bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| pred(p.partition)) {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParameterSet, pred: impl Fn(Partition) -> bool) {
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if pred(mine.partition) {
                debug_assert_eq!(mine.name, theirs.name);
                mine.value = theirs.value.clone();
            }
        }
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match self.map.get_mut(&id) {
            Some(g) => g.add_assign(grad.data()),
            None => {
                self.map.insert(id, grad.clone());
            }
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }
}
