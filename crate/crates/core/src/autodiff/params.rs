use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Running statistics and frozen layers are not touched by the optimizer.
    pub trainable: bool,
}

/// Named flat parameter arrays with fixed shapes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    tensors: Vec<Tensor>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>, trainable: bool) -> Result<ParamId> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("parameter {name} data length")));
        }
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.tensors.push(Tensor {
            name: name.to_string(),
            rows,
            cols,
            data,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars, trainable or not.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for t in &mut self.tensors {
            if t.name.starts_with(prefix) && !is_buffer(&t.name) {
                t.trainable = trainable;
            }
        }
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(_, t)| t.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tensors.iter().enumerate() {
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!("tensor {} has wrong length", t.name)));
            }
            if self.index.insert(t.name.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
        }
        Ok(())
    }

    /// Copies values from `other` for every tensor with the same name and shape.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<()> {
        for t in &mut self.tensors {
            let Some(&j) = other.index.get(&t.name) else {
                return Err(Error::Checkpoint(format!("missing tensor {}", t.name)));
            };
            let src = &other.tensors[j];
            if (src.rows, src.cols) != (t.rows, t.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is {}x{}, expected {}x{}",
                    t.name, src.rows, src.cols, t.rows, t.cols
                )));
            }
            t.data.clone_from(&src.data);
            t.trainable = src.trainable;
        }
        Ok(())
    }
}

pub(crate) fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Gradient arrays aligned with a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Parameters, optional optimizer state and free-form metadata.
///
/// Serialized as JSON; floats are written in shortest round-trip form so a
/// save/load cycle is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParameterStore,
    pub optimizer: Option<AdamState>,
}

pub const CHECKPOINT_FORMAT: &str = "topofilt-checkpoint-v1";

impl Checkpoint {
    pub fn new(params: ParameterStore, optimizer: Option<AdamState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            meta: BTreeMap::new(),
            params,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", c.format)));
        }
        c.params.rebuild_index()?;
        if c.params.tensors.iter().flat_map(|t| &t.data).any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        if let Some(opt) = &c.optimizer {
            opt.check_shapes(&c.params)?;
        }
        Ok(c)
    }
}
