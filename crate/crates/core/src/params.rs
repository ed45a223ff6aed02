//! Named parameter storage and binding onto a tape.

use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl<'t> Bound<'t> {
    /// Binds already-recorded vars, one per store entry in id order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, |_| true)
    }

    /// Parameters for which `trainable` is false are recorded as constants.
    pub fn bind_with<'t>(&self, tape: &'t Tape, trainable: impl Fn(ParamId) -> bool) -> Bound<'t> {
        let vars = self
            .ids()
            .map(|id| {
                let v = self.values[id.0].clone();
                if trainable(id) {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Bound { vars }
    }

    pub(crate) fn to_named(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| NamedArray {
                name: n.clone(),
                shape: v.shape().to_vec(),
                data: v.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from a saved list; names and shapes must match exactly.
    pub(crate) fn load_named(&mut self, arrays: Vec<NamedArray>) -> Result<()> {
        if arrays.len() != self.values.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} parameters, model expects {}",
                arrays.len(),
                self.values.len()
            )));
        }
        for (i, a) in arrays.into_iter().enumerate() {
            if a.name != self.names[i] || a.shape != self.values[i].shape() {
                return Err(Error::config(format!(
                    "checkpoint parameter {} ({:?}) does not match model parameter {} ({:?})",
                    a.name,
                    a.shape,
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            self.values[i] = Tensor::new(&a.shape, a.data)?;
        }
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
