use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named learnable array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters receive no updates.
    pub trainable: bool,
    /// Rows kept at zero forever (padding rows of embedding tables).
    pub zero_rows: Vec<usize>,
}

/// Ordered collection of parameters. Order is registration order and fixes
/// the optimizer's iteration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: true, zero_rows: Vec::new() });
        ParamId(self.params.len() - 1)
    }

    /// Adds a truncated-normal initialised matrix.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng::truncated_normal(rng, std)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape and data agree"))
    }

    /// Adds an embedding table whose row 0 is padding.
    pub fn add_embedding(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        dim: usize,
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let id = self.add_normal(name, &[rows, dim], std, rng);
        self.params[id.0].zero_rows.push(0);
        self.params[id.0].value.row_mut(0).fill(0.0);
        id
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Zeroes a parameter and excludes it from training.
    pub fn zero_and_freeze(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.value.data_mut().fill(0.0);
        p.trainable = false;
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config(alloc::format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Config(alloc::format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}
