use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Shape;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f64>,
}

/// Owner of every trainable array of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        values: Vec<f64>,
    ) -> Result<ParamId> {
        let name = name.into();
        if values.len() != shape.len() {
            return Err(Error::Usage(format!(
                "parameter {name}: {} values for shape {}x{}",
                values.len(),
                shape.rows,
                shape.cols
            )));
        }
        if self.find(&name).is_some() {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param {
            name,
            shape,
            values,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Shape) -> Result<ParamId> {
        self.add(name, shape, vec![0.0; shape.len()])
    }

    /// Uniform(-scale, scale) initialisation.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let values = (0..shape.len())
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        self.add(name, shape, values)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.values.iter().all(|v| v.is_finite()))
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| vec![0.0; p.values.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}
