//! Named trainable parameters with gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

/// An ordered collection of named parameter tensors. Iteration order is
/// insertion order, which keeps optimizer updates and checkpoint layout
/// deterministic.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor2D) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter name '{name}'")));
        }
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|p| p.name.clone()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = Tensor2D::zeros(p.value.rows(), p.value.cols());
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }
}

/// Xavier-uniform init for weight matrices.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("sized above")
}

/// N(0, 1/sqrt(cols)) init for embedding tables.
pub fn embedding_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D {
    let std = (cols as f64).powf(-0.5);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("sized above")
}
