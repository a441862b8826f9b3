use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered list of parameter names and shapes.
pub type Manifest = Vec<(String, Vec<usize>)>;

/// Named parameter tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Parameters<T> {
    pub fn from_tensors(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (name, t) in entries {
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    /// Uniform `[-k, k]` initialization with `k = 1 / sqrt(fan_in)`.
    ///
    /// Fan-in is the row count of a weight matrix; a bias shares the fan-in
    /// of the weight it belongs to (same name stem); an embedding table is
    /// indexed by one-hot inputs, so its fan-in is 1.
    pub fn init<R: Rng + ?Sized>(manifest: &Manifest, rng: &mut R) -> Self {
        let fan_in: HashMap<&str, usize> = manifest
            .iter()
            .filter_map(|(n, s)| n.strip_suffix(".weight").map(|stem| (stem, s[0])))
            .collect();
        let entries = manifest
            .iter()
            .map(|(name, shape)| {
                let fan = if name.starts_with("embed.") || name == "decoder.embed" {
                    1
                } else if let Some(stem) = name.strip_suffix(".bias") {
                    fan_in.get(stem).copied().unwrap_or(shape[0])
                } else {
                    shape[0]
                };
                let k = T::one() / T::from_usize_lossy(fan).sqrt();
                (name.clone(), Tensor::uniform(shape, k, rng))
            })
            .collect();
        Self::from_tensors(entries).expect("manifest names are unique")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn manifest(&self) -> Manifest {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn check_manifest(&self, expected: &Manifest) -> Result<()> {
        let got = self.manifest();
        if &got != expected {
            return Err(Error::Format(format!(
                "parameter manifest mismatch: expected {} tensors, got {}",
                expected.len(),
                got.len()
            )));
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes `var` for the named parameter.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        self.vars[i] = var;
        Ok(())
    }
}
