//! Named learnable tensors with gradient slots.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initialization rule used the first time a parameter is registered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, resampled outside two sigma.
    TruncNormal(f64),
    Zeros,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether decoupled weight decay applies (projection matrices only).
    pub decay: bool,
}

/// Parameters are stored at `f32` precision (held in `f64`) so that the
/// on-disk checkpoint format reproduces them exactly.
#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
    rng_seed: u64,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            frozen: false,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.entries[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i])
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    /// Looks up `name`, checking its shape. While the store is not frozen a
    /// missing entry is created and initialized from the store's RNG stream.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<usize> {
        if let Some(&i) = self.index.get(name) {
            check_shape(&self.entries[i], shape)?;
            return Ok(i);
        }
        if self.frozen {
            return Err(Error::MissingParam(name.to_string()));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![round_f32(c); n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    if z.abs() <= 2.0 {
                        break round_f32(z * std);
                    }
                })
                .collect(),
        };
        let i = self.entries.len();
        self.entries.push(Param {
            name: name.to_string(),
            value: Tensor::new(shape.to_vec(), data),
            grad: Tensor::zeros(shape),
            decay: matches!(init, Init::TruncNormal(_)) && shape.len() >= 2,
        });
        self.index.insert(name.to_string(), i);
        Ok(i)
    }

    /// Frozen lookup used by forward passes that must not create entries.
    pub fn lookup(&self, name: &str, shape: &[usize]) -> Result<usize> {
        let i = self.index_of(name)?;
        check_shape(&self.entries[i], shape)?;
        Ok(i)
    }

    /// Inserts or overwrites a tensor verbatim (checkpoint restore).
    pub fn insert(&mut self, name: &str, value: Tensor, decay: bool) {
        let grad = Tensor::zeros(value.shape());
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].value = value;
                self.entries[i].grad = grad;
            }
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push(Param {
                    name: name.to_string(),
                    value,
                    grad,
                    decay,
                });
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Draws a fresh value for every scalar; used by tests that want
    /// non-degenerate weights everywhere (including zero-initialized biases).
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.entries {
            let is_gain = p.name.ends_with(".gamma");
            for v in p.value.data_mut() {
                let r: f64 = rng.random_range(-scale..scale);
                *v = if is_gain { 1.0 + r } else { r };
            }
        }
    }
}

fn check_shape(p: &Param, shape: &[usize]) -> Result<()> {
    if p.value.shape() != shape {
        return Err(Error::ParamShape {
            name: p.name.clone(),
            expected: shape.to_vec(),
            found: p.value.shape().to_vec(),
        });
    }
    Ok(())
}
