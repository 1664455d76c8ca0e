use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Element, Param, Tensor};

/// Initial value of a freshly registered parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Parameters keyed by name, shared across supernet regenerations.
///
/// A lookup of an existing key returns the same handle every time, so
/// weights trained in one supernet are inherited by the next one that
/// instantiates the same `(layer, genome)` pair.
pub struct WeightStore<T> {
    params: BTreeMap<String, Param<T>>,
    rng: ChaCha8Rng,
}

fn is_buffer(key: &str) -> bool {
    key.ends_with("running_mean") || key.ends_with("running_var")
}

impl<T: Element> WeightStore<T> {
    pub fn new(seed: u64) -> Self {
        WeightStore {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Returns the stored handle for `key`, creating it with `init` on a miss.
    /// Keys ending in `running_mean` / `running_var` are non-trainable buffers.
    pub fn get_or_init(&mut self, key: &str, shape: &[usize], init: Init) -> Result<Param<T>> {
        if let Some(p) = self.params.get(key) {
            if p.borrow().shape() != shape {
                return Err(Error::shape(
                    "weight_store",
                    format!("key {key} holds {:?}, requested {shape:?}", p.borrow().shape()),
                ));
            }
            return Ok(Rc::clone(p));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::HeNormal { fan_in } => self.normal(numel, (2.0 / fan_in as f64).sqrt()),
            Init::Normal { std } => self.normal(numel, std),
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
        };
        let t = Tensor::new(shape.to_vec(), data)?.with_requires_grad(!is_buffer(key));
        let p = Rc::new(RefCell::new(t));
        self.params.insert(key.to_string(), Rc::clone(&p));
        Ok(p)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect()
    }

    pub fn get(&self, key: &str) -> Option<Param<T>> {
        self.params.get(key).cloned()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Writes every entry, in key order, as an `ASWT` checkpoint.
    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let snapshot: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.borrow().clone()))
            .collect();
        write_checkpoint(out, snapshot.iter().map(|(k, t)| (k.as_str(), t)))
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.save(&mut buf)?;
        Ok(buf)
    }

    /// Inserts (or overwrites the values of) every entry in a checkpoint.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<usize> {
        let entries = read_checkpoint(bytes)?;
        let n = entries.len();
        for (key, t) in entries {
            let t: Tensor<T> = t.cast::<T>().with_requires_grad(!is_buffer(&key));
            match self.params.get(&key) {
                Some(p) => {
                    if p.borrow().shape() != t.shape() {
                        return Err(Error::shape("weight_store", format!("checkpoint entry {key} has shape {:?}", t.shape())));
                    }
                    p.borrow_mut().data_mut().copy_from_slice(t.data());
                }
                None => {
                    self.params.insert(key, Rc::new(RefCell::new(t)));
                }
            }
        }
        Ok(n)
    }
}
