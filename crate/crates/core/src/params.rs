//! Named parameter storage and binding of parameters onto a tape.
//!
//! Every trainable or frozen tensor in a model lives in a [`ParamStore`]
//! under a dotted name (`component.layer_index.sublayer.tensor`; adapter
//! sets under `adapters.<modality>.*`). Layers only hold names. During a
//! step a [`Binder`] places each parameter on the tape once, as a gradient
//! leaf when it is trainable and as a constant otherwise.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub frozen: bool,
}

impl Param {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.shape.clone(), &self.data).expect("param shape matches data")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("parameter `{name}`: shape {shape:?} vs {} values", data.len())));
        }
        self.params.insert(name, Param { shape, data, frozen: false });
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.insert(name, t.shape().to_vec(), t.to_f32())
    }

    /// Inserts a tensor drawn from N(0, std²).
    pub fn insert_normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Result<()> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
        self.insert(name, shape, data)
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f32) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![v; n])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.get(name)?.to_tensor())
    }

    /// Overwrites a parameter's values, keeping its frozen flag.
    pub fn set_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.shape != t.shape() {
            return Err(Error::Shape(format!("parameter `{name}`: {:?} vs {:?}", p.shape, t.shape())));
        }
        p.data = t.to_f32();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |k| has_prefix(k, prefix))
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (k, p) in self.params.iter_mut() {
            if has_prefix(k, prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !has_prefix(k, prefix));
    }

    /// SHA-256 over names, shapes and raw bytes of every parameter under
    /// `prefix` (all parameters for `""`).
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, p) in self.params.iter().filter(|(k, _)| has_prefix(k, prefix)) {
            h.update(k.as_bytes());
            for &e in &p.shape {
                h.update((e as u64).to_le_bytes());
            }
            for &v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Checksum over the frozen parameters only.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in self.params.iter().filter(|(_, p)| p.frozen) {
            h.update(k.as_bytes());
            for &v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub(crate) fn raw_insert(&mut self, name: String, p: Param) {
        self.params.insert(name, p);
    }
}

/// `name` equals `prefix` or starts with `prefix.`; the empty prefix
/// matches everything.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'.')
}

/// Which unfrozen parameters receive gradients in a pass.
#[derive(Clone, Debug)]
pub enum Trainable {
    Nothing,
    AllUnfrozen,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn admits(&self, name: &str, p: &Param) -> bool {
        if p.frozen {
            return false;
        }
        match self {
            Trainable::Nothing => false,
            Trainable::AllUnfrozen => true,
            Trainable::Prefixes(ps) => ps.iter().any(|pre| has_prefix(name, pre)),
        }
    }
}

/// Places store parameters on a tape, at most once each.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: Trainable,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: Trainable) -> Self {
        Self { tape, store, trainable, bound: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self.store.get(name)?;
        let v = self.tape.leaf(p.to_tensor(), self.trainable.admits(name, p));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of all bound trainable parameters, by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Names bound so far that receive gradients.
    pub fn trainable_names(&self) -> Vec<String> {
        self.bound.borrow().iter().filter(|(_, v)| v.requires_grad()).map(|(k, _)| k.clone()).collect()
    }
}
