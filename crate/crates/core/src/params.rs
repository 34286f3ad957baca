//! Named parameter storage, gradients and initialization.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Flat, insertion-ordered collection of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter, replacing the value if the name already exists.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.params[id.0].value = value;
            return id;
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Like [`ParamStore::id`] but panics with the name; model code only asks for
    /// parameters it registered itself.
    pub fn expect_id(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not registered"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// SHA-256 over names, shapes and the little-endian `f64` bytes of every
    /// value of the parameters selected by `filter`.
    pub fn hash_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for x in p.value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient of one parameter: dense, or a sparse set of rows for embedding
/// tables. A dense gradient absorbs any row gradients for the same parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad<T> {
    Dense(Tensor<T>),
    Rows(BTreeMap<usize, Vec<T>>),
}

impl<T: Scalar> ParamGrad<T> {
    pub fn entry(&self, r: usize, c: usize) -> T {
        match self {
            ParamGrad::Dense(t) => t.get(r, c),
            ParamGrad::Rows(rows) => rows.get(&r).map_or(T::zero(), |row| row[c]),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ParamGrad::Dense(t) => t.is_finite(),
            ParamGrad::Rows(rows) => rows.values().flatten().all(|x| x.is_finite()),
        }
    }
}

/// Gradients keyed by parameter; parameters absent from the map did not take
/// part in the computation.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub(crate) grads: BTreeMap<ParamId, ParamGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.grads.get(&id)
    }

    pub fn entry(&self, id: ParamId, r: usize, c: usize) -> T {
        self.grads.get(&id).map_or(T::zero(), |g| g.entry(r, c))
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn accumulate_dense(&mut self, id: ParamId, g: Tensor<T>) {
        match self.grads.get_mut(&id) {
            Some(ParamGrad::Dense(t)) => t.add_assign(&g),
            Some(slot @ ParamGrad::Rows(_)) => {
                let ParamGrad::Rows(rows) = std::mem::replace(slot, ParamGrad::Dense(g)) else {
                    unreachable!()
                };
                let ParamGrad::Dense(t) = slot else { unreachable!() };
                for (r, v) in rows {
                    for (a, b) in t.row_mut(r).iter_mut().zip(v) {
                        *a += b;
                    }
                }
            }
            None => {
                self.grads.insert(id, ParamGrad::Dense(g));
            }
        }
    }

    pub fn accumulate_row(&mut self, id: ParamId, row: usize, g: &[T]) {
        let entry = self
            .grads
            .entry(id)
            .or_insert_with(|| ParamGrad::Rows(BTreeMap::new()));
        match entry {
            ParamGrad::Rows(rows) => {
                let slot = rows.entry(row).or_insert_with(|| vec![T::zero(); g.len()]);
                for (a, &b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
            ParamGrad::Dense(t) => {
                for (a, &b) in t.row_mut(row).iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(ParamGrad::is_finite)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.grads {
            match g {
                ParamGrad::Dense(t) => self.accumulate_dense(id, t),
                ParamGrad::Rows(rows) => {
                    for (r, v) in rows {
                        self.accumulate_row(id, r, &v);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            match g {
                ParamGrad::Dense(t) => t.data_mut().iter_mut().for_each(|x| *x *= factor),
                ParamGrad::Rows(rows) => rows.values_mut().flatten().for_each(|x| *x *= factor),
            }
        }
    }
}

/// Glorot-uniform matrix.
pub fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, limit, rng)
}

pub fn uniform<T: Scalar>(rows: usize, cols: usize, limit: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(rows, cols, data)
}
