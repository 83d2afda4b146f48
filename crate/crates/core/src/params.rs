//! Named parameter tensors and their initializers.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Optimizer group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Main,
    /// Mapping network: trained with a reduced learning rate.
    Mapping,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Main => 0,
            ParamGroup::Mapping => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Main),
            1 => Some(ParamGroup::Mapping),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub group: ParamGroup,
}

/// Flat list of parameter tensors. Model layouts hold [`ParamId`]s into it so
/// that several stores (live weights, EMA weights) can share one layout.
#[derive(Debug, PartialEq)]
pub struct ParamStore<T> {
    id: u64,
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            tensors: Vec::new(),
        }
    }

    pub fn from_tensors(tensors: Vec<ParamTensor<T>>) -> Self {
        Self {
            id: fresh_id(),
            tensors,
        }
    }

    /// Process-unique identity used by the graph to deduplicate leaves.
    pub fn uid(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>, group: ParamGroup) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape/data mismatch");
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            group,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    /// Same tensor count, names and shapes.
    pub fn congruent(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Flattened copy of every tensor in order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Normal samples with standard deviation `std`, resampled outside two
/// standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let v: f64 = StandardNormal.sample(rng);
            if v.abs() <= 2.0 {
                break T::lit(v * std);
            }
        })
        .collect()
}

pub fn constant<T: Scalar>(n: usize, value: f64) -> Vec<T> {
    vec![T::lit(value); n]
}

pub fn normal_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v * std)
        })
        .collect()
}
