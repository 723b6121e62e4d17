use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Element, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a spectrally normalized weight and its power-iteration vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpectralId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Spectral<T> {
    weight: ParamId,
    name: String,
    u: Vec<T>,
}

/// Named trainable arrays plus spectral-norm state.
///
/// Cloning yields an independent store with the same layout, so a network
/// definition (which only holds ids) can run against either copy.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    spectral: Vec<Spectral<T>>,
}

impl<T: Element> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
            spectral: self.spectral.clone(),
        }
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { id: fresh_id(), names: Vec::new(), values: Vec::new(), index: HashMap::new(), spectral: Vec::new() }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Registers `weight` for spectral normalization over its leading axis.
    pub fn add_spectral<R: Rng>(&mut self, weight: ParamId, rng: &mut R) -> SpectralId {
        let rows = self.values[weight.0].shape()[0];
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        let name = format!("{}.sn_u", self.names[weight.0]);
        self.spectral.push(Spectral { weight, name, u: u.into_iter().map(T::from_f64).collect() });
        SpectralId(self.spectral.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn spectral_ids(&self) -> impl Iterator<Item = SpectralId> {
        (0..self.spectral.len()).map(SpectralId)
    }

    pub fn spectral_weight(&self, sn: SpectralId) -> ParamId {
        self.spectral[sn.0].weight
    }

    pub fn spectral_name(&self, sn: SpectralId) -> &str {
        &self.spectral[sn.0].name
    }

    pub fn spectral_u(&self, sn: SpectralId) -> &[T] {
        &self.spectral[sn.0].u
    }

    pub fn set_spectral_u(&mut self, sn: SpectralId, u: Vec<T>) {
        assert_eq!(u.len(), self.spectral[sn.0].u.len(), "spectral vector length");
        self.spectral[sn.0].u = u;
    }

    /// One power-iteration refresh of every spectral vector.
    pub fn spectral_step(&mut self) {
        for s in &mut self.spectral {
            let w = &self.values[s.weight.0];
            let (rows, cols) = matrix_dims(w);
            let wd = w.data();
            let v = normalized_wt_u(wd, rows, cols, &s.u);
            let mut u = vec![0.0f64; rows];
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = (0..cols).map(|c| wd[r * cols + c].as_f64() * v[c]).sum();
            }
            normalize(&mut u);
            s.u = u.into_iter().map(T::from_f64).collect();
        }
    }

    /// Structure-checked copy of all values and spectral vectors from `other`.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        self.check_isomorphic(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        for (dst, src) in self.spectral.iter_mut().zip(&other.spectral) {
            dst.u.copy_from_slice(&src.u);
        }
        Ok(())
    }

    pub fn check_isomorphic(&self, other: &ParamStore<T>) -> Result<(), String> {
        if self.names != other.names {
            return Err(format!("parameter layouts differ ({} vs {} entries)", self.len(), other.len()));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                ));
            }
        }
        if self.spectral.len() != other.spectral.len() {
            return Err("spectral-norm registrations differ".into());
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            id: fresh_id(),
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            index: self.index.clone(),
            spectral: self
                .spectral
                .iter()
                .map(|s| Spectral {
                    weight: s.weight,
                    name: s.name.clone(),
                    u: s.u.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

pub(crate) fn matrix_dims<T: Element>(w: &Tensor<T>) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    for x in v {
        *x /= n;
    }
}

/// `normalize(W^T u)` computed in double precision.
pub(crate) fn normalized_wt_u<T: Element>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<f64> {
    let mut v = vec![0.0f64; cols];
    for r in 0..rows {
        let ur = u[r].as_f64();
        for (c, vc) in v.iter_mut().enumerate() {
            *vc += w[r * cols + c].as_f64() * ur;
        }
    }
    normalize(&mut v);
    v
}

/// Largest singular value by many power iterations; a test/diagnostic helper.
pub fn spectral_norm_estimate<T: Element>(w: &Tensor<T>, iters: usize) -> f64 {
    let (rows, cols) = matrix_dims(w);
    let wd: Vec<f64> = w.to_f64_vec();
    let mut u: Vec<f64> = (0..rows).map(|i| 1.0 + 0.1 * (i as f64).sin()).collect();
    normalize(&mut u);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mut v = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                v[c] += wd[r * cols + c] * u[r];
            }
        }
        normalize(&mut v);
        let mut nu = vec![0.0; rows];
        for r in 0..rows {
            nu[r] = (0..cols).map(|c| wd[r * cols + c] * v[c]).sum();
        }
        sigma = nu.iter().map(|x| x * x).sum::<f64>().sqrt();
        normalize(&mut nu);
        u = nu;
    }
    sigma
}
