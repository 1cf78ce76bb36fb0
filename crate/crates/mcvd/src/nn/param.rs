use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::real::Real;

/// Named parameter tensors in deterministic insertion order. Paths are
/// dotted strings assigned at network construction time.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    map: IndexMap<String, ArrayD<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: ArrayD<T>) {
        let path = path.into();
        let prev = self.map.insert(path.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    /// Allocates a tensor filled from N(0, std^2). Draws are f64 casts so the
    /// rng stream is identical for every element type.
    pub fn insert_gaussian<R: Rng>(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        self.insert(path, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn insert_const(&mut self, path: impl Into<String>, shape: &[usize], value: f64) {
        self.insert(
            path,
            ArrayD::from_elem(IxDyn(shape), T::from_f64(value)),
        );
    }

    pub fn get(&self, path: &str) -> &ArrayD<T> {
        self.map
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn get_mut(&mut self, path: &str) -> &mut ArrayD<T> {
        self.map
            .get_mut(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.map.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            out.insert(k.clone(), v.mapv(|x| U::from_f64(x.as_f64())));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.map
            .values()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator mirroring a [`ParamStore`]'s paths.
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    map: IndexMap<String, ArrayD<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn new() -> Self {
        GradStore {
            map: IndexMap::new(),
        }
    }

    /// Zero gradients laid out like the parameters, in the same order.
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let mut map = IndexMap::new();
        for (k, v) in params.iter() {
            map.insert(k.clone(), ArrayD::zeros(v.raw_dim()));
        }
        GradStore { map }
    }

    pub fn accumulate(&mut self, path: &str, grad: ArrayD<T>) {
        match self.map.get_mut(path) {
            Some(g) => g.zip_mut_with(&grad, |a, &b| *a = *a + b),
            None => {
                self.map.insert(path.to_string(), grad);
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&ArrayD<T>> {
        self.map.get(path)
    }

    /// Adds another gradient store elementwise.
    pub fn add_assign(&mut self, other: &GradStore<T>) {
        for (k, v) in other.map.iter() {
            self.accumulate(k, v.clone());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Global L2 norm across every coordinate, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }
}

impl<T: Real> Default for GradStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
