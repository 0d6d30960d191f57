use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_err, NnError, Result};
use crate::graph::Gradients;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Entry<R> {
    value: Tensor<R>,
    ema: Tensor<R>,
}

/// Named parameters plus their exponential moving averages, kept in
/// insertion order so iteration (and therefore serialization) is stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    entries: IndexMap<String, Entry<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>) {
        let ema = value.clone();
        self.entries.insert(name.into(), Entry { value, ema });
    }

    pub fn insert_with_ema(
        &mut self,
        name: impl Into<String>,
        value: Tensor<R>,
        ema: Tensor<R>,
    ) -> Result<()> {
        if value.shape() != ema.shape() {
            return shape_err(
                "insert_with_ema",
                format!("{:?} vs {:?}", value.shape(), ema.shape()),
            );
        }
        self.entries.insert(name.into(), Entry { value, ema });
        Ok(())
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], limit, rng);
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], limit: f64, rng: &mut impl Rng) {
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| R::of(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, R::one()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn ema(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.get(name).map(|e| &e.ema)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>, &Tensor<R>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.value, &e.ema))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// `ema ← decay·ema + (1 − decay)·value` for every parameter.
    pub fn update_ema(&mut self, decay: f64) {
        let d = R::of(decay);
        let one_m = R::one() - d;
        for e in self.entries.values_mut() {
            for (s, &v) in e.ema.data_mut().iter_mut().zip(e.value.data()) {
                *s = d * *s + one_m * v;
            }
        }
    }

    /// Copy of the store whose live values are the EMA weights.
    pub fn ema_snapshot(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                (
                    k.clone(),
                    Entry {
                        value: e.ema.clone(),
                        ema: e.ema.clone(),
                    },
                )
            })
            .collect();
        Self { entries }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                (
                    k.clone(),
                    Entry {
                        value: e.value.cast(),
                        ema: e.ema.cast(),
                    },
                )
            })
            .collect();
        ParamStore { entries }
    }
}

/// Accumulated parameter gradients keyed by name.
#[derive(Clone, Debug, Default)]
pub struct GradMap<R> {
    grads: IndexMap<String, Tensor<R>>,
}

impl<R: Real> GradMap<R> {
    pub fn new() -> Self {
        Self {
            grads: IndexMap::new(),
        }
    }

    pub fn accumulate(&mut self, g: &Gradients<R>) {
        for (name, t) in g.params() {
            self.add(name, t);
        }
    }

    pub fn add(&mut self, name: &str, t: &Tensor<R>) {
        match self.grads.get_mut(name) {
            Some(existing) => existing.add_assign(t),
            None => {
                self.grads.insert(name.to_string(), t.clone());
            }
        }
    }

    /// Adds every entry of `other` (used to reduce per-worker batches in a
    /// fixed order).
    pub fn merge(&mut self, other: &GradMap<R>) {
        for (name, t) in &other.grads {
            self.add(name, t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        let s = R::of(s);
        for t in self.grads.values_mut() {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn check_against(&self, store: &ParamStore<R>) -> Result<()> {
        for (name, g) in &self.grads {
            let p = store
                .get(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return shape_err(
                    "GradMap",
                    format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
                );
            }
        }
        Ok(())
    }
}
