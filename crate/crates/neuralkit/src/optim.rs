use indexmap::IndexMap;

use crate::error::Result;
use crate::params::{GradMap, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay:
/// `θ ← θ(1 − lr·wd) − lr·m̂ / (√v̂ + ε)`.
#[derive(Clone, Debug)]
pub struct AdamW<R> {
    pub config: AdamWConfig,
    step: u64,
    m: IndexMap<String, Vec<R>>,
    v: IndexMap<String, Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr` (pass `config.lr` for a constant
    /// schedule). Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &GradMap<R>, lr: f64) -> Result<()> {
        grads.check_against(store)?;
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
        let decay = R::of(1.0 - lr * c.weight_decay);
        let lr_r = R::of(lr);
        let (bc1, bc2, eps) = (R::of(bc1), R::of(bc2), R::of(c.eps));
        for (name, g) in grads.iter() {
            let p: &mut Tensor<R> = store.get_mut(name).expect("checked above");
            let n = p.numel();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![R::zero(); n]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![R::zero(); n]);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (R::one() - b1) * gi;
                *vi = b2 * *vi + (R::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi * decay - lr_r * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps after a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup.min(step)) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// EMA decay with the usual warmup so early averages are not dominated by
/// the random initialization; converges to `max_decay`.
pub fn ema_decay(max_decay: f64, step: u64) -> f64 {
    max_decay.min((1.0 + step as f64) / (10.0 + step as f64))
}
