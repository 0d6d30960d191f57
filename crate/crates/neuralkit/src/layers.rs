//! Parameterized building blocks. Each layer only remembers parameter names;
//! values live in a [`ParamStore`] so the same layer runs in f32 or f64.

use rand::Rng;

use crate::error::Result;
use crate::graph::{AttentionSpec, Graph, Var};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.xavier(&w, d_in, d_out, rng);
        store.zeros(&b, &[d_out]);
        Self { w, b, d_in, d_out }
    }

    /// Same layer with zero weights, for output heads that must start at a
    /// known value.
    pub fn zeroed<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.zeros(&w, &[d_in, d_out]);
        store.zeros(&b, &[d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.ones(&gamma, &[dim]);
        store.zeros(&beta, &[dim]);
        Self { gamma, beta }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let gm = g.param(store, &self.gamma)?;
        let bt = g.param(store, &self.beta)?;
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    /// `dims` lists layer widths including input and output.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        dropout: f64,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, dropout }
    }

    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        mut x: Var,
    ) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i < last {
                x = g.gelu(x);
                x = g.dropout(x, self.dropout);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub cross: bool,
    pub rope: bool,
    pub dropout: f64,
}

/// Pre-norm transformer block: self-attention, optional cross-attention to
/// a memory sequence, then a GELU feed-forward, each with a residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: BlockConfig,
    ln_self: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    cross: Option<CrossAttn>,
    ln_ffn: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct CrossAttn {
    ln: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

/// Per-call inputs for [`TransformerBlock::forward`].
pub struct BlockInputs<'a> {
    pub positions: &'a [f64],
    pub key_mask: Option<&'a [bool]>,
    pub memory: Option<Var>,
    pub memory_positions: Option<&'a [f64]>,
}

impl TransformerBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        cfg: BlockConfig,
    ) -> Self {
        let d = cfg.dim;
        let cross = cfg.cross.then(|| CrossAttn {
            ln: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            q: Linear::new(store, rng, &format!("{name}.cq"), d, d),
            k: Linear::new(store, rng, &format!("{name}.ck"), d, d),
            v: Linear::new(store, rng, &format!("{name}.cv"), d, d),
            o: Linear::new(store, rng, &format!("{name}.co"), d, d),
        });
        Self {
            cfg,
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            cross,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, cfg.ffn),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), cfg.ffn, d),
        }
    }

    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        x: Var,
        inp: &BlockInputs<'_>,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        let h = self.ln_self.forward(g, store, x)?;
        let mut q = self.q.forward(g, store, h)?;
        let mut k = self.k.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;
        if self.cfg.rope {
            q = g.rope(q, heads, inp.positions, ROPE_BASE)?;
            k = g.rope(k, heads, inp.positions, ROPE_BASE)?;
        }
        let spec = AttentionSpec {
            heads,
            causal: false,
            key_mask: inp.key_mask.map(<[bool]>::to_vec),
        };
        let a = g.attention(q, k, v, &spec)?;
        let a = self.o.forward(g, store, a)?;
        let a = g.dropout(a, self.cfg.dropout);
        let mut x = g.add(x, a)?;

        if let (Some(c), Some(mem)) = (&self.cross, inp.memory) {
            let h = c.ln.forward(g, store, x)?;
            let mut q = c.q.forward(g, store, h)?;
            let mut k = c.k.forward(g, store, mem)?;
            let v = c.v.forward(g, store, mem)?;
            if self.cfg.rope {
                let mem_pos = inp.memory_positions.unwrap_or(inp.positions);
                q = g.rope(q, heads, inp.positions, ROPE_BASE)?;
                k = g.rope(k, heads, mem_pos, ROPE_BASE)?;
            }
            let spec = AttentionSpec {
                heads,
                causal: false,
                key_mask: None,
            };
            let a = g.attention(q, k, v, &spec)?;
            let a = c.o.forward(g, store, a)?;
            let a = g.dropout(a, self.cfg.dropout);
            x = g.add(x, a)?;
        }

        let h = self.ln_ffn.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, store, h)?;
        let h = g.dropout(h, self.cfg.dropout);
        g.add(x, h)
    }
}

/// Sinusoidal embedding of a scalar: `[sin(t·f_i)…, cos(t·f_i)…]` with
/// `f_i = 10000^(−i/(dim/2))`.
pub fn sinusoidal_embedding<R: Real>(t: f64, dim: usize) -> Tensor<R> {
    let half = dim / 2;
    let mut data = vec![R::zero(); dim];
    for i in 0..half {
        let f = ROPE_BASE.powf(-(i as f64) / half.max(1) as f64);
        data[i] = R::of((t * f).sin());
        data[half + i] = R::of((t * f).cos());
    }
    Tensor::new(vec![1, dim], data).expect("embedding shape")
}
