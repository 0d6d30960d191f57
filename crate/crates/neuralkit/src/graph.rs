//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every op records its inputs (and whatever forward cache the backward pass
//! needs) as a node; `backward` walks the tape in reverse.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Options for [`Graph::attention`].
#[derive(Clone, Debug, Default)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    /// `false` entries exclude the corresponding key row.
    pub key_mask: Option<Vec<bool>>,
}

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    MulConst(Var, Vec<R>),
    OuterConst(Var, Vec<R>),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<R>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<R>,
        sin: Vec<R>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    DiffRows(Var),
    MeanRows(Var),
    Sum(Var),
    Huber(Var, R),
    Pinball(Var, R),
    Clamp(Var, R, R),
    Ln(Var, R),
    Dropout(Var, Vec<R>),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    params: Vec<(String, Var)>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    params: Vec<(String, Var)>,
}

impl<R: Real> Gradients<R> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in registration order. A parameter that was
    /// registered but did not influence the loss yields no entry.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].as_ref().map(|g| (n.as_str(), g)))
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            dropout_rng: None,
        }
    }

    /// A graph whose dropout layers are active, driven by a seeded stream.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that takes a gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a named parameter from `store` as a differentiable leaf.
    /// Repeated lookups of the same name reuse the node.
    pub fn param(&mut self, store: &ParamStore<R>, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b), false, false)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let cols = xv.cols();
        if bv.numel() != cols {
            return shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant of the same shape (masks, weights).
    pub fn mul_const(&mut self, a: Var, c: &Tensor<R>) -> Result<Var> {
        let av = self.value(a);
        if av.numel() != c.numel() {
            return shape_err("mul_const", format!("{:?} vs {:?}", av.shape(), c.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c.data().to_vec()), ng))
    }

    /// `out[i, j] = coeffs[i] · row[j]`.
    pub fn outer_const(&mut self, row: Var, coeffs: &[R]) -> Var {
        let rv = self.value(row);
        let m = rv.numel();
        let mut data = Vec::with_capacity(coeffs.len() * m);
        for &c in coeffs {
            data.extend(rv.data().iter().map(|&r| c * r));
        }
        let out = Tensor::new(vec![coeffs.len(), m], data).expect("outer shape");
        let ng = self.ng(row);
        self.push(out, Op::OuterConst(row, coeffs.to_vec()), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let (t, _) = gelu_parts(x);
            R::of(0.5) * x * (R::one() + t)
        });
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != cols || bv.numel() != cols {
            return shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}", xv.shape(), gv.shape()),
            );
        }
        let eps = R::of(eps);
        let n = R::of(cols as f64);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xv.data().chunks(cols) {
            let mean = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            let is = R::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Multi-head scaled dot-product attention. `q` is `[n, E]`, `k`/`v` are
    /// `[m, E]` with `E = heads · head_dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, e) = (qv.rows(), qv.cols());
        let m = kv.rows();
        let heads = spec.heads;
        if heads == 0 || e % heads != 0 || kv.cols() != e || vv.cols() != e || vv.rows() != m {
            return shape_err(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} heads {heads}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            );
        }
        if spec.causal && n != m {
            return shape_err(
                "attention",
                "causal attention needs equal query/key lengths",
            );
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != m {
                return shape_err("attention", format!("key mask {} for {m} keys", mask.len()));
            }
        }
        let dh = e / heads;
        let scale = R::one() / R::of(dh as f64).sqrt();
        let mut probs = vec![R::zero(); heads * n * m];
        let mut out = Tensor::zeros(&[n, e]);
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            R::gemm(
                n,
                dh,
                m,
                &qv.data()[off..],
                e as isize,
                1,
                &kv.data()[off..],
                1,
                e as isize,
                R::zero(),
                p,
                m as isize,
                1,
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                let mut any = false;
                for (j, s) in row.iter_mut().enumerate() {
                    let masked =
                        (spec.causal && j > i) || spec.key_mask.as_ref().is_some_and(|mk| !mk[j]);
                    if masked {
                        *s = R::neg_infinity();
                    } else {
                        *s *= scale;
                        any = true;
                    }
                }
                if any {
                    softmax_in_place(row);
                } else {
                    row.iter_mut().for_each(|s| *s = R::zero());
                }
            }
            R::gemm(
                n,
                m,
                dh,
                p,
                m as isize,
                1,
                &vv.data()[off..],
                e as isize,
                1,
                R::zero(),
                &mut out.data_mut()[off..],
                e as isize,
                1,
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Rotary position embedding applied per head, rotating the two halves of
    /// each head's channels (`x_p` paired with `x_{p + head_dim/2}`).
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[f64], base: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, e) = (xv.rows(), xv.cols());
        if heads == 0
            || !e.is_multiple_of(heads)
            || !(e / heads).is_multiple_of(2)
            || positions.len() != n
        {
            return shape_err(
                "rope",
                format!(
                    "x {:?}, heads {heads}, {} positions",
                    xv.shape(),
                    positions.len()
                ),
            );
        }
        let dh = e / heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &pos in positions {
            for p in 0..half {
                let freq = base.powf(-2.0 * p as f64 / dh as f64);
                let (s, c) = (pos * freq).sin_cos();
                cos.push(R::of(c));
                sin.push(R::of(s));
            }
        }
        let mut out = xv.clone();
        let src = xv.data();
        let dst = out.data_mut();
        for i in 0..n {
            for h in 0..heads {
                let base_idx = i * e + h * dh;
                for p in 0..half {
                    let (c, s) = (cos[i * half + p], sin[i * half + p]);
                    let a = src[base_idx + p];
                    let b = src[base_idx + p + half];
                    dst[base_idx + p] = a * c - b * s;
                    dst[base_idx + p + half] = a * s + b * c;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Rope { x, heads, cos, sin }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start >= end || end > cols {
            return shape_err("slice_cols", format!("{start}..{end} of {cols}"));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for row in xv.data().chunks(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return shape_err("concat_cols", "no inputs"),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = transpose(xv);
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// `out[i] = x[i + 1] - x[i]`; output has one row fewer.
    pub fn diff_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows < 2 {
            return shape_err("diff_rows", format!("{rows} rows"));
        }
        let d = xv.data();
        let data = (0..(rows - 1) * cols).map(|i| d[i + cols] - d[i]).collect();
        let out = Tensor::new(vec![rows - 1, cols], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::DiffRows(x), ng))
    }

    /// Column means, `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = vec![R::zero(); cols];
        for row in xv.data().chunks(cols) {
            for (a, &b) in data.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = R::one() / R::of(rows as f64);
        data.iter_mut().for_each(|a| *a *= inv);
        let out = Tensor::new(vec![1, cols], data).expect("mean_rows shape");
        let ng = self.ng(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<R>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, R::one() / R::of(n as f64))
    }

    /// Elementwise Smooth-L1 with transition `beta`.
    pub fn huber(&mut self, x: Var, beta: f64) -> Var {
        let b = R::of(beta);
        let half = R::of(0.5);
        let out = self.value(x).map(|u| {
            if u.abs() < b {
                half * u * u / b
            } else {
                u.abs() - half * b
            }
        });
        let ng = self.ng(x);
        self.push(out, Op::Huber(x, b), ng)
    }

    /// Elementwise pinball loss `ρ_τ(u)`.
    pub fn pinball(&mut self, x: Var, tau: f64) -> Var {
        let t = R::of(tau);
        let out = self.value(x).map(|u| {
            if u >= R::zero() {
                t * u
            } else {
                (t - R::one()) * u
            }
        });
        let ng = self.ng(x);
        self.push(out, Op::Pinball(x, t), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (R::of(lo), R::of(hi));
        let out = self.value(x).map(|u| u.max(l).min(h));
        let ng = self.ng(x);
        self.push(out, Op::Clamp(x, l, h), ng)
    }

    /// `ln(max(x, eps))`.
    pub fn ln(&mut self, x: Var, eps: f64) -> Var {
        let e = R::of(eps);
        let out = self.value(x).map(|u| u.max(e).ln());
        let ng = self.ng(x);
        self.push(out, Op::Ln(x, e), ng)
    }

    /// Inverted dropout. Identity unless the graph was built with
    /// [`Graph::training`] and `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = R::of(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<R> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    R::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("dropout shape");
        let ng = self.ng(x);
        self.push(out, Op::Dropout(x, mask), ng)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), R::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(
        &self,
        node: &Node<R>,
        g: &Tensor<R>,
        grads: &mut [Option<Tensor<R>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<R>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let shaped = |v: Var, data: Vec<R>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("grad shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = matmul(g, self.value(*b), false, true)?;
                    acc(*a, ga.reshape(self.value(*a).shape().to_vec())?);
                }
                if self.ng(*b) {
                    let gb = matmul(self.value(*a), g, true, false)?;
                    acc(*b, gb.reshape(self.value(*b).shape().to_vec())?);
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.ng(*b) {
                    let cols = g.cols();
                    let mut gb = vec![R::zero(); cols];
                    for row in g.data().chunks(cols) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*b, shaped(*b, gb));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    acc(*a, shaped(*a, d));
                }
                if self.ng(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    acc(*b, shaped(*b, d));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::MulConst(a, c) => {
                let d = g.data().iter().zip(c).map(|(&x, &y)| x * y).collect();
                acc(*a, shaped(*a, d));
            }
            Op::OuterConst(row, coeffs) => {
                let m = self.value(*row).numel();
                let mut gr = vec![R::zero(); m];
                for (grow, &c) in g.data().chunks(m).zip(coeffs) {
                    for (a, &v) in gr.iter_mut().zip(grow) {
                        *a += c * v;
                    }
                }
                acc(*row, shaped(*row, gr));
            }
            Op::Gelu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gy, &x)| {
                        let (t, du) = gelu_parts(x);
                        let half = R::of(0.5);
                        gy * (half * (R::one() + t) + half * x * (R::one() - t * t) * du)
                    })
                    .collect();
                acc(*a, shaped(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gy, &s)| gy * s * (R::one() - s))
                    .collect();
                acc(*a, shaped(*a, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = g.cols();
                let gam = self.value(*gamma).data();
                let n = R::of(cols as f64);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = vec![R::zero(); cols];
                    let mut gbt = vec![R::zero(); cols];
                    for (grow, hrow) in g.data().chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += grow[j] * hrow[j];
                            gbt[j] += grow[j];
                        }
                    }
                    acc(*gamma, shaped(*gamma, gg));
                    acc(*beta, shaped(*beta, gbt));
                }
                if self.ng(*x) {
                    let mut gx = Vec::with_capacity(g.numel());
                    for ((grow, hrow), &is) in
                        g.data().chunks(cols).zip(xhat.chunks(cols)).zip(inv_std)
                    {
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for j in 0..cols {
                            let dh = grow[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        for j in 0..cols {
                            let dh = grow[j] * gam[j];
                            gx.push(is / n * (n * dh - s1 - hrow[j] * s2));
                        }
                    }
                    acc(*x, shaped(*x, gx));
                }
            }
            Op::Softmax(a) => {
                let cols = g.cols();
                let mut d = Vec::with_capacity(g.numel());
                for (grow, prow) in g.data().chunks(cols).zip(node.value.data().chunks(cols)) {
                    let dot: R = grow.iter().zip(prow).map(|(&x, &p)| x * p).sum();
                    d.extend(grow.iter().zip(prow).map(|(&x, &p)| p * (x - dot)));
                }
                acc(*a, shaped(*a, d));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, e) = (qv.rows(), qv.cols());
                let m = kv.rows();
                let dh = e / heads;
                let scale = R::one() / R::of(dh as f64).sqrt();
                let mut gq = Tensor::zeros(qv.shape());
                let mut gk = Tensor::zeros(kv.shape());
                let mut gv = Tensor::zeros(vv.shape());
                let mut dp = vec![R::zero(); n * m];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    // dP = dO · Vᵀ
                    R::gemm(
                        n,
                        dh,
                        m,
                        &g.data()[off..],
                        e as isize,
                        1,
                        &vv.data()[off..],
                        1,
                        e as isize,
                        R::zero(),
                        &mut dp,
                        m as isize,
                        1,
                    );
                    // dV += Pᵀ · dO
                    R::gemm(
                        m,
                        n,
                        dh,
                        p,
                        1,
                        m as isize,
                        &g.data()[off..],
                        e as isize,
                        1,
                        R::one(),
                        &mut gv.data_mut()[off..],
                        e as isize,
                        1,
                    );
                    for i in 0..n {
                        let prow = &p[i * m..(i + 1) * m];
                        let drow = &mut dp[i * m..(i + 1) * m];
                        let dot: R = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dot) * scale;
                        }
                    }
                    // dQ += dS · K ; dK += dSᵀ · Q
                    R::gemm(
                        n,
                        m,
                        dh,
                        &dp,
                        m as isize,
                        1,
                        &kv.data()[off..],
                        e as isize,
                        1,
                        R::one(),
                        &mut gq.data_mut()[off..],
                        e as isize,
                        1,
                    );
                    R::gemm(
                        m,
                        n,
                        dh,
                        &dp,
                        1,
                        m as isize,
                        &qv.data()[off..],
                        e as isize,
                        1,
                        R::one(),
                        &mut gk.data_mut()[off..],
                        e as isize,
                        1,
                    );
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::Rope { x, heads, cos, sin } => {
                let xv = self.value(*x);
                let (n, e) = (xv.rows(), xv.cols());
                let dh = e / heads;
                let half = dh / 2;
                let mut gx = vec![R::zero(); n * e];
                let gd = g.data();
                for i in 0..n {
                    for h in 0..*heads {
                        let b = i * e + h * dh;
                        for p in 0..half {
                            let (c, s) = (cos[i * half + p], sin[i * half + p]);
                            let (ga, gb) = (gd[b + p], gd[b + p + half]);
                            gx[b + p] = ga * c + gb * s;
                            gx[b + p + half] = gb * c - ga * s;
                        }
                    }
                }
                acc(*x, shaped(*x, gx));
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut gx = vec![R::zero(); rows * cols];
                for i in 0..rows {
                    gx[i * cols + start..i * cols + start + w].copy_from_slice(g.row(i));
                }
                acc(*x, shaped(*x, gx));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            gp.extend_from_slice(&g.row(i)[off..off + w]);
                        }
                        acc(p, shaped(p, gp));
                    }
                    off += w;
                }
            }
            Op::Transpose(x) => {
                let t = transpose(g);
                acc(*x, t.reshape(self.value(*x).shape().to_vec())?);
            }
            Op::DiffRows(x) => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut gx = vec![R::zero(); rows * cols];
                for (i, &gi) in g.data().iter().enumerate() {
                    gx[i + cols] += gi;
                    gx[i] -= gi;
                }
                acc(*x, shaped(*x, gx));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let inv = R::one() / R::of(xv.rows() as f64);
                let cols = xv.cols();
                let mut gx = Vec::with_capacity(xv.numel());
                for _ in 0..xv.rows() {
                    gx.extend(g.data()[..cols].iter().map(|&v| v * inv));
                }
                acc(*x, shaped(*x, gx));
            }
            Op::Sum(x) => {
                let s = g.item();
                acc(*x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::Huber(x, b) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gy, &u)| {
                        if u.abs() < *b {
                            gy * u / *b
                        } else {
                            gy * u.signum()
                        }
                    })
                    .collect();
                acc(*x, shaped(*x, d));
            }
            Op::Pinball(x, t) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gy, &u)| {
                        if u >= R::zero() {
                            gy * *t
                        } else {
                            gy * (*t - R::one())
                        }
                    })
                    .collect();
                acc(*x, shaped(*x, d));
            }
            Op::Clamp(x, lo, hi) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gy, &u)| if u >= *lo && u <= *hi { gy } else { R::zero() })
                    .collect();
                acc(*x, shaped(*x, d));
            }
            Op::Ln(x, eps) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gy, &u)| if u > *eps { gy / u } else { R::zero() })
                    .collect();
                acc(*x, shaped(*x, d));
            }
            Op::Dropout(x, mask) => {
                let d = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(*x, shaped(*x, d));
            }
        }
        Ok(())
    }
}

fn gelu_parts<R: Real>(x: R) -> (R, R) {
    let c = R::of((2.0 / std::f64::consts::PI).sqrt());
    let k = R::of(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    let du = c * (R::one() + R::of(3.0) * k * x * x);
    (t, du)
}

pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn transpose<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut data = vec![R::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            data[j * rows + i] = x.data()[i * cols + j];
        }
    }
    Tensor::new(vec![cols, rows], data).expect("transpose shape")
}
