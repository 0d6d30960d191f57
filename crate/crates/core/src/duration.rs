//! Duration targets, the gloss-pair and sentence duration predictors, and
//! integer frame planning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use signstitch_nn::layers::{BlockConfig, BlockInputs, Linear, Mlp, TransformerBlock};
use signstitch_nn::optim::{cosine_lr, AdamW, AdamWConfig};
use signstitch_nn::{checkpoint, GradMap, Graph, ParamStore, Real, Tensor, Var};

use crate::error::{invalid, CoreError, Result};
use crate::motion::MotionSequence;

pub const SCALE_CLAMP: f64 = 3.0;
pub const K_MAX: usize = 32;
pub const BOUNDARY_WINDOW: usize = 5;
pub const MIN_LEN: usize = 4;
pub const CE_EPS: f64 = 1e-12;

/// `s = ln(T_tgt / T_src)`.
pub fn target_scale(t_src: usize, t_tgt: usize) -> Result<f64> {
    if t_src == 0 || t_tgt == 0 {
        return invalid("lengths must be positive");
    }
    Ok((t_tgt as f64 / t_src as f64).ln())
}

/// Allocation from inclusive gloss spans in a continuous sequence. Each gap
/// is split at its midpoint; frames before the first span go to the first
/// gloss and frames after the last span (up to `total_len`) to the last.
pub fn target_allocation(spans: &[(usize, usize)], total_len: Option<usize>) -> Result<Vec<f64>> {
    if spans.is_empty() {
        return Err(CoreError::Empty("gloss spans"));
    };
    if spans.len() == 1 {
        return Ok(vec![1.0]);
    }
    for w in spans.windows(2) {
        if w[0].0 > w[0].1 || w[0].1 >= w[1].0 {
            return invalid(format!(
                "spans {:?} and {:?} overlap or are unordered",
                w[0], w[1]
            ));
        }
    }
    let last_end = spans[spans.len() - 1].1 + 1;
    let end = total_len.unwrap_or(last_end).max(last_end) as f64;
    let mut bounds = vec![0.0];
    for w in spans.windows(2) {
        bounds.push((w[0].1 + 1 + w[1].0) as f64 / 2.0);
    }
    bounds.push(end);
    let lengths: Vec<f64> = bounds.windows(2).map(|b| b[1] - b[0]).collect();
    let total: f64 = lengths.iter().sum();
    Ok(lengths.iter().map(|l| l / total).collect())
}

/// `ρ_τ(u) = τ·u` for `u ≥ 0`, `(τ − 1)·u` otherwise.
pub fn pinball_loss(u: f64, tau: f64) -> f64 {
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationPrediction {
    /// Log length scale, within `[−3, 3]`.
    pub s: f64,
    /// Allocation over glosses; nonnegative, sums to one.
    pub w: Vec<f64>,
}

/// `ρ_τ(s − ŝ) + λ_split·CE(ŵ, w^GT)` with the log argument floored at 1e-12.
pub fn duration_loss(
    pred: &DurationPrediction,
    s: f64,
    w_gt: &[f64],
    tau: f64,
    lambda_split: f64,
) -> Result<f64> {
    if pred.w.len() != w_gt.len() {
        return Err(CoreError::Dimension(format!(
            "{} predicted vs {} target weights",
            pred.w.len(),
            w_gt.len()
        )));
    }
    let ce: f64 = -w_gt
        .iter()
        .zip(&pred.w)
        .map(|(&t, &p)| t * p.max(CE_EPS).ln())
        .sum::<f64>();
    Ok(pinball_loss(s - pred.s, tau) + lambda_split * ce)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossPlan {
    pub lengths: Vec<usize>,
    pub total: usize,
}

/// Largest-remainder rounding of `weights · total` (ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[k] += 1;
    }
    out
}

/// Integer per-gloss lengths summing to `round(T_src·e^ŝ)` (raised to at
/// least `K·min_len`), each at least `min_len`.
pub fn integer_plan(t_src: usize, pred: &DurationPrediction, min_len: usize) -> Result<GlossPlan> {
    let k = pred.w.len();
    if k == 0 {
        return Err(CoreError::Empty("allocation"));
    }
    if t_src == 0 {
        return invalid("source length must be positive");
    }
    let total = ((t_src as f64 * pred.s.exp()).round() as usize).max(k * min_len);
    let mut lengths = largest_remainder(&pred.w, total);
    for i in 0..k {
        while lengths[i] < min_len {
            let donor = (0..k)
                .filter(|&j| j != i && lengths[j] > min_len)
                .max_by(|&a, &b| lengths[a].cmp(&lengths[b]).then(b.cmp(&a)))
                .expect("total ≥ K·min_len leaves a donor");
            lengths[donor] -= 1;
            lengths[i] += 1;
        }
    }
    Ok(GlossPlan { lengths, total })
}

/// Per-channel mean and (population) standard deviation.
pub fn segment_stats(x: &MotionSequence) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = (x.len() as f64, x.dim());
    let mut mean = vec![0.0; d];
    for i in 0..x.len() {
        for (m, &v) in mean.iter_mut().zip(x.frame(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0; d];
    for i in 0..x.len() {
        for ((s, &v), &m) in var.iter_mut().zip(x.frame(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.iter().map(|v| (v / t).sqrt()).collect())
}

fn window_mean(x: &MotionSequence, from_end: bool) -> Vec<f64> {
    let w = BOUNDARY_WINDOW.min(x.len());
    let start = if from_end { x.len() - w } else { 0 };
    let (m, _) = segment_stats(&x.slice(start, start + w).expect("window inside clip"));
    m
}

/// Pair features: mean/std of each clip, the 5-frame means on either side
/// of the join, the RMS jump across it and `{ln T_a, ln T_b, T_a/(T_a+T_b)}`.
pub fn gloss_pair_features(a: &MotionSequence, b: &MotionSequence) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(CoreError::Dimension("pair clips differ in D".into()));
    }
    let (ma, sa) = segment_stats(a);
    let (mb, sb) = segment_stats(b);
    let wa = window_mean(a, true);
    let wb = window_mean(b, false);
    let last = a.frame(a.len() - 1);
    let first = b.frame(0);
    let jump = (last
        .iter()
        .zip(first)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / a.dim() as f64)
        .sqrt();
    let (ta, tb) = (a.len() as f64, b.len() as f64);
    let mut f = Vec::with_capacity(6 * a.dim() + 4);
    for part in [ma, sa, mb, sb, wa, wb] {
        f.extend(part);
    }
    f.extend([jump, ta.ln(), tb.ln(), ta / (ta + tb)]);
    Ok(f)
}

pub fn pair_feature_dim(d: usize) -> usize {
    6 * d + 4
}

/// One token per gloss: mean/std of its clip plus `{ln T_k, T_k/ΣT, ln ΣT}`.
pub fn sentence_token_features(clips: &[&MotionSequence]) -> Result<Vec<Vec<f64>>> {
    if clips.is_empty() {
        return Err(CoreError::Empty("sentence clips"));
    }
    if clips.len() > K_MAX {
        return invalid(format!("{} glosses exceed K_max = {K_MAX}", clips.len()));
    }
    let total: f64 = clips.iter().map(|c| c.len() as f64).sum();
    Ok(clips
        .iter()
        .map(|c| {
            let (m, s) = segment_stats(c);
            let t = c.len() as f64;
            let mut f = m;
            f.extend(s);
            f.extend([t.ln(), t / total, total.ln()]);
            f
        })
        .collect())
}

pub fn token_feature_dim(d: usize) -> usize {
    2 * d + 3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Gloss,
    #[serde(alias = "sent")]
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationConfig {
    pub which: Which,
    pub hidden: usize,
    /// MLP depth for the pair model, encoder depth for the sentence model.
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub tau: f64,
    pub lambda_split: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self::gloss()
    }
}

impl DurationConfig {
    pub fn gloss() -> Self {
        Self {
            which: Which::Gloss,
            hidden: 256,
            layers: 4,
            heads: 4,
            ffn: 512,
            tau: 0.55,
            lambda_split: 1.0,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 50,
            grad_clip: 1.0,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// Sentence predictor at desk width; depth, heads and schedule as in the
    /// reference setup.
    pub fn sentence() -> Self {
        Self {
            which: Which::Sentence,
            hidden: 64,
            layers: 3,
            heads: 4,
            ffn: 128,
            tau: 0.60,
            epochs: 60,
            ..Self::gloss()
        }
    }
}

/// Training input for either predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DurationInput {
    Pair(Vec<f64>),
    Tokens(Vec<Vec<f64>>),
}

impl DurationInput {
    fn rows(&self) -> Vec<&[f64]> {
        match self {
            Self::Pair(f) => vec![f.as_slice()],
            Self::Tokens(t) => t.iter().map(Vec::as_slice).collect(),
        }
    }

    fn k(&self) -> usize {
        match self {
            Self::Pair(_) => 2,
            Self::Tokens(t) => t.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationSample {
    pub input: DurationInput,
    pub s: f64,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Net {
    Mlp(Mlp),
    Encoder {
        embed: Linear,
        blocks: Vec<TransformerBlock>,
        scale_head: Linear,
        split_head: Linear,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Duration predictor (pair MLP or sentence encoder) with its own input
/// standardization stored alongside the weights.
#[derive(Clone, Debug)]
pub struct DurationModel {
    pub cfg: DurationConfig,
    pub feat_dim: usize,
    pub store: ParamStore<f32>,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    cfg: DurationConfig,
    feat_dim: usize,
}

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

impl DurationModel {
    pub fn new(cfg: DurationConfig, feat_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let net = match cfg.which {
            Which::Gloss => {
                let mut dims = vec![feat_dim];
                dims.extend(std::iter::repeat_n(h, cfg.layers.saturating_sub(1)));
                let mut mlp = Mlp::new(&mut store, &mut rng, "dgloss", &dims, cfg.dropout);
                let last = Linear::zeroed(
                    &mut store,
                    &format!("dgloss.{}", dims.len() - 1),
                    dims[dims.len() - 1],
                    3,
                );
                mlp.layers.push(last);
                Net::Mlp(mlp)
            }
            Which::Sentence => {
                let embed = Linear::new(&mut store, &mut rng, "dsent.embed", feat_dim, h);
                let bc = BlockConfig {
                    dim: h,
                    heads: cfg.heads,
                    ffn: cfg.ffn,
                    cross: false,
                    rope: true,
                    dropout: cfg.dropout,
                };
                let blocks = (0..cfg.layers)
                    .map(|i| {
                        TransformerBlock::new(&mut store, &mut rng, &format!("dsent.block{i}"), bc)
                    })
                    .collect();
                Net::Encoder {
                    embed,
                    blocks,
                    scale_head: Linear::zeroed(&mut store, "dsent.scale", h, 1),
                    split_head: Linear::zeroed(&mut store, "dsent.split", h, 1),
                }
            }
        };
        store.zeros(NORM_MEAN, &[feat_dim]);
        store.ones(NORM_STD, &[feat_dim]);
        Self {
            cfg,
            feat_dim,
            store,
            net,
        }
    }

    /// Sets input standardization from training inputs.
    pub fn fit_normalizer(&mut self, samples: &[DurationSample]) {
        let rows: Vec<&[f64]> = samples.iter().flat_map(|s| s.input.rows()).collect();
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; self.feat_dim];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.feat_dim];
        for r in &rows {
            for ((s, &v), &m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-4)).collect();
        self.store.insert(
            NORM_MEAN,
            Tensor::from_f64(&[self.feat_dim], &mean).expect("dim"),
        );
        self.store.insert(
            NORM_STD,
            Tensor::from_f64(&[self.feat_dim], &std).expect("dim"),
        );
    }

    fn standardize<R: Real>(&self, store: &ParamStore<R>, rows: &[&[f64]]) -> Result<Tensor<R>> {
        let mean = store
            .get(NORM_MEAN)
            .ok_or_else(|| CoreError::Format("missing normalizer".into()))?;
        let std = store
            .get(NORM_STD)
            .ok_or_else(|| CoreError::Format("missing normalizer".into()))?;
        let mut data = Vec::with_capacity(rows.len() * self.feat_dim);
        for r in rows {
            if r.len() != self.feat_dim {
                return Err(CoreError::Dimension(format!(
                    "feature length {} vs {}",
                    r.len(),
                    self.feat_dim
                )));
            }
            for ((&v, &m), &s) in r.iter().zip(mean.data()).zip(std.data()) {
                data.push(R::of((v - m.as_f64()) / s.as_f64()));
            }
        }
        Ok(Tensor::new(vec![rows.len(), self.feat_dim], data)?)
    }

    /// Clamped scale `[B, 1]` and allocation `[B, K]` (B = 1 for a sentence).
    fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        inputs: &[&DurationInput],
    ) -> Result<(Var, Var)> {
        match &self.net {
            Net::Mlp(mlp) => {
                let rows: Vec<&[f64]> = inputs
                    .iter()
                    .map(|i| match i {
                        DurationInput::Pair(f) => Ok(f.as_slice()),
                        DurationInput::Tokens(_) => invalid("pair model given sentence tokens"),
                    })
                    .collect::<Result<_>>()?;
                let x = g.constant(self.standardize(store, &rows)?);
                let out = mlp.forward(g, store, x)?;
                let s = g.slice_cols(out, 0, 1)?;
                let s = g.clamp(s, -SCALE_CLAMP, SCALE_CLAMP);
                let logits = g.slice_cols(out, 1, 3)?;
                Ok((s, g.softmax(logits)))
            }
            Net::Encoder {
                embed,
                blocks,
                scale_head,
                split_head,
            } => {
                let [DurationInput::Tokens(tokens)] = inputs else {
                    return invalid("sentence model takes exactly one token sequence");
                };
                if tokens.is_empty() || tokens.len() > K_MAX {
                    return invalid(format!("{} tokens, expected 1..={K_MAX}", tokens.len()));
                }
                let rows: Vec<&[f64]> = tokens.iter().map(Vec::as_slice).collect();
                let x = g.constant(self.standardize(store, &rows)?);
                let mut h = embed.forward(g, store, x)?;
                let positions: Vec<f64> = (0..tokens.len()).map(|i| i as f64).collect();
                let inp = BlockInputs {
                    positions: &positions,
                    key_mask: None,
                    memory: None,
                    memory_positions: None,
                };
                for b in blocks {
                    h = b.forward(g, store, h, &inp)?;
                }
                let pooled = g.mean_rows(h);
                let s = scale_head.forward(g, store, pooled)?;
                let s = g.clamp(s, -SCALE_CLAMP, SCALE_CLAMP);
                let logits = split_head.forward(g, store, h)?;
                let logits = g.transpose(logits);
                Ok((s, g.softmax(logits)))
            }
        }
    }

    /// Mean duration loss over `samples`, as a graph node.
    pub fn loss_graph<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        samples: &[&DurationSample],
    ) -> Result<Var> {
        let mut parts = Vec::new();
        match self.net {
            Net::Mlp(_) => {
                let inputs: Vec<&DurationInput> = samples.iter().map(|s| &s.input).collect();
                let (s_hat, w_hat) = self.forward(g, store, &inputs)?;
                parts.push(self.loss_terms(g, s_hat, w_hat, samples)?);
            }
            Net::Encoder { .. } => {
                for s in samples {
                    let (s_hat, w_hat) = self.forward(g, store, &[&s.input])?;
                    parts.push(self.loss_terms(g, s_hat, w_hat, &[s])?);
                }
            }
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        Ok(g.scale(total, R::of(1.0 / samples.len() as f64)))
    }

    /// Summed (not averaged) loss of a batch whose predictions are rows.
    fn loss_terms<R: Real>(
        &self,
        g: &mut Graph<R>,
        s_hat: Var,
        w_hat: Var,
        samples: &[&DurationSample],
    ) -> Result<Var> {
        let k = g.value(w_hat).cols();
        let s_tgt: Vec<f64> = samples.iter().map(|s| s.s).collect();
        let mut w_tgt = Vec::with_capacity(samples.len() * k);
        for s in samples {
            if s.w.len() != k {
                return Err(CoreError::Dimension(format!(
                    "target split of {} for {k} outputs",
                    s.w.len()
                )));
            }
            w_tgt.extend_from_slice(&s.w);
        }
        let st = g.constant(Tensor::from_f64(&[samples.len(), 1], &s_tgt)?);
        let resid = g.sub(st, s_hat)?;
        let pin = g.pinball(resid, self.cfg.tau);
        let pin = g.sum(pin);
        let logw = g.ln(w_hat, CE_EPS);
        let weighted = g.mul_const(logw, &Tensor::from_f64(&[samples.len(), k], &w_tgt)?)?;
        let ce = g.sum(weighted);
        let ce = g.scale(ce, R::of(-self.cfg.lambda_split));
        Ok(g.add(pin, ce)?)
    }

    pub fn predict(&self, input: &DurationInput) -> Result<DurationPrediction> {
        let mut g = Graph::<f32>::new();
        let (s, w) = self.forward(&mut g, &self.store, &[input])?;
        let k = input.k();
        let w: Vec<f64> = g.value(w).to_f64_vec();
        debug_assert_eq!(w.len(), k);
        Ok(DurationPrediction {
            s: g.value(s).item() as f64,
            w,
        })
    }

    fn batch_grads(&self, batch: &[&DurationSample], seed: u64) -> Result<(GradMap<f32>, f64)> {
        let run = |samples: &[&DurationSample], seed: u64| -> Result<(GradMap<f32>, f64)> {
            let mut g = if self.cfg.dropout > 0.0 {
                Graph::training(seed)
            } else {
                Graph::new()
            };
            let loss = self.loss_graph(&mut g, &self.store, samples)?;
            let mut gm = GradMap::new();
            gm.accumulate(&g.backward(loss)?);
            Ok((gm, g.value(loss).item() as f64))
        };
        match self.net {
            Net::Mlp(_) => run(batch, seed),
            Net::Encoder { .. } => {
                let per: Vec<(GradMap<f32>, f64)> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| run(&[*s], seed.wrapping_add(i as u64)))
                    .collect::<Result<_>>()?;
                let mut total = GradMap::new();
                let mut loss = 0.0;
                for (gm, l) in &per {
                    total.merge(gm);
                    loss += l;
                }
                total.scale(1.0 / batch.len() as f64);
                Ok((total, loss / batch.len() as f64))
            }
        }
    }

    /// AdamW with cosine decay and global-norm clipping. Deterministic for a
    /// given seed regardless of worker count.
    pub fn train(&mut self, samples: &[DurationSample]) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(CoreError::Empty("duration training set"));
        }
        self.fit_normalizer(samples);
        let cfg = self.cfg.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let bs = cfg.batch_size.max(1);
        let steps_per_epoch = samples.len().div_ceil(bs);
        let total_steps = steps_per_epoch * cfg.epochs;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut report = TrainReport::default();
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(bs) {
                let batch: Vec<&DurationSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (mut grads, loss) =
                    self.batch_grads(&batch, cfg.seed.wrapping_add(step as u64))?;
                grads.clip_global_norm(cfg.grad_clip);
                let lr = cosine_lr(cfg.lr, step, total_steps, 0);
                opt.step(&mut self.store, &grads, lr)?;
                epoch_loss += loss * batch.len() as f64;
                step += 1;
            }
            report.epoch_losses.push(epoch_loss / samples.len() as f64);
        }
        report.steps = step;
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(path, &self.store)?;
        let side = Sidecar {
            cfg: self.cfg.clone(),
            feat_dim: self.feat_dim,
        };
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&side)?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let mut model = Self::new(side.cfg, side.feat_dim);
        let store: ParamStore<f32> = checkpoint::load(path)?;
        for name in model.store.names() {
            if !store.contains(name) {
                return Err(CoreError::Format(format!("checkpoint lacks {name}")));
            }
        }
        model.store = store;
        Ok(model)
    }
}
