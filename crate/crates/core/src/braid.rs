//! Boundary-refinement diffusion: noise schedule, inpainting masks, masked
//! part-weighted losses, the transformer denoiser and DDIM composition.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use signstitch_nn::layers::{
    sinusoidal_embedding, BlockConfig, BlockInputs, LayerNorm, Linear, Mlp, TransformerBlock,
};
use signstitch_nn::optim::{cosine_lr, ema_decay, AdamW, AdamWConfig};
use signstitch_nn::{checkpoint, GradMap, Graph, ParamStore, Real, Tensor, Var};

use crate::error::{invalid, CoreError, Result};
use crate::motion::{MotionSequence, PartGroup, PartLayout};

/// Linear-β DDPM schedule. `alpha_bar[0] = 1` stands for the clean signal;
/// steps are indexed `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return invalid("schedule needs steps ≥ 1 and 0 < β_start ≤ β_end < 1");
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// T = 1000, β from 1e-4 to 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar[t];
        a / (1.0 - a)
    }

    /// `t_s = round(s·T/S)` for `s = 0..=S`; the first entry is 0.
    pub fn respaced(&self, s: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if s == 0 || s > t {
            return invalid(format!("{s} sampling steps for a {t}-step schedule"));
        }
        Ok((0..=s)
            .map(|i| ((i * t) as f64 / s as f64).round() as usize)
            .collect())
    }
}

/// `w(t) = min(SNR(t), γ) / SNR(t)`.
pub fn min_snr_weight(t: usize, sched: &DiffusionSchedule, gamma: f64) -> f64 {
    let snr = sched.snr(t);
    snr.min(gamma) / snr
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintMask {
    pub m: Vec<bool>,
    pub boundary: usize,
    pub radius: usize,
}

pub const R_MIN: usize = 10;
pub const R_MAX: usize = 30;
pub const INFERENCE_RADIUS: usize = 10;

/// `M_i = 1 ⇔ |i − T_a| ≤ r` over `T_a + T_b` frames.
pub fn make_boundary_mask(t_a: usize, t_b: usize, r: usize) -> Result<InpaintMask> {
    let n = t_a + t_b;
    if n == 0 {
        return Err(CoreError::Empty("pair"));
    }
    let m = (0..n).map(|i| i.abs_diff(t_a) <= r).collect();
    Ok(InpaintMask {
        m,
        boundary: t_a,
        radius: r,
    })
}

pub fn sample_radius(rng: &mut impl Rng, r_min: usize, r_max: usize) -> usize {
    rng.random_range(r_min..=r_max)
}

impl InpaintMask {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `M^Δ_i = M_i · M_{i+1}`.
    pub fn delta(&self) -> Vec<bool> {
        self.m.windows(2).map(|w| w[0] && w[1]).collect()
    }
}

pub fn q_sample(
    x0: &MotionSequence,
    t: usize,
    noise: &MotionSequence,
    sched: &DiffusionSchedule,
) -> Result<MotionSequence> {
    if t == 0 || t > sched.steps() {
        return invalid(format!("timestep {t} outside 1..={}", sched.steps()));
    }
    if x0.len() != noise.len() || x0.dim() != noise.dim() {
        return Err(CoreError::Dimension("noise shape differs from X0".into()));
    }
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    MotionSequence::new(x0.len(), x0.dim(), data)
}

pub fn gaussian_like(t: usize, d: usize, rng: &mut impl Rng) -> MotionSequence {
    let data = (0..t * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    MotionSequence::new(t, d, data).expect("finite gaussian draws")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BraidLossConfig {
    /// `(body, face, hands)`.
    pub part_weights: (f64, f64, f64),
    pub lambda_vel: f64,
    pub huber_beta: f64,
    pub snr_gamma: f64,
    /// Optional masked L2 term; zero disables it.
    pub lambda_latent: f64,
}

impl Default for BraidLossConfig {
    fn default() -> Self {
        Self {
            part_weights: (1.0, 3.0, 15.0),
            lambda_vel: 0.5,
            huber_beta: 1.0,
            snr_gamma: 5.0,
            lambda_latent: 0.0,
        }
    }
}

pub const DENOM_EPS: f64 = 1e-8;

fn smooth_l1(u: f64, beta: f64) -> f64 {
    if u.abs() < beta {
        0.5 * u * u / beta
    } else {
        u.abs() - 0.5 * beta
    }
}

fn masked_weighted(
    err: impl Fn(usize, usize) -> f64,
    rows: &[bool],
    weights: &[f64],
    beta: f64,
) -> (f64, bool) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &on) in rows.iter().enumerate() {
        if !on {
            continue;
        }
        for (d, &w) in weights.iter().enumerate() {
            num += w * smooth_l1(err(i, d), beta);
            den += w;
        }
    }
    if den == 0.0 {
        return (0.0, true);
    }
    (num / (den + DENOM_EPS), false)
}

/// Part-weighted Smooth-L1 over masked frames. The flag reports an empty mask.
pub fn masked_recon_loss(
    x_hat: &MotionSequence,
    x0: &MotionSequence,
    mask: &InpaintMask,
    weights: &[f64],
    beta: f64,
) -> Result<(f64, bool)> {
    check_pair_shapes(x_hat, x0, mask, weights)?;
    Ok(masked_weighted(
        |i, d| x_hat.get(i, d) - x0.get(i, d),
        &mask.m,
        weights,
        beta,
    ))
}

/// Same weighting on first differences, over pairs of adjacent masked frames.
pub fn velocity_loss(
    x_hat: &MotionSequence,
    x0: &MotionSequence,
    mask: &InpaintMask,
    weights: &[f64],
    beta: f64,
) -> Result<(f64, bool)> {
    check_pair_shapes(x_hat, x0, mask, weights)?;
    let md = mask.delta();
    let err = |i: usize, d: usize| {
        (x_hat.get(i + 1, d) - x_hat.get(i, d)) - (x0.get(i + 1, d) - x0.get(i, d))
    };
    Ok(masked_weighted(err, &md, weights, beta))
}

fn check_pair_shapes(
    a: &MotionSequence,
    b: &MotionSequence,
    mask: &InpaintMask,
    weights: &[f64],
) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() || mask.len() != a.len() || weights.len() != a.dim()
    {
        return Err(CoreError::Dimension(format!(
            "X̂ {}x{}, X {}x{}, mask {}, weights {}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim(),
            mask.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// `w(t)·(L_recon + λ_vel·L_vel)` (plus the optional L2 term) for one sample.
pub fn braid_loss_value(
    x_hat: &MotionSequence,
    x0: &MotionSequence,
    mask: &InpaintMask,
    weights: &[f64],
    w_t: f64,
    cfg: &BraidLossConfig,
) -> Result<f64> {
    let (rec, _) = masked_recon_loss(x_hat, x0, mask, weights, cfg.huber_beta)?;
    let (vel, _) = velocity_loss(x_hat, x0, mask, weights, cfg.huber_beta)?;
    let mut l = rec + cfg.lambda_vel * vel;
    if cfg.lambda_latent > 0.0 {
        l += cfg.lambda_latent * masked_l2(x_hat, x0, mask);
    }
    Ok(w_t * l)
}

fn masked_l2(x_hat: &MotionSequence, x0: &MotionSequence, mask: &InpaintMask) -> f64 {
    let d = x0.dim();
    let mut num = 0.0;
    let mut cnt = 0.0;
    for (i, &on) in mask.m.iter().enumerate() {
        if on {
            for j in 0..d {
                let u = x_hat.get(i, j) - x0.get(i, j);
                num += u * u;
            }
            cnt += d as f64;
        }
    }
    if cnt == 0.0 {
        0.0
    } else {
        num / cnt
    }
}

/// Graph form of [`braid_loss_value`] so gradients reach the denoiser.
pub fn braid_loss_graph<R: Real>(
    g: &mut Graph<R>,
    x_hat: Var,
    x0: &MotionSequence,
    mask: &InpaintMask,
    weights: &[f64],
    w_t: f64,
    cfg: &BraidLossConfig,
) -> Result<Var> {
    let (t, d) = (x0.len(), x0.dim());
    let shape = g.value(x_hat).shape().to_vec();
    if shape != [t, d] || mask.len() != t || weights.len() != d {
        return Err(CoreError::Dimension(format!(
            "prediction {shape:?} vs target {t}x{d}"
        )));
    }
    let target = g.constant(to_tensor(x0));
    let coef = |rows: &[bool]| -> Tensor<R> {
        let den: f64 = rows.iter().filter(|&&b| b).count() as f64 * weights.iter().sum::<f64>();
        let data = rows
            .iter()
            .flat_map(|&on| {
                weights.iter().map(move |&w| {
                    if on && den > 0.0 {
                        R::of(w / (den + DENOM_EPS))
                    } else {
                        R::zero()
                    }
                })
            })
            .collect();
        Tensor::new(vec![rows.len(), d], data).expect("coefficient shape")
    };
    let diff = g.sub(x_hat, target)?;
    let h = g.huber(diff, cfg.huber_beta);
    let rec = g.mul_const(h, &coef(&mask.m))?;
    let rec = g.sum(rec);
    let mut total = rec;
    if t >= 2 {
        let dv = g.diff_rows(diff)?;
        let hv = g.huber(dv, cfg.huber_beta);
        let vel = g.mul_const(hv, &coef(&mask.delta()))?;
        let vel = g.sum(vel);
        let vel = g.scale(vel, R::of(cfg.lambda_vel));
        total = g.add(total, vel)?;
    }
    if cfg.lambda_latent > 0.0 {
        let n_on = mask.m.iter().filter(|&&b| b).count();
        if n_on > 0 {
            let sq = g.mul(diff, diff)?;
            let rows: Vec<R> = mask
                .m
                .iter()
                .flat_map(|&on| {
                    std::iter::repeat_n(
                        if on {
                            R::of(1.0 / (n_on * d) as f64)
                        } else {
                            R::zero()
                        },
                        d,
                    )
                })
                .collect();
            let l2 = g.mul_const(sq, &Tensor::new(vec![t, d], rows)?)?;
            let l2 = g.sum(l2);
            let l2 = g.scale(l2, R::of(cfg.lambda_latent));
            total = g.add(total, l2)?;
        }
    }
    Ok(g.scale(total, R::of(w_t)))
}

pub(crate) fn to_tensor<R: Real>(x: &MotionSequence) -> Tensor<R> {
    Tensor::new(
        vec![x.len(), x.dim()],
        x.data().iter().map(|&v| R::of(v)).collect(),
    )
    .expect("motion shape")
}

/// Predicts the clean signal from a noisy one.
pub trait Denoiser: Sync {
    fn predict_x0(
        &self,
        x_t: &MotionSequence,
        t: usize,
        cond: &MotionSequence,
        mask: &InpaintMask,
    ) -> Result<MotionSequence>;
}

/// Elementwise `M ? a : b` by frame.
pub fn compose(
    mask: &InpaintMask,
    inside: &MotionSequence,
    outside: &MotionSequence,
) -> MotionSequence {
    let mut out = outside.clone();
    for (i, &on) in mask.m.iter().enumerate() {
        if on {
            out.frame_mut(i).copy_from_slice(inside.frame(i));
        }
    }
    out
}

/// Deterministic DDIM (η = 0) over `s` respaced steps, with the prediction
/// re-pinned to `cond` outside the mask at every step. `noise` seeds the
/// masked frames of the initial state.
pub fn ddim_refine(
    cond: &MotionSequence,
    mask: &InpaintMask,
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    s: usize,
    noise: &MotionSequence,
) -> Result<MotionSequence> {
    if mask.len() != cond.len() || noise.len() != cond.len() || noise.dim() != cond.dim() {
        return Err(CoreError::Dimension(
            "mask/noise do not match the pair".into(),
        ));
    }
    let ts = sched.respaced(s)?;
    let mut x = compose(mask, noise, cond);
    let mut x0_comp = cond.clone();
    for k in (1..ts.len()).rev() {
        let (t, t_prev) = (ts[k], ts[k - 1]);
        let pred = denoiser.predict_x0(&x, t, cond, mask)?;
        if pred.len() != cond.len() || pred.dim() != cond.dim() {
            return Err(CoreError::Dimension("denoiser output shape".into()));
        }
        x0_comp = compose(mask, &pred, cond);
        let (a, ap) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let (spa, spn) = (ap.sqrt(), (1.0 - ap).sqrt());
        let data = x
            .data()
            .iter()
            .zip(x0_comp.data())
            .map(|(&xt, &x0)| {
                let eps = (xt - sa * x0) / sn;
                spa * x0 + spn * eps
            })
            .collect();
        x = MotionSequence::new(cond.len(), cond.dim(), data)?;
    }
    Ok(x0_comp)
}

pub fn ddim_refine_seeded(
    cond: &MotionSequence,
    mask: &InpaintMask,
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    s: usize,
    seed: u64,
) -> Result<MotionSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_like(cond.len(), cond.dim(), &mut rng);
    ddim_refine(cond, mask, denoiser, sched, s, &noise)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub hand_head_depth: usize,
    pub dropout: f64,
    /// Predict a correction to the conditioning sequence rather than the
    /// signal itself.
    pub cond_residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            hand_head_depth: 2,
            dropout: 0.1,
            cond_residual: true,
        }
    }
}

impl DenoiserConfig {
    pub fn reference_scale() -> Self {
        Self {
            latent: 512,
            layers: 6,
            heads: 8,
            ffn: 2048,
            hand_head_depth: 4,
            dropout: 0.1,
            cond_residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BraidTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub warmup: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub seed: u64,
    pub loss: BraidLossConfig,
}

impl Default for BraidTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            ema_decay: 0.9999,
            warmup: 50,
            r_min: R_MIN,
            r_max: R_MAX,
            seed: 0,
            loss: BraidLossConfig::default(),
        }
    }
}

/// Duration-adjusted pseudo pair and its aligned continuous target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BraidPair {
    pub cond: MotionSequence,
    pub target: MotionSequence,
    pub boundary: usize,
}

#[derive(Clone, Debug)]
struct Head {
    group: PartGroup,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BraidModel {
    pub cfg: DenoiserConfig,
    pub layout: PartLayout,
    pub store: ParamStore<f32>,
    x_in: Linear,
    cond_in: Linear,
    t_embed: Linear,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
    heads: Vec<Head>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    cfg: DenoiserConfig,
    layout: PartLayout,
}

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";
const MASK_EMBED: &str = "mask_embed";

/// Maximal runs of adjacent channels belonging to one part group.
fn group_segments(layout: &PartLayout) -> Vec<(Range<usize>, PartGroup)> {
    let mut out: Vec<(Range<usize>, PartGroup)> = Vec::new();
    for d in 0..layout.dim() {
        let g = layout.group_of(d).expect("layout covers every channel");
        match out.last_mut() {
            Some((r, lg)) if *lg == g && r.end == d => r.end = d + 1,
            _ => out.push((d..d + 1, g)),
        }
    }
    out
}

impl BraidModel {
    pub fn new(cfg: DenoiserConfig, layout: PartLayout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let d = layout.dim();
        let l = cfg.latent;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x_in = Linear::new(&mut store, &mut rng, "braid.x_in", d, l);
        let cond_in = Linear::new(&mut store, &mut rng, "braid.cond_in", d, l);
        let t_embed = Linear::new(&mut store, &mut rng, "braid.t_embed", l, l);
        store.uniform(MASK_EMBED, &[l], 0.1, &mut rng);
        let bc = BlockConfig {
            dim: l,
            heads: cfg.heads,
            ffn: cfg.ffn,
            cross: true,
            rope: true,
            dropout: cfg.dropout,
        };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("braid.block{i}"), bc))
            .collect();
        let ln_out = LayerNorm::new(&mut store, "braid.ln_out", l);
        let heads = group_segments(&layout)
            .into_iter()
            .enumerate()
            .map(|(i, (range, group))| {
                let depth = if group == PartGroup::Hands {
                    cfg.hand_head_depth.max(1)
                } else {
                    1
                };
                let mut dims = vec![l; depth];
                dims.push(range.len());
                let mlp = Mlp::new(&mut store, &mut rng, &format!("braid.head{i}"), &dims, 0.0);
                Head { group, mlp }
            })
            .collect();
        store.zeros(NORM_MEAN, &[d]);
        store.ones(NORM_STD, &[d]);
        Ok(Self {
            cfg,
            layout,
            store,
            x_in,
            cond_in,
            t_embed,
            blocks,
            ln_out,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn channel_weights(&self, loss: &BraidLossConfig) -> Vec<f64> {
        self.layout.channel_weights(loss.part_weights)
    }

    pub fn head_groups(&self) -> Vec<PartGroup> {
        self.heads.iter().map(|h| h.group).collect()
    }

    /// Per-channel standardization fitted on training targets and conditions.
    pub fn fit_normalizer(&mut self, pairs: &[BraidPair]) {
        let d = self.dim();
        let mut n = 0.0;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for p in pairs {
            for seq in [&p.cond, &p.target] {
                for i in 0..seq.len() {
                    for (j, &v) in seq.frame(i).iter().enumerate() {
                        sum[j] += v;
                        sq[j] += v * v;
                    }
                    n += 1.0;
                }
            }
        }
        if n == 0.0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        self.store
            .insert(NORM_MEAN, Tensor::from_f64(&[d], &mean).expect("dim"));
        self.store
            .insert(NORM_STD, Tensor::from_f64(&[d], &std).expect("dim"));
    }

    fn norm_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self
            .store
            .get(NORM_MEAN)
            .expect("normalizer registered")
            .to_f64_vec();
        let s = self
            .store
            .get(NORM_STD)
            .expect("normalizer registered")
            .to_f64_vec();
        (m, s)
    }

    pub fn normalize(&self, x: &MotionSequence) -> MotionSequence {
        let (m, s) = self.norm_stats();
        let mut out = x.clone();
        for i in 0..out.len() {
            for (j, v) in out.frame_mut(i).iter_mut().enumerate() {
                *v = (*v - m[j]) / s[j];
            }
        }
        out
    }

    pub fn denormalize(&self, x: &MotionSequence) -> MotionSequence {
        let (m, s) = self.norm_stats();
        let mut out = x.clone();
        for i in 0..out.len() {
            for (j, v) in out.frame_mut(i).iter_mut().enumerate() {
                *v = *v * s[j] + m[j];
            }
        }
        out
    }

    /// `X̂0 = G(X_t, t, φ_c(X̃), M)` in standardized units.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        x_t: &MotionSequence,
        t: usize,
        cond: &MotionSequence,
        mask: &InpaintMask,
    ) -> Result<Var> {
        let n = x_t.len();
        if cond.len() != n || mask.len() != n || x_t.dim() != self.dim() || cond.dim() != self.dim()
        {
            return Err(CoreError::Dimension(
                "denoiser inputs disagree in shape".into(),
            ));
        }
        let xv = g.constant(to_tensor(x_t));
        let cv = g.constant(to_tensor(cond));
        let mut h = self.x_in.forward(g, store, xv)?;
        let temb = g.constant(sinusoidal_embedding(t as f64, self.cfg.latent));
        let temb = self.t_embed.forward(g, store, temb)?;
        h = g.add_bias(h, temb)?;
        let me = g.param(store, MASK_EMBED)?;
        let coeffs: Vec<R> = mask
            .m
            .iter()
            .map(|&b| if b { R::one() } else { R::zero() })
            .collect();
        let me = g.outer_const(me, &coeffs);
        h = g.add(h, me)?;
        let memory = self.cond_in.forward(g, store, cv)?;
        let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let inp = BlockInputs {
            positions: &positions,
            key_mask: None,
            memory: Some(memory),
            memory_positions: Some(&positions),
        };
        for b in &self.blocks {
            h = b.forward(g, store, h, &inp)?;
        }
        h = self.ln_out.forward(g, store, h)?;
        let outs = self
            .heads
            .iter()
            .map(|hd| hd.mlp.forward(g, store, h))
            .collect::<signstitch_nn::Result<Vec<_>>>()?;
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok(if self.cfg.cond_residual {
            g.add(out, cv)?
        } else {
            out
        })
    }

    /// Loss of one training draw in standardized units.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        pair_n: &BraidPair,
        mask: &InpaintMask,
        t: usize,
        noise: &MotionSequence,
        sched: &DiffusionSchedule,
        loss: &BraidLossConfig,
    ) -> Result<Var> {
        if pair_n.cond.len() != pair_n.target.len() {
            return Err(CoreError::Dimension(
                "condition and target lengths differ".into(),
            ));
        }
        let x_t = q_sample(&pair_n.target, t, noise, sched)?;
        let x_hat = self.forward(g, store, &x_t, t, &pair_n.cond, mask)?;
        let w_t = min_snr_weight(t, sched, loss.snr_gamma);
        braid_loss_graph(
            g,
            x_hat,
            &pair_n.target,
            mask,
            &self.channel_weights(loss),
            w_t,
            loss,
        )
    }

    fn draw(
        &self,
        pairs_n: &[BraidPair],
        cfg: &BraidTrainConfig,
        sched: &DiffusionSchedule,
        seed: u64,
    ) -> Result<(GradMap<f32>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &pairs_n[rng.random_range(0..pairs_n.len())];
        let r = sample_radius(&mut rng, cfg.r_min, cfg.r_max);
        let mask = make_boundary_mask(p.boundary, p.cond.len() - p.boundary, r)?;
        let t = rng.random_range(1..=sched.steps());
        let noise = gaussian_like(p.target.len(), p.target.dim(), &mut rng);
        let mut g = if self.cfg.dropout > 0.0 {
            Graph::training(rng.random())
        } else {
            Graph::new()
        };
        let l = self.loss_graph(&mut g, &self.store, p, &mask, t, &noise, sched, &cfg.loss)?;
        let mut gm = GradMap::new();
        gm.accumulate(&g.backward(l)?);
        Ok((gm, g.value(l).item() as f64))
    }

    /// Trains on pairs with random timesteps and radii; returns the mean loss
    /// per step. Per-draw seeds depend only on `(seed, step, slot)`.
    pub fn train(
        &mut self,
        pairs: &[BraidPair],
        cfg: &BraidTrainConfig,
        sched: &DiffusionSchedule,
        mut progress: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(CoreError::Empty("braid training pairs"));
        }
        for p in pairs {
            if p.boundary == 0 || p.boundary >= p.cond.len() || p.cond.len() != p.target.len() {
                return invalid("pair boundary or lengths invalid");
            }
        }
        self.fit_normalizer(pairs);
        let pairs_n: Vec<BraidPair> = pairs
            .iter()
            .map(|p| BraidPair {
                cond: self.normalize(&p.cond),
                target: self.normalize(&p.target),
                boundary: p.boundary,
            })
            .collect();
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let seeds: Vec<u64> = (0..cfg.batch_size)
                .map(|i| {
                    cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step as u64) << 20 | i as u64)
                })
                .collect();
            let per: Vec<(GradMap<f32>, f64)> = seeds
                .par_iter()
                .map(|&s| self.draw(&pairs_n, cfg, sched, s))
                .collect::<Result<_>>()?;
            let mut grads = GradMap::new();
            let mut loss = 0.0;
            for (gm, l) in &per {
                grads.merge(gm);
                loss += l;
            }
            grads.scale(1.0 / cfg.batch_size as f64);
            grads.clip_global_norm(cfg.grad_clip);
            let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup);
            opt.step(&mut self.store, &grads, lr)?;
            self.store.update_ema(ema_decay(cfg.ema_decay, step as u64));
            let mean = loss / cfg.batch_size as f64;
            losses.push(mean);
            progress(step, mean);
        }
        Ok(losses)
    }

    /// Copy whose live weights are the EMA shadow, used for inference.
    pub fn with_ema_weights(&self) -> Self {
        Self {
            store: self.store.ema_snapshot(),
            ..self.clone()
        }
    }

    /// Refines a raw duration-adjusted pair. Frames outside the mask are
    /// returned bitwise unchanged.
    pub fn refine_pair(
        &self,
        pair: &MotionSequence,
        mask: &InpaintMask,
        sched: &DiffusionSchedule,
        steps: usize,
        seed: u64,
    ) -> Result<MotionSequence> {
        let cond_n = self.normalize(pair);
        let out_n = ddim_refine_seeded(&cond_n, mask, self, sched, steps, seed)?;
        Ok(compose(mask, &self.denormalize(&out_n), pair))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(path, &self.store)?;
        let side = Sidecar {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
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
        let mut model = Self::new(side.cfg, side.layout, 0)?;
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

impl Denoiser for BraidModel {
    /// Inputs and output are in standardized units.
    fn predict_x0(
        &self,
        x_t: &MotionSequence,
        t: usize,
        cond: &MotionSequence,
        mask: &InpaintMask,
    ) -> Result<MotionSequence> {
        let mut g = Graph::<f32>::new();
        let out = self.forward(&mut g, &self.store, x_t, t, cond, mask)?;
        MotionSequence::new(x_t.len(), x_t.dim(), g.value(out).to_f64_vec())
    }
}
