//! Loss kernels for the sign-to-sign conversational model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::motion::{MotionSequence, PartGroup, PartLayout};

pub const BLOCK_FRAMES: usize = 8;
pub const LAMBDA_HAND: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmLoss {
    pub body: f64,
    pub face: f64,
    pub hand: f64,
    pub total: f64,
}

fn group_channels(layout: &PartLayout, g: PartGroup) -> Vec<usize> {
    layout.group_ranges(g).into_iter().flatten().collect()
}

fn same_shape(a: &MotionSequence, b: &MotionSequence) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(CoreError::Dimension(format!(
            "{}x{} vs {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    Ok(())
}

const GROUPS: [PartGroup; 3] = [PartGroup::Body, PartGroup::Face, PartGroup::Hands];

/// Component-wise `‖v − (x1 − x0)‖²` means over block entries;
/// `total = body + face + λ_hand·hand`.
pub fn fm_loss(
    v_pred: &MotionSequence,
    x0: &MotionSequence,
    x1: &MotionSequence,
    layout: &PartLayout,
    lambda_hand: f64,
) -> Result<FmLoss> {
    same_shape(v_pred, x0)?;
    same_shape(v_pred, x1)?;
    if layout.dim() != v_pred.dim() {
        return Err(CoreError::Dimension(
            "layout does not match the block".into(),
        ));
    }
    let mut parts = [0.0; 3];
    for (p, g) in parts.iter_mut().zip(GROUPS) {
        let ch = group_channels(layout, g);
        if ch.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for i in 0..v_pred.len() {
            for &c in &ch {
                let u = v_pred.get(i, c) - (x1.get(i, c) - x0.get(i, c));
                s += u * u;
            }
        }
        *p = s / (v_pred.len() * ch.len()) as f64;
    }
    Ok(FmLoss {
        body: parts[0],
        face: parts[1],
        hand: parts[2],
        total: parts[0] + parts[1] + lambda_hand * parts[2],
    })
}

/// `∂ total / ∂ v_pred`.
pub fn fm_loss_grad(
    v_pred: &MotionSequence,
    x0: &MotionSequence,
    x1: &MotionSequence,
    layout: &PartLayout,
    lambda_hand: f64,
) -> Result<MotionSequence> {
    same_shape(v_pred, x0)?;
    same_shape(v_pred, x1)?;
    let mut g = MotionSequence::zeros(v_pred.len(), v_pred.dim());
    for (w, grp) in [1.0, 1.0, lambda_hand].into_iter().zip(GROUPS) {
        let ch = group_channels(layout, grp);
        let n = (v_pred.len() * ch.len()) as f64;
        for i in 0..v_pred.len() {
            for &c in &ch {
                g.frame_mut(i)[c] =
                    w * 2.0 * (v_pred.get(i, c) - (x1.get(i, c) - x0.get(i, c))) / n;
            }
        }
    }
    Ok(g)
}

/// `x_τ = (1 − τ)·x0 + τ·x1`.
pub fn fm_interpolate(
    x0: &MotionSequence,
    x1: &MotionSequence,
    tau: f64,
) -> Result<MotionSequence> {
    same_shape(x0, x1)?;
    if !(0.0..=1.0).contains(&tau) {
        return invalid(format!("τ = {tau} outside [0, 1]"));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (1.0 - tau) * a + tau * b)
        .collect();
    MotionSequence::new(x0.len(), x0.dim(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTarget {
    pub sent: bool,
    pub turn: bool,
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryLossConfig {
    pub alpha_sent: f64,
    pub alpha_turn: f64,
    pub lambda_rate: f64,
}

impl Default for BoundaryLossConfig {
    fn default() -> Self {
        Self {
            alpha_sent: 20.0,
            alpha_turn: 12.0,
            lambda_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryLoss {
    pub bce_sent: f64,
    pub bce_turn: f64,
    pub rate: f64,
    pub total: f64,
    /// `∂ total / ∂ (z_sent, z_turn)` per block; zero for invalid blocks.
    pub grad: Vec<(f64, f64)>,
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Positive-weighted BCE on sentence and turn ends plus the rate
/// calibration term, over valid blocks. `logits` are `(z_sent, z_turn)`.
pub fn boundary_loss(
    logits: &[(f64, f64)],
    targets: &[BoundaryTarget],
    cfg: &BoundaryLossConfig,
) -> Result<BoundaryLoss> {
    if logits.len() != targets.len() {
        return Err(CoreError::Dimension(format!(
            "{} logits, {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = targets.iter().filter(|t| t.valid).count();
    if n == 0 {
        return Err(CoreError::Empty("valid boundary blocks"));
    }
    let nf = n as f64;
    let mut bce = [0.0; 2];
    let mut pbar = [0.0; 2];
    let mut ybar = [0.0; 2];
    let alpha = [cfg.alpha_sent, cfg.alpha_turn];
    for (z, t) in logits.iter().zip(targets).filter(|(_, t)| t.valid) {
        for (k, (zk, yk)) in [(z.0, t.sent), (z.1, t.turn)].into_iter().enumerate() {
            let y = if yk { 1.0 } else { 0.0 };
            bce[k] -= alpha[k] * y * log_sigmoid(zk) + (1.0 - y) * log_sigmoid(-zk);
            pbar[k] += sigmoid(zk);
            ybar[k] += y;
        }
    }
    for k in 0..2 {
        bce[k] /= nf;
        pbar[k] /= nf;
        ybar[k] /= nf;
    }
    let rate = (pbar[0] - ybar[0]).powi(2) + (pbar[1] - ybar[1]).powi(2);
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(z, t)| {
            if !t.valid {
                return (0.0, 0.0);
            }
            let g = |k: usize, zk: f64, yk: bool| {
                let y = if yk { 1.0 } else { 0.0 };
                let p = sigmoid(zk);
                let d_bce = (-alpha[k] * y * (1.0 - p) + (1.0 - y) * p) / nf;
                let d_rate = cfg.lambda_rate * 2.0 * (pbar[k] - ybar[k]) * p * (1.0 - p) / nf;
                d_bce + d_rate
            };
            (g(0, z.0, t.sent), g(1, z.1, t.turn))
        })
        .collect();
    Ok(BoundaryLoss {
        bce_sent: bce[0],
        bce_turn: bce[1],
        rate,
        total: bce[0] + bce[1] + cfg.lambda_rate * rate,
        grad,
    })
}

pub const CTC_BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    pub loss: f64,
    /// No alignment fits in the available frames.
    pub infeasible: bool,
}

/// `−log P(G)` by the CTC forward recursion in log space. `logprobs` rows
/// are frames over `V + 1` classes, blank at index 0; `target` entries must
/// be non-blank class indices.
pub fn ctc_loss(logprobs: &[Vec<f64>], target: &[usize]) -> Result<CtcLoss> {
    let l = logprobs.len();
    if l == 0 {
        return Err(CoreError::Empty("CTC frames"));
    }
    let c = logprobs[0].len();
    if logprobs.iter().any(|r| r.len() != c) {
        return Err(CoreError::Dimension("ragged CTC posteriors".into()));
    }
    if let Some(&g) = target.iter().find(|&&g| g == CTC_BLANK || g >= c) {
        return invalid(format!("target class {g} is blank or out of range"));
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if target.len() + repeats > l {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            infeasible: true,
        });
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(CTC_BLANK);
    for &g in target {
        ext.push(g);
        ext.push(CTC_BLANK);
    }
    let s = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; s];
    alpha[0] = logprobs[0][ext[0]];
    if s > 1 {
        alpha[1] = logprobs[0][ext[1]];
    }
    for row in &logprobs[1..] {
        let mut next = vec![f64::NEG_INFINITY; s];
        for k in 0..s {
            let mut a = alpha[k];
            if k >= 1 {
                a = log_add(a, alpha[k - 1]);
            }
            if k >= 2 && ext[k] != CTC_BLANK && ext[k] != ext[k - 2] {
                a = log_add(a, alpha[k - 2]);
            }
            next[k] = a + row[ext[k]];
        }
        alpha = next;
    }
    let total = if s > 1 {
        log_add(alpha[s - 1], alpha[s - 2])
    } else {
        alpha[0]
    };
    Ok(CtcLoss {
        loss: -total,
        infeasible: total == f64::NEG_INFINITY,
    })
}

/// `−mean log P_post(g_j | q_j)`; zero when no landmark is given.
pub fn landmark_loss(
    logprobs: &[Vec<f64>],
    target: &[usize],
    landmarks: &[(usize, usize)],
) -> Result<f64> {
    if landmarks.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for &(j, q) in landmarks {
        let g = *target.get(j).ok_or_else(|| {
            CoreError::InvalidArgument(format!("landmark gloss {j} ≥ {}", target.len()))
        })?;
        let row = logprobs.get(q).ok_or_else(|| {
            CoreError::InvalidArgument(format!("landmark block {q} ≥ {}", logprobs.len()))
        })?;
        let lp = *row
            .get(g)
            .ok_or_else(|| CoreError::InvalidArgument(format!("class {g} out of range")))?;
        s -= lp;
    }
    Ok(s / landmarks.len() as f64)
}

/// Learned tables used to condition the flow heads on the gloss plan.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanConditioning {
    /// Rows: boundary states (none, sentence end, turn end, …) × H.
    pub e_bdry: DMatrix<f64>,
    /// V × E gloss embedding table.
    pub gloss_embed: DMatrix<f64>,
    /// E × H projection and its bias.
    pub proj: DMatrix<f64>,
    pub proj_bias: Vec<f64>,
}

impl PlanConditioning {
    pub fn hidden(&self) -> usize {
        self.e_bdry.ncols()
    }

    /// `φ_plan(P) = (P·E)·W + b` per row.
    pub fn plan_features(&self, plan: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if plan.ncols() != self.gloss_embed.nrows() {
            return Err(CoreError::Dimension(format!(
                "plan over {} glosses, table has {}",
                plan.ncols(),
                self.gloss_embed.nrows()
            )));
        }
        for (i, row) in plan.row_iter().enumerate() {
            if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return invalid(format!("plan row {i} is not a distribution"));
            }
        }
        let mut out = plan * &self.gloss_embed * &self.proj;
        for mut r in out.row_iter_mut() {
            for (v, b) in r.iter_mut().zip(&self.proj_bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// `C̃ = C + e_bdry(b) + α_s·φ_plan(P_plan)`.
pub fn augment_memory(
    c: &DMatrix<f64>,
    b: &[usize],
    plan: &DMatrix<f64>,
    alpha_s: f64,
    pc: &PlanConditioning,
) -> Result<DMatrix<f64>> {
    if c.ncols() != pc.hidden()
        || b.len() != c.nrows()
        || plan.nrows() != c.nrows()
        || pc.proj.ncols() != pc.hidden()
        || pc.proj_bias.len() != pc.hidden()
    {
        return Err(CoreError::Dimension(
            "memory, boundary states and plan disagree".into(),
        ));
    }
    let phi = pc.plan_features(plan)?;
    let mut out = c.clone();
    for (i, &state) in b.iter().enumerate() {
        if state >= pc.e_bdry.nrows() {
            return invalid(format!("boundary state {state} has no embedding"));
        }
        for j in 0..c.ncols() {
            out[(i, j)] += pc.e_bdry[(state, j)] + alpha_s * phi[(i, j)];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub bdry: f64,
    pub plan: f64,
    pub post: f64,
    pub lm: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            bdry: 0.3,
            plan: 0.35,
            post: 0.05,
            lm: 0.02,
        }
    }
}

/// `ℒ_FM + w_bdry·ℒ_bdry + w_plan·ℒ_plan + w_post·ℒ_post + w_lm·ℒ_lm`.
pub fn total_objective(
    fm: f64,
    bdry: f64,
    plan: f64,
    post: f64,
    lm: f64,
    w: &ObjectiveWeights,
) -> f64 {
    fm + w.bdry * bdry + w.plan * plan + w.post * post + w.lm * lm
}
