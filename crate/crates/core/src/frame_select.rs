//! Energy-based trimming of isolated clips down to their core articulation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::motion::{savgol_smooth, temporal_diff, GlossClip, MotionSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimConfig {
    pub lambda_v: f64,
    pub lambda_a: f64,
    pub theta_act: f64,
    /// Recorded for completeness; no rule consumes it.
    pub theta_low: f64,
    pub tau_post_on: f64,
    pub tau_post_off: f64,
    /// Consecutive frames required to confirm activity.
    pub n: usize,
    /// Margin frames kept around the detected span.
    pub m: usize,
    pub t_min: usize,
    pub b_min: usize,
    pub sg_window: usize,
    pub sg_order: usize,
    pub q_lo: f64,
    pub q_hi: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_a: 0.5,
            theta_act: 0.35,
            theta_low: 0.4,
            tau_post_on: 0.6,
            tau_post_off: 0.25,
            n: 3,
            m: 3,
            t_min: 8,
            b_min: 5,
            sg_window: 7,
            sg_order: 2,
            q_lo: 0.05,
            q_hi: 0.95,
        }
    }
}

impl TrimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            self.theta_act,
            self.theta_low,
            self.tau_post_on,
            self.tau_post_off,
            self.q_lo,
            self.q_hi,
        ];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("trim thresholds must lie in [0, 1]");
        }
        if self.n == 0 {
            return invalid("continuity length n must be at least 1");
        }
        if self.q_lo >= self.q_hi {
            return invalid("q_lo must be below q_hi");
        }
        Ok(())
    }
}

/// Per-frame joint positions (metres, y up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostureTrack {
    pub pelvis: Vec<[f64; 3]>,
    pub neck: Vec<[f64; 3]>,
    pub left_shoulder: Vec<[f64; 3]>,
    pub right_shoulder: Vec<[f64; 3]>,
    pub left_wrist: Vec<[f64; 3]>,
    pub right_wrist: Vec<[f64; 3]>,
}

impl PostureTrack {
    pub fn len(&self) -> usize {
        self.pelvis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pelvis.is_empty()
    }

    /// Max over both arms of wrist height above the shoulder, in units of
    /// torso height `max(|neck_y − pelvis_y|, 1e-6)`.
    pub fn raise_ratio(&self, t: usize) -> f64 {
        let h = (self.neck[t][1] - self.pelvis[t][1]).abs().max(1e-6);
        let l = (self.left_wrist[t][1] - self.left_shoulder[t][1]) / h;
        let r = (self.right_wrist[t][1] - self.right_shoulder[t][1]) / h;
        l.max(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimFlags {
    pub smoothing_skipped: bool,
    pub degenerate_normalization: bool,
    pub no_active_run: bool,
    pub crossed_boundaries: bool,
    pub too_short: bool,
}

impl TrimFlags {
    pub fn fallback(&self) -> bool {
        self.no_active_run || self.too_short
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimResult {
    pub t_start: usize,
    pub t_end: usize,
    pub t_on: usize,
    pub t_off: usize,
    /// Normalized, onset-gated energy.
    pub energy: Vec<f64>,
    pub flags: TrimFlags,
}

/// `E_t = (λ_v/D)·‖Δx_t‖² + (λ_a/D)·‖Δ²x_t‖²`.
pub fn motion_energy(x: &MotionSequence, cfg: &TrimConfig) -> Vec<f64> {
    let d = x.dim() as f64;
    let (d1, _) = temporal_diff(x, 1).expect("order 1");
    let (d2, _) = temporal_diff(x, 2).expect("order 2");
    (0..x.len())
        .map(|t| {
            let v: f64 = d1.frame(t).iter().map(|a| a * a).sum();
            let a: f64 = d2.frame(t).iter().map(|a| a * a).sum();
            cfg.lambda_v / d * v + cfg.lambda_a / d * a
        })
        .collect()
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Robust `[0, 1]` scaling of the energy followed by the posture gate for
/// the given boundary direction. Returns the curve and a degeneracy flag.
pub fn normalize_and_gate(
    energy: &[f64],
    posture: Option<&PostureTrack>,
    cfg: &TrimConfig,
    dir: Direction,
) -> Result<(Vec<f64>, bool)> {
    if energy.is_empty() {
        return Ok((Vec::new(), true));
    }
    if let Some(p) = posture {
        if p.len() != energy.len() {
            return invalid(format!(
                "posture has {} frames, energy {}",
                p.len(),
                energy.len()
            ));
        }
    }
    let lo = quantile(energy, cfg.q_lo);
    let hi = quantile(energy, cfg.q_hi);
    let degenerate = hi <= lo;
    let tau = match dir {
        Direction::On => cfg.tau_post_on,
        Direction::Off => cfg.tau_post_off,
    };
    let out = energy
        .iter()
        .enumerate()
        .map(|(t, &e)| {
            let norm = if degenerate {
                0.0
            } else {
                ((e - lo) / (hi - lo)).clamp(0.0, 1.0)
            };
            let gate = posture.map_or(1.0, |p| if p.raise_ratio(t) >= tau { 1.0 } else { 0.0 });
            norm * gate
        })
        .collect();
    Ok((out, degenerate))
}

/// Onset is the last frame of the first run of `n` active frames; offset the
/// first frame of the last such run. `None` when no run exists.
pub fn detect_boundaries(on: &[f64], off: &[f64], cfg: &TrimConfig) -> Option<(usize, usize)> {
    let n = cfg.n;
    let active = |e: &[f64], s: usize| e[s..s + n].iter().all(|&v| v >= cfg.theta_act);
    if on.len() < n || off.len() < n {
        return None;
    }
    let t_on = (0..=on.len() - n)
        .find(|&s| active(on, s))
        .map(|s| s + n - 1)?;
    let t_off = (0..=off.len() - n).rev().find(|&s| active(off, s))?;
    Some((t_on, t_off))
}

/// Widens `[t_on, t_off]` by the margin and keeps boundary regions of at
/// most `b_min` frames. `None` when the result is shorter than `t_min`.
pub fn span_with_margins(
    t_on: usize,
    t_off: usize,
    t: usize,
    cfg: &TrimConfig,
) -> Option<(usize, usize)> {
    let mut t_start = t_on.saturating_sub(cfg.m);
    let mut t_end = (t_off + cfg.m).min(t - 1);
    if t_start <= cfg.b_min {
        t_start = 0;
    }
    if t - 1 - t_end <= cfg.b_min {
        t_end = t - 1;
    }
    (t_end - t_start + 1 >= cfg.t_min).then_some((t_start, t_end))
}

pub fn trim(
    clip: &GlossClip,
    posture: Option<&PostureTrack>,
    cfg: &TrimConfig,
) -> Result<TrimResult> {
    trim_motion(&clip.motion, posture, cfg)
}

pub fn trim_motion(
    x: &MotionSequence,
    posture: Option<&PostureTrack>,
    cfg: &TrimConfig,
) -> Result<TrimResult> {
    cfg.validate()?;
    let t = x.len();
    let mut flags = TrimFlags::default();
    let (smooth, skipped) = savgol_smooth(x, cfg.sg_window, cfg.sg_order);
    flags.smoothing_skipped = skipped;
    let raw = motion_energy(&smooth, cfg);
    let (on, deg_on) = normalize_and_gate(&raw, posture, cfg, Direction::On)?;
    let (off, deg_off) = normalize_and_gate(&raw, posture, cfg, Direction::Off)?;
    flags.degenerate_normalization = deg_on || deg_off;

    let full = |flags: TrimFlags, on: Vec<f64>| TrimResult {
        t_start: 0,
        t_end: t - 1,
        t_on: 0,
        t_off: t - 1,
        energy: on,
        flags,
    };
    let Some((mut t_on, mut t_off)) = detect_boundaries(&on, &off, cfg) else {
        flags.no_active_run = true;
        return Ok(full(flags, on));
    };
    if t_on > t_off {
        std::mem::swap(&mut t_on, &mut t_off);
        flags.crossed_boundaries = true;
    }
    let Some((t_start, t_end)) = span_with_margins(t_on, t_off, t, cfg) else {
        flags.too_short = true;
        return Ok(full(flags, on));
    };
    Ok(TrimResult {
        t_start,
        t_end,
        t_on,
        t_off,
        energy: on,
        flags,
    })
}

/// Result of an external refinement pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefinedSpan {
    Span(usize, usize),
    /// A single representative frame, e.g. one fingerspelled letter.
    Frame(usize),
}

impl RefinedSpan {
    pub fn core_span(self) -> (usize, usize) {
        match self {
            Self::Span(s, e) => (s, e),
            Self::Frame(i) => (i, i),
        }
    }
}

pub trait SpanRefiner: Send + Sync {
    fn refine(
        &self,
        clip_id: &str,
        clip: &GlossClip,
        coarse: (usize, usize),
    ) -> Result<RefinedSpan>;
}

/// Keeps the coarse span.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullRefiner;

impl SpanRefiner for NullRefiner {
    fn refine(
        &self,
        _clip_id: &str,
        _clip: &GlossClip,
        coarse: (usize, usize),
    ) -> Result<RefinedSpan> {
        Ok(RefinedSpan::Span(coarse.0, coarse.1))
    }
}

/// Coarse trim then refinement; the refined span is validated against the clip.
pub fn select_core_span(
    clip_id: &str,
    clip: &GlossClip,
    posture: Option<&PostureTrack>,
    cfg: &TrimConfig,
    refiner: &dyn SpanRefiner,
) -> Result<((usize, usize), TrimResult)> {
    let coarse = trim(clip, posture, cfg)?;
    let span = refiner
        .refine(clip_id, clip, (coarse.t_start, coarse.t_end))?
        .core_span();
    if span.0 > span.1 || span.1 >= clip.motion.len() {
        return invalid(format!(
            "refiner returned {span:?} for {} frames",
            clip.motion.len()
        ));
    }
    Ok((span, coarse))
}
