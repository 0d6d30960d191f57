//! Word-level and dialogue-level record schemas, quality control and the
//! dominant-variant split.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CoreError, Result};
use crate::motion::{yaw_angle, GlossClip, MotionSequence, PartLayout, FPS};

pub const BODY_DIM: usize = 63;
pub const FACE_DIM: usize = 53;
pub const HAND_DIM: usize = 45;
pub const ROT_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Crop interval in seconds.
    pub interval: [f64; 2],
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

/// Per-part flat arrays, each `T × part_dim` long.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartArrays {
    pub facial_expression: Vec<f64>,
    pub body: Vec<f64>,
    pub rhands: Vec<f64>,
    pub lhands: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_orient: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neck: Option<Vec<f64>>,
}

impl PartArrays {
    fn parts(&self) -> Vec<(&'static str, &[f64], usize)> {
        let mut v: Vec<(&'static str, &[f64], usize)> = vec![
            ("facial_expression", &self.facial_expression, FACE_DIM),
            ("body", &self.body, BODY_DIM),
            ("rhands", &self.rhands, HAND_DIM),
            ("lhands", &self.lhands, HAND_DIM),
        ];
        if let Some(g) = &self.global_orient {
            v.push(("global_orient", g, ROT_DIM));
        }
        if let Some(n) = &self.neck {
            v.push(("neck", n, ROT_DIM));
        }
        v
    }

    /// Frame count shared by every part.
    pub fn frames(&self, id: &str) -> Result<usize> {
        let mut t = None;
        for (key, arr, dim) in self.parts() {
            if arr.len() % dim != 0 {
                return Err(CoreError::Schema(format!(
                    "{id}: `{key}` has {} values, not a multiple of {dim}",
                    arr.len()
                )));
            }
            let n = arr.len() / dim;
            match t {
                None => t = Some(n),
                Some(m) if m != n => {
                    return Err(CoreError::Schema(format!(
                        "{id}: `{key}` has {n} frames, expected {m}"
                    )))
                }
                _ => {}
            }
        }
        if self.global_orient.is_some() != self.neck.is_some() {
            return Err(CoreError::Schema(format!(
                "{id}: `global_orient` and `neck` must appear together"
            )));
        }
        match t {
            Some(0) | None => Err(CoreError::Schema(format!("{id}: no frames"))),
            Some(n) => Ok(n),
        }
    }

    pub fn layout(&self) -> PartLayout {
        if self.global_orient.is_some() {
            PartLayout::augmented()
        } else {
            PartLayout::base()
        }
    }

    pub fn to_motion(&self, id: &str) -> Result<MotionSequence> {
        let t = self.frames(id)?;
        let layout = self.layout();
        let mut x = MotionSequence::zeros(t, layout.dim());
        let je = layout.expression.len();
        for i in 0..t {
            let f = x.frame_mut(i);
            let face = &self.facial_expression[i * FACE_DIM..(i + 1) * FACE_DIM];
            f[layout.expression.clone()].copy_from_slice(&face[..je]);
            f[layout.jaw.clone()].copy_from_slice(&face[je..]);
            f[layout.body.clone()].copy_from_slice(&self.body[i * BODY_DIM..(i + 1) * BODY_DIM]);
            f[layout.rhand.clone()].copy_from_slice(&self.rhands[i * HAND_DIM..(i + 1) * HAND_DIM]);
            f[layout.lhand.clone()].copy_from_slice(&self.lhands[i * HAND_DIM..(i + 1) * HAND_DIM]);
            if let (Some(r), Some(g)) = (&layout.global_orient, &self.global_orient) {
                f[r.clone()].copy_from_slice(&g[i * ROT_DIM..(i + 1) * ROT_DIM]);
            }
            if let (Some(r), Some(n)) = (&layout.neck, &self.neck) {
                f[r.clone()].copy_from_slice(&n[i * ROT_DIM..(i + 1) * ROT_DIM]);
            }
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Schema(format!("{id}: non-finite parameter")));
        }
        x.fps = FPS;
        Ok(x)
    }

    pub fn from_motion(x: &MotionSequence) -> Result<Self> {
        let layout = PartLayout::for_dim(x.dim())?;
        let take = |r: &std::ops::Range<usize>| {
            (0..x.len())
                .flat_map(|i| x.frame(i)[r.clone()].to_vec())
                .collect::<Vec<f64>>()
        };
        let facial_expression = (0..x.len())
            .flat_map(|i| {
                let f = x.frame(i);
                f[layout.expression.clone()]
                    .iter()
                    .chain(&f[layout.jaw.clone()])
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Self {
            facial_expression,
            body: take(&layout.body),
            rhands: take(&layout.rhand),
            lhands: take(&layout.lhand),
            global_orient: layout.global_orient.as_ref().map(take),
            neck: layout.neck.as_ref().map(take),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordRecord {
    pub gloss: String,
    pub source_info: Value,
    pub segment: Segment,
    pub enrichment: Value,
    pub is_dominant: bool,
    pub core_span: [usize; 2],
    #[serde(flatten)]
    pub arrays: PartArrays,
}

const WORD_KEYS: [&str; 12] = [
    "gloss",
    "source_info",
    "segment",
    "enrichment",
    "is_dominant",
    "core_span",
    "facial_expression",
    "body",
    "rhands",
    "lhands",
    "global_orient",
    "neck",
];

impl WordRecord {
    pub fn to_clip(&self, id: &str) -> Result<GlossClip> {
        let motion = self.arrays.to_motion(id)?;
        let [s, e] = self.core_span;
        if s > e || e >= motion.len() {
            return Err(CoreError::Schema(format!(
                "{id}: core_span {s}..{e} outside {} frames",
                motion.len()
            )));
        }
        let mut clip = GlossClip::new(self.gloss.clone(), motion, (s, e))?;
        clip.source = self.source_info.clone();
        Ok(clip)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub gloss: String,
    #[serde(flatten)]
    pub arrays: PartArrays,
    /// Inclusive core frame range of each gloss in the continuous motion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gloss_spans: Option<Vec<[usize; 2]>>,
}

const SENTENCE_KEYS: [&str; 9] = [
    "text",
    "gloss",
    "facial_expression",
    "body",
    "rhands",
    "lhands",
    "global_orient",
    "neck",
    "gloss_spans",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub sentences: Vec<SentenceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub conversation: Vec<Turn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schema {
    W,
    U,
}

fn check_keys(v: &Value, allowed: &[&str], what: &str) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| CoreError::Schema(format!("{what}: expected an object")))?;
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(CoreError::Schema(format!("{what}: unknown key `{k}`")));
    }
    Ok(())
}

fn strict_dialogue(v: &Value, id: &str) -> Result<()> {
    check_keys(v, &["id", "conversation"], id)?;
    for (ti, turn) in v["conversation"]
        .as_array()
        .into_iter()
        .flatten()
        .enumerate()
    {
        check_keys(turn, &["role", "sentences"], &format!("{id} turn {ti}"))?;
        for (si, s) in turn["sentences"]
            .as_array()
            .into_iter()
            .flatten()
            .enumerate()
        {
            check_keys(s, &SENTENCE_KEYS, &format!("{id} turn {ti} sentence {si}"))?;
        }
    }
    Ok(())
}

fn lines_or_array(r: impl BufRead) -> Result<Vec<Value>> {
    let mut text = String::new();
    let mut r = r;
    r.read_to_string(&mut text)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return match serde_json::from_str(trimmed)? {
            Value::Array(a) => Ok(a),
            _ => Err(CoreError::Format("expected a JSON array".into())),
        };
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CoreError::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn word_id(index: usize) -> String {
    format!("w{index:05}")
}

pub fn dialogue_id(index: usize, rec: &DialogueRecord) -> String {
    rec.id.clone().unwrap_or_else(|| format!("d{index:05}"))
}

/// Parses word records (JSON array or one object per line) and validates
/// their arrays and spans.
pub fn read_words(r: impl BufRead, strict: bool) -> Result<Vec<WordRecord>> {
    lines_or_array(r)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = word_id(i);
            if strict {
                check_keys(&v, &WORD_KEYS, &id)?;
            }
            let rec: WordRecord =
                serde_json::from_value(v).map_err(|e| CoreError::Schema(format!("{id}: {e}")))?;
            rec.to_clip(&id)?;
            Ok(rec)
        })
        .collect()
}

pub fn read_dialogues(r: impl BufRead, strict: bool) -> Result<Vec<DialogueRecord>> {
    lines_or_array(r)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let fallback = format!("d{i:05}");
            let id = v
                .get("id")
                .and_then(Value::as_str)
                .map_or(fallback, String::from);
            if strict {
                strict_dialogue(&v, &id)?;
            }
            let rec: DialogueRecord =
                serde_json::from_value(v).map_err(|e| CoreError::Schema(format!("{id}: {e}")))?;
            for (ti, turn) in rec.conversation.iter().enumerate() {
                for (si, s) in turn.sentences.iter().enumerate() {
                    let sid = format!("{id} turn {ti} sentence {si}");
                    let t = s.arrays.frames(&sid)?;
                    if let Some(spans) = &s.gloss_spans {
                        if spans.iter().any(|&[a, b]| a > b || b >= t) {
                            return Err(CoreError::Schema(format!(
                                "{sid}: gloss span outside {t} frames"
                            )));
                        }
                        if spans.len() != s.gloss.split_whitespace().count() {
                            return Err(CoreError::Schema(format!(
                                "{sid}: {} spans for {} glosses",
                                spans.len(),
                                s.gloss.split_whitespace().count()
                            )));
                        }
                    }
                }
            }
            Ok(rec)
        })
        .collect()
}

pub fn load_words(path: impl AsRef<Path>, strict: bool) -> Result<Vec<WordRecord>> {
    read_words(std::io::BufReader::new(std::fs::File::open(path)?), strict)
}

pub fn load_dialogues(path: impl AsRef<Path>, strict: bool) -> Result<Vec<DialogueRecord>> {
    read_dialogues(std::io::BufReader::new(std::fs::File::open(path)?), strict)
}

/// Canonical export: one compact object per line, fields in schema order.
pub fn write_records<T: Serialize>(w: &mut impl Write, recs: &[T]) -> Result<()> {
    for r in recs {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcConfig {
    pub max_frames: usize,
    pub yaw_threshold: f64,
    pub identity_min: Option<f64>,
    pub scene_min: Option<f64>,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            max_frames: 10 * FPS as usize,
            yaw_threshold: 0.7,
            identity_min: None,
            scene_min: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QcReason {
    TooLong,
    NoFramesLeft,
    Identity,
    Scene,
}

/// External per-clip scores, e.g. face-identity consistency or scene cuts.
pub trait QcHooks: Send + Sync {
    fn identity_score(&self, _clip_id: &str) -> Option<f64> {
        None
    }
    fn scene_score(&self, _clip_id: &str) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoHooks;

impl QcHooks for NoHooks {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub id: String,
    pub keep: bool,
    pub reasons: Vec<QcReason>,
    pub dropped_frames: Vec<usize>,
}

/// Frames whose root and neck yaw both exceed the threshold in magnitude.
pub fn yaw_outliers(x: &MotionSequence, layout: &PartLayout, threshold: f64) -> Vec<usize> {
    let (Some(go), Some(neck)) = (&layout.global_orient, &layout.neck) else {
        return Vec::new();
    };
    let rot = |f: &[f64], r: &std::ops::Range<usize>| [f[r.start], f[r.start + 1], f[r.start + 2]];
    (0..x.len())
        .filter(|&i| {
            let f = x.frame(i);
            yaw_angle(rot(f, go)).abs() > threshold && yaw_angle(rot(f, neck)).abs() > threshold
        })
        .collect()
}

pub fn qc_filter(
    id: &str,
    x: &MotionSequence,
    layout: &PartLayout,
    cfg: &QcConfig,
    hooks: &dyn QcHooks,
) -> QcReport {
    let mut reasons = Vec::new();
    if x.len() > cfg.max_frames {
        reasons.push(QcReason::TooLong);
    }
    let dropped = yaw_outliers(x, layout, cfg.yaw_threshold);
    if dropped.len() == x.len() {
        reasons.push(QcReason::NoFramesLeft);
    }
    if let (Some(min), Some(s)) = (cfg.identity_min, hooks.identity_score(id)) {
        if s < min {
            reasons.push(QcReason::Identity);
        }
    }
    if let (Some(min), Some(s)) = (cfg.scene_min, hooks.scene_score(id)) {
        if s < min {
            reasons.push(QcReason::Scene);
        }
    }
    QcReport {
        id: id.to_string(),
        keep: reasons.is_empty(),
        reasons,
        dropped_frames: dropped,
    }
}

/// Removes the listed frames, shifting the core span to stay on the same
/// content where possible.
pub fn drop_frames(clip: &GlossClip, dropped: &[usize]) -> Result<GlossClip> {
    if dropped.is_empty() {
        return Ok(clip.clone());
    }
    let keep: Vec<usize> = (0..clip.motion.len())
        .filter(|i| dropped.binary_search(i).is_err())
        .collect();
    if keep.is_empty() {
        return Err(CoreError::Empty("frames after QC"));
    }
    let rows: Vec<Vec<f64>> = keep
        .iter()
        .map(|&i| clip.motion.frame(i).to_vec())
        .collect();
    let mut motion = MotionSequence::from_rows(&rows)?;
    motion.fps = clip.motion.fps;
    let (s, e) = clip.core_span;
    let ns = keep.iter().position(|&i| i >= s).unwrap_or(keep.len() - 1);
    let ne = keep.iter().rposition(|&i| i <= e).unwrap_or(0).max(ns);
    let mut out = GlossClip::new(clip.gloss.clone(), motion, (ns, ne))?;
    out.source = clip.source.clone();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DominantConfig {
    pub k: usize,
    pub z_threshold: f64,
}

impl Default for DominantConfig {
    fn default() -> Self {
        Self {
            k: 3,
            z_threshold: -1.5,
        }
    }
}

/// Subsequence DTW: `query` aligned in full to its best contiguous window of
/// `reference`, cost averaged over query frames. Frame cost is the RMS
/// channel difference.
pub fn subsequence_dtw(query: &MotionSequence, reference: &MotionSequence) -> Result<f64> {
    if query.dim() != reference.dim() {
        return Err(CoreError::Dimension(format!(
            "D {} vs {}",
            query.dim(),
            reference.dim()
        )));
    }
    let (n, m) = (query.len(), reference.len());
    let scale = (query.dim() as f64).sqrt();
    let cost = |i: usize, j: usize| {
        query
            .frame(i)
            .iter()
            .zip(reference.frame(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / scale
    };
    let mut prev: Vec<f64> = (0..m).map(|j| cost(0, j)).collect();
    for i in 1..n {
        let mut cur = vec![f64::INFINITY; m];
        for j in 0..m {
            let mut best = prev[j];
            if j > 0 {
                best = best.min(prev[j - 1]).min(cur[j - 1]);
            }
            cur[j] = best + cost(i, j);
        }
        prev = cur;
    }
    Ok(prev.iter().copied().fold(f64::INFINITY, f64::min) / n as f64)
}

/// Similarity `1/(1+d)` of the shorter clip against the longer one; equal
/// lengths take the better direction.
pub fn clip_similarity(a: &MotionSequence, b: &MotionSequence) -> Result<f64> {
    let d = match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Less => subsequence_dtw(a, b)?,
        std::cmp::Ordering::Greater => subsequence_dtw(b, a)?,
        std::cmp::Ordering::Equal => subsequence_dtw(a, b)?.min(subsequence_dtw(b, a)?),
    };
    Ok(1.0 / (1.0 + d))
}

/// Labels each clip of one gloss as dominant (`true`) unless its mean
/// similarity to its `k` nearest neighbours has population z-score below
/// the threshold.
pub fn dominant_split(clips: &[&MotionSequence], cfg: &DominantConfig) -> Result<Vec<bool>> {
    let n = clips.len();
    if n <= 1 {
        return Ok(vec![true; n]);
    }
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = clip_similarity(clips[i], clips[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let k = cfg.k.clamp(1, n - 1);
    let knn: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sim[i][j]).collect();
            row.sort_by(|a, b| b.total_cmp(a));
            row[..k].iter().sum::<f64>() / k as f64
        })
        .collect();
    let mean = knn.iter().sum::<f64>() / n as f64;
    let std = (knn.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std <= 1e-12 {
        return Ok(vec![true; n]);
    }
    Ok(knn
        .iter()
        .map(|v| (v - mean) / std >= cfg.z_threshold)
        .collect())
}
