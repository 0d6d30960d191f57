//! Motion representation: part layout, frame matrices and the per-dimension
//! signal operations shared by the rest of the pipeline.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

pub const FPS: u32 = 25;

/// Channel ranges of a frame vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartLayout {
    pub body: Range<usize>,
    pub expression: Range<usize>,
    pub jaw: Range<usize>,
    pub rhand: Range<usize>,
    pub lhand: Range<usize>,
    pub global_orient: Option<Range<usize>>,
    pub neck: Option<Range<usize>>,
}

/// Coarse part groups used for loss weighting and component metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartGroup {
    Body,
    Face,
    Hands,
}

impl PartLayout {
    /// `body(63) | expression(50) | jaw(3) | rhand(45) | lhand(45)`, D = 206.
    pub fn base() -> Self {
        Self {
            body: 0..63,
            expression: 63..113,
            jaw: 113..116,
            rhand: 116..161,
            lhand: 161..206,
            global_orient: None,
            neck: None,
        }
    }

    /// Base layout plus root orientation and neck rotation, D = 212.
    pub fn augmented() -> Self {
        Self {
            global_orient: Some(0..3),
            body: 3..66,
            neck: Some(66..69),
            jaw: 69..72,
            expression: 72..122,
            rhand: 122..167,
            lhand: 167..212,
        }
    }

    pub fn for_dim(d: usize) -> Result<Self> {
        match d {
            206 => Ok(Self::base()),
            212 => Ok(Self::augmented()),
            _ => Err(CoreError::Dimension(format!(
                "no standard layout for D = {d}"
            ))),
        }
    }

    pub fn ranges(&self) -> Vec<(&'static str, Range<usize>)> {
        let mut out = vec![
            ("body", self.body.clone()),
            ("expression", self.expression.clone()),
            ("jaw", self.jaw.clone()),
            ("rhand", self.rhand.clone()),
            ("lhand", self.lhand.clone()),
        ];
        if let Some(r) = &self.global_orient {
            out.push(("global_orient", r.clone()));
        }
        if let Some(r) = &self.neck {
            out.push(("neck", r.clone()));
        }
        out.sort_by_key(|(_, r)| r.start);
        out
    }

    pub fn dim(&self) -> usize {
        self.ranges().iter().map(|(_, r)| r.len()).sum()
    }

    /// Checks that the ranges are disjoint and tile `[0, D)`.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (name, r) in self.ranges() {
            if r.start != next || r.is_empty() {
                return Err(CoreError::Dimension(format!(
                    "range {name} {r:?} does not continue at {next}"
                )));
            }
            next = r.end;
        }
        Ok(())
    }

    pub fn group_ranges(&self, group: PartGroup) -> Vec<Range<usize>> {
        let mut v = Vec::new();
        match group {
            PartGroup::Body => {
                v.extend(self.global_orient.clone());
                v.push(self.body.clone());
            }
            PartGroup::Face => {
                v.push(self.expression.clone());
                v.push(self.jaw.clone());
                v.extend(self.neck.clone());
            }
            PartGroup::Hands => {
                v.push(self.rhand.clone());
                v.push(self.lhand.clone());
            }
        }
        v
    }

    pub fn group_of(&self, dim: usize) -> Option<PartGroup> {
        [PartGroup::Body, PartGroup::Face, PartGroup::Hands]
            .into_iter()
            .find(|&g| self.group_ranges(g).iter().any(|r| r.contains(&dim)))
    }

    /// Per-channel weights from `(body, face, hands)` group weights.
    pub fn channel_weights(&self, w: (f64, f64, f64)) -> Vec<f64> {
        (0..self.dim())
            .map(|d| match self.group_of(d) {
                Some(PartGroup::Body) => w.0,
                Some(PartGroup::Face) => w.1,
                Some(PartGroup::Hands) => w.2,
                None => 0.0,
            })
            .collect()
    }
}

/// `T × D` row-major frame matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    t: usize,
    d: usize,
    pub fps: u32,
    data: Vec<f64>,
}

impl MotionSequence {
    pub fn new(t: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if t == 0 || d == 0 {
            return Err(CoreError::Empty("motion sequence"));
        }
        if data.len() != t * d {
            return Err(CoreError::Dimension(format!(
                "{t}x{d} needs {} values, got {}",
                t * d,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("motion sequence"));
        }
        Ok(Self {
            t,
            d,
            fps: FPS,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(CoreError::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn zeros(t: usize, d: usize) -> Self {
        Self {
            t,
            d,
            fps: FPS,
            data: vec![0.0; t * d],
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.d + j]
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return invalid(format!("frame range {start}..{end} of {}", self.t));
        }
        let mut s = Self::new(
            end - start,
            self.d,
            self.data[start * self.d..end * self.d].to_vec(),
        )?;
        s.fps = self.fps;
        Ok(s)
    }

    /// Copy keeping only the given channel ranges, in order.
    pub fn select_channels(&self, ranges: &[Range<usize>]) -> Result<Self> {
        let width: usize = ranges.iter().map(|r| r.len()).sum();
        if ranges.iter().any(|r| r.end > self.d) {
            return Err(CoreError::Dimension("channel range beyond D".into()));
        }
        let mut data = Vec::with_capacity(self.t * width);
        for i in 0..self.t {
            let f = self.frame(i);
            for r in ranges {
                data.extend_from_slice(&f[r.clone()]);
            }
        }
        Self::new(self.t, width, data)
    }

    pub fn reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..self.t).rev() {
            data.extend_from_slice(self.frame(i));
        }
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn concat(parts: &[&MotionSequence]) -> Result<Self> {
        let d = parts.first().ok_or(CoreError::Empty("concat"))?.d;
        if parts.iter().any(|p| p.d != d) {
            return Err(CoreError::Dimension("concat of differing D".into()));
        }
        let t = parts.iter().map(|p| p.t).sum();
        let mut data = Vec::with_capacity(t * d);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            t,
            d,
            fps: parts[0].fps,
            data,
        })
    }
}

/// Labeled isolated clip with its core articulation span (inclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlossClip {
    pub gloss: String,
    pub motion: MotionSequence,
    pub core_span: (usize, usize),
    #[serde(default)]
    pub source: serde_json::Value,
}

impl GlossClip {
    pub fn new(
        gloss: impl Into<String>,
        motion: MotionSequence,
        core_span: (usize, usize),
    ) -> Result<Self> {
        let (s, e) = core_span;
        if s > e || e >= motion.len() {
            return invalid(format!(
                "core span {core_span:?} outside {} frames",
                motion.len()
            ));
        }
        Ok(Self {
            gloss: gloss.into(),
            motion,
            core_span,
            source: serde_json::Value::Null,
        })
    }

    pub fn core_motion(&self) -> MotionSequence {
        self.motion
            .slice(self.core_span.0, self.core_span.1 + 1)
            .expect("span validated at construction")
    }
}

/// Concatenates two clips; the boundary index is the first frame of `b`.
pub fn concat_pair(a: &MotionSequence, b: &MotionSequence) -> Result<(MotionSequence, usize)> {
    if a.dim() != b.dim() {
        return Err(CoreError::Dimension(format!(
            "D {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok((MotionSequence::concat(&[a, b])?, a.len()))
}

/// Piecewise-linear resampling over normalized time; first and last frames
/// are kept exactly.
pub fn linear_resample(x: &MotionSequence, t_out: usize) -> Result<MotionSequence> {
    if t_out == 0 {
        return invalid("resample to zero frames");
    }
    if t_out == x.len() {
        return Ok(x.clone());
    }
    let (t, d) = (x.len(), x.dim());
    let mut data = Vec::with_capacity(t_out * d);
    for i in 0..t_out {
        let pos = if t_out == 1 || t == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (t_out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        if i + 1 == t_out && t_out > 1 {
            data.extend_from_slice(x.frame(t - 1));
            continue;
        }
        let (a, b) = (x.frame(lo), x.frame(hi));
        if frac == 0.0 {
            data.extend_from_slice(a);
        } else {
            data.extend(a.iter().zip(b).map(|(&p, &q)| p + frac * (q - p)));
        }
    }
    let mut out = MotionSequence::new(t_out, d, data)?;
    out.fps = x.fps;
    Ok(out)
}

/// Least-squares polynomial smoothing coefficients: entry `[p][j]` weights
/// sample `j` of a `window`-long window when evaluating at window offset `p`.
pub fn savgol_coefficients(window: usize, order: usize) -> Vec<Vec<f64>> {
    let cols = order + 1;
    let a = DMatrix::from_fn(window, cols, |j, k| (j as f64).powi(k as i32));
    let ata = a.transpose() * &a;
    let inv = ata
        .try_inverse()
        .expect("Vandermonde normal equations are regular for order < window");
    let pinv = inv * a.transpose();
    (0..window)
        .map(|p| {
            let basis = DVector::from_fn(cols, |k, _| (p as f64).powi(k as i32));
            (basis.transpose() * &pinv).iter().copied().collect()
        })
        .collect()
}

/// Savitzky–Golay smoothing. Interior frames use the centred window; the
/// first and last `window/2` frames reuse the one-sided window flush with the
/// edge. Returns the input unchanged with `true` when the window is even,
/// larger than the sequence, or not above the order.
pub fn savgol_smooth(x: &MotionSequence, window: usize, order: usize) -> (MotionSequence, bool) {
    let t = x.len();
    if window.is_multiple_of(2) || window > t || order >= window {
        return (x.clone(), true);
    }
    let coeffs = savgol_coefficients(window, order);
    let half = window / 2;
    let d = x.dim();
    let mut out = x.clone();
    for i in 0..t {
        let start = i.saturating_sub(half).min(t - window);
        let c = &coeffs[i - start];
        let row = out.frame_mut(i);
        row.iter_mut().for_each(|v| *v = 0.0);
        for (j, &cj) in c.iter().enumerate() {
            let src = &x.data()[(start + j) * d..(start + j + 1) * d];
            for (o, &s) in row.iter_mut().zip(src) {
                *o += cj * s;
            }
        }
    }
    (out, false)
}

/// First or second temporal difference, padded to length T with the nearest
/// valid value. Too-short input gives zeros and `true`.
pub fn temporal_diff(x: &MotionSequence, order: usize) -> Result<(MotionSequence, bool)> {
    if order != 1 && order != 2 {
        return invalid(format!("difference order {order}"));
    }
    let (t, d) = (x.len(), x.dim());
    if t < order + 1 {
        return Ok((MotionSequence::zeros(t, d), true));
    }
    let mut cur: Vec<f64> = x.data().to_vec();
    let mut len = t;
    for _ in 0..order {
        cur = (0..(len - 1) * d).map(|i| cur[i + d] - cur[i]).collect();
        len -= 1;
    }
    // Order 1 is the forward difference at frame k; order 2 row k is the
    // central second difference at frame k + 1.
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t {
        let k = i.saturating_sub(order - 1).min(len - 1);
        out.extend_from_slice(&cur[k * d..(k + 1) * d]);
    }
    Ok((MotionSequence::new(t, d, out)?, false))
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn axis_angle_to_matrix(r: [f64; 3]) -> [[f64; 3]; 3] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let (x, y, z) = (r[0] / theta, r[1] / theta, r[2] / theta);
    let (s, c) = theta.sin_cos();
    let v = 1.0 - c;
    [
        [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
        [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
        [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
    ]
}

/// Yaw (rotation about the vertical y axis) of an axis-angle rotation under
/// the intrinsic Y-X-Z decomposition `R = Ry(yaw)·Rx(pitch)·Rz(roll)`.
pub fn yaw_angle(r: [f64; 3]) -> f64 {
    let m = axis_angle_to_matrix(r);
    m[0][2].atan2(m[2][2])
}

const MAGIC: &[u8; 4] = b"SVMX";
const VERSION: u32 = 1;

pub fn write_motion(w: &mut impl Write, x: &MotionSequence) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [VERSION, x.len() as u32, x.dim() as u32, x.fps] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in x.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_motion(r: &mut impl Read) -> Result<MotionSequence> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(CoreError::Format("missing SVMX magic".into()));
    }
    let field =
        |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, t, d, fps) = (field(0), field(1) as usize, field(2) as usize, field(3));
    if version != VERSION {
        return Err(CoreError::Format(format!(
            "unsupported motion version {version}"
        )));
    }
    let mut buf = vec![0u8; t * d * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut m = MotionSequence::new(t, d, data)?;
    m.fps = fps;
    Ok(m)
}

pub fn save_motion(path: impl AsRef<Path>, x: &MotionSequence) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_motion(&mut w, x)?;
    w.flush()?;
    Ok(())
}

pub fn load_motion(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_motion(&mut r)
}
