//! Sentence assembly from refined gloss pairs.

use serde::{Deserialize, Serialize};

use crate::duration::GlossPlan;
use crate::error::{invalid, CoreError, Result};
use crate::motion::{linear_resample, MotionSequence};

/// A refined pair covering glosses `(k, k+1)`; `boundary` is the first frame
/// of the second gloss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedPair {
    pub motion: MotionSequence,
    pub boundary: usize,
}

pub fn split_at_boundary(
    pair: &MotionSequence,
    boundary: usize,
) -> Result<(MotionSequence, MotionSequence)> {
    if boundary == 0 || boundary >= pair.len() {
        return invalid(format!("boundary {boundary} outside 1..{}", pair.len()));
    }
    Ok((pair.slice(0, boundary)?, pair.slice(boundary, pair.len())?))
}

/// `w_i = 0.5·(1 − cos(π·i/(L−1)))`; a single frame gets 0.5.
pub fn cosine_weights(l: usize) -> Vec<f64> {
    if l == 1 {
        return vec![0.5];
    }
    (0..l)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / (l - 1) as f64).cos()))
        .collect()
}

/// Blends two versions of one gloss on a common grid of
/// `round((T_a + T_b)/2)` frames, from `a` at the start to `b` at the end.
pub fn cosine_fuse(a: &MotionSequence, b: &MotionSequence) -> Result<MotionSequence> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::Empty("fusion segment"));
    }
    if a.dim() != b.dim() {
        return Err(CoreError::Dimension(format!(
            "D {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let l = ((a.len() + b.len()) as f64 / 2.0).round() as usize;
    let (ra, rb) = (linear_resample(a, l)?, linear_resample(b, l)?);
    let w = cosine_weights(l);
    let mut out = ra.clone();
    for (i, &wi) in w.iter().enumerate() {
        for (o, (&p, &q)) in out
            .frame_mut(i)
            .iter_mut()
            .zip(ra.frame(i).iter().zip(rb.frame(i)))
        {
            *o = (1.0 - wi) * p + wi * q;
        }
    }
    Ok(out)
}

/// Splits every pair, fuses shared glosses, rescales each gloss to its
/// planned length and concatenates. With no pairs the single clip in
/// `single` is rescaled directly.
pub fn assemble_sentence(pairs: &[RefinedPair], plan: &GlossPlan) -> Result<MotionSequence> {
    if pairs.is_empty() {
        return invalid("no pairs; use rescale_single for one-gloss sentences");
    }
    let k = pairs.len() + 1;
    if plan.lengths.len() != k {
        return invalid(format!(
            "plan has {} glosses, pairs imply {k}",
            plan.lengths.len()
        ));
    }
    let halves = pairs
        .iter()
        .map(|p| split_at_boundary(&p.motion, p.boundary))
        .collect::<Result<Vec<_>>>()?;
    let mut glosses = Vec::with_capacity(k);
    glosses.push(halves[0].0.clone());
    for j in 1..k - 1 {
        glosses.push(cosine_fuse(&halves[j - 1].1, &halves[j].0)?);
    }
    glosses.push(halves[k - 2].1.clone());
    let resized = glosses
        .iter()
        .zip(&plan.lengths)
        .map(|(g, &n)| linear_resample(g, n))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MotionSequence> = resized.iter().collect();
    MotionSequence::concat(&refs)
}

/// The one-gloss case: direct rescale to the planned length.
pub fn rescale_single(clip: &MotionSequence, plan: &GlossPlan) -> Result<MotionSequence> {
    match plan.lengths.as_slice() {
        [n] => linear_resample(clip, *n),
        other => invalid(format!("single clip with a {}-gloss plan", other.len())),
    }
}
