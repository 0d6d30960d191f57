//! Synthetic lexicon and corpus generator for desk-scale experiments.
//!
//! Each gloss is a smooth low-rank trajectory per part. Ground-truth
//! sentences join canonical renderings with cubic Hermite transitions of a
//! known width; isolated variants add a preparation and retraction from the
//! rest pose, a uniform time warp and amplitude noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{DialogueRecord, PartArrays, Role, Segment, SentenceRecord, Turn, WordRecord};
use crate::error::{invalid, Result};
use crate::motion::{MotionSequence, PartLayout, FPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub vocab: usize,
    pub variants: usize,
    pub sentences: usize,
    pub glosses_per_sentence: (usize, usize),
    pub core_len: (usize, usize),
    pub transition: usize,
    pub prep_len: (usize, usize),
    pub time_warp: (f64, f64),
    pub amplitude_noise: f64,
    pub sentences_per_dialogue: usize,
    pub latent: usize,
    pub augmented: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab: 30,
            variants: 14,
            sentences: 500,
            glosses_per_sentence: (2, 6),
            core_len: (14, 26),
            transition: 6,
            prep_len: (8, 12),
            time_warp: (0.85, 1.35),
            amplitude_noise: 0.03,
            sentences_per_dialogue: 5,
            latent: 8,
            augmented: false,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.glosses_per_sentence;
        if self.vocab == 0 || self.variants == 0 || self.sentences == 0 || a == 0 || a > b {
            return invalid("synthetic spec needs positive counts and ordered ranges");
        }
        if self.core_len.0 < 4
            || self.core_len.0 > self.core_len.1
            || self.prep_len.0 > self.prep_len.1
        {
            return invalid("core and preparation length ranges must be ordered, cores ≥ 4 frames");
        }
        if !(0.0 < self.time_warp.0 && self.time_warp.0 <= self.time_warp.1) || self.latent == 0 {
            return invalid("time warp range must be positive and ordered");
        }
        if self.sentences_per_dialogue == 0 {
            return invalid("sentences per dialogue must be positive");
        }
        Ok(())
    }

    pub fn layout(&self) -> PartLayout {
        if self.augmented {
            PartLayout::augmented()
        } else {
            PartLayout::base()
        }
    }
}

/// Latent harmonic trajectory `z(u) = o + Σ_h A_h·sin(2π f_h u + φ_h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGloss {
    pub name: String,
    pub canonical_len: usize,
    offset: Vec<f64>,
    amps: Vec<[f64; 2]>,
    phases: Vec<[f64; 2]>,
}

const FREQS: [f64; 2] = [1.0, 2.0];

impl SynthGloss {
    fn latent_at(&self, u: f64) -> Vec<f64> {
        (0..self.offset.len())
            .map(|k| {
                self.offset[k]
                    + (0..2)
                        .map(|h| {
                            self.amps[k][h]
                                * (2.0 * std::f64::consts::PI * FREQS[h] * u + self.phases[k][h])
                                    .sin()
                        })
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Fixed per-part linear maps from latent space to channels plus a rest pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRig {
    pub layout: PartLayout,
    pub rest: Vec<f64>,
    /// Per channel: the latent block it reads and its loading row.
    loadings: Vec<(usize, Vec<f64>)>,
    latent: usize,
    blocks: usize,
}

impl SynthRig {
    fn new(layout: PartLayout, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let n01 = Normal::new(0.0, 1.0).expect("unit normal");
        let d = layout.dim();
        let mut rest = vec![0.0; d];
        let mut loadings = vec![(0, Vec::new()); d];
        for (b, (name, r)) in layout.ranges().into_iter().enumerate() {
            let gain = match name {
                "rhand" | "lhand" => 0.35,
                "expression" => 0.25,
                "body" => 0.15,
                _ => 0.08,
            };
            for c in r {
                rest[c] = 0.05 * n01.sample(rng);
                let row = (0..latent)
                    .map(|_| gain * n01.sample(rng) / (latent as f64).sqrt())
                    .collect();
                loadings[c] = (b, row);
            }
        }
        let blocks = layout.ranges().len();
        Self {
            layout,
            rest,
            loadings,
            latent,
            blocks,
        }
    }

    fn frame(&self, z: &[f64]) -> Vec<f64> {
        self.loadings
            .iter()
            .zip(&self.rest)
            .map(|((b, row), r)| {
                r + row
                    .iter()
                    .zip(&z[b * self.latent..(b + 1) * self.latent])
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent * self.blocks
    }

    /// Renders a latent trajectory at `len` frames over `u ∈ [0, 1]`.
    fn render(&self, len: usize, z: impl Fn(f64) -> Vec<f64>) -> MotionSequence {
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|i| {
                let u = if len == 1 {
                    0.0
                } else {
                    i as f64 / (len - 1) as f64
                };
                self.frame(&z(u))
            })
            .collect();
        let mut m = MotionSequence::from_rows(&rows).expect("finite synthetic frames");
        m.fps = FPS;
        m
    }

    pub fn render_gloss(&self, g: &SynthGloss, len: usize) -> MotionSequence {
        self.render(len, |u| g.latent_at(u))
    }

    pub fn rest_frame(&self) -> Vec<f64> {
        self.rest.clone()
    }
}

/// Cubic Hermite frames strictly between `p0` and `p1`; tangents are given
/// per frame and scaled to the `n + 1` frame gap.
pub fn hermite_frames(p0: &[f64], v0: &[f64], p1: &[f64], v1: &[f64], n: usize) -> Vec<Vec<f64>> {
    let span = (n + 1) as f64;
    (0..n)
        .map(|i| {
            let s = (i + 1) as f64 / span;
            let (s2, s3) = (s * s, s * s * s);
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            (0..p0.len())
                .map(|d| h00 * p0[d] + h10 * span * v0[d] + h01 * p1[d] + h11 * span * v1[d])
                .collect()
        })
        .collect()
}

fn end_velocity(x: &MotionSequence, at_end: bool) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; x.dim()];
    }
    let (a, b) = if at_end {
        (x.frame(n - 2), x.frame(n - 1))
    } else {
        (x.frame(0), x.frame(1))
    };
    a.iter().zip(b).map(|(p, q)| q - p).collect()
}

/// Joins segments with Hermite transitions of `width` frames. Returns the
/// sequence and each segment's inclusive span.
pub fn blend_segments(
    segments: &[MotionSequence],
    width: usize,
) -> Result<(MotionSequence, Vec<[usize; 2]>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut spans = Vec::with_capacity(segments.len());
    for (k, seg) in segments.iter().enumerate() {
        if k > 0 {
            let prev = &segments[k - 1];
            let p0 = prev.frame(prev.len() - 1);
            rows.extend(hermite_frames(
                p0,
                &end_velocity(prev, true),
                seg.frame(0),
                &end_velocity(seg, false),
                width,
            ));
        }
        let start = rows.len();
        rows.extend((0..seg.len()).map(|i| seg.frame(i).to_vec()));
        spans.push([start, rows.len() - 1]);
    }
    let mut m = MotionSequence::from_rows(&rows)?;
    m.fps = FPS;
    Ok((m, spans))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSentence {
    pub id: String,
    pub glosses: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub rig: SynthRig,
    pub lexicon: Vec<SynthGloss>,
    pub words: Vec<WordRecord>,
    pub dialogues: Vec<DialogueRecord>,
    pub sentences: Vec<SynthSentence>,
}

pub fn gloss_name(i: usize) -> String {
    format!("SIGN{i:02}")
}

fn render_variant(
    rig: &SynthRig,
    g: &SynthGloss,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> (MotionSequence, [usize; 2], f64) {
    let n01 = Normal::new(0.0, 1.0).expect("unit normal");
    let rho = rng.random_range(spec.time_warp.0..=spec.time_warp.1);
    let len = ((g.canonical_len as f64 * rho).round() as usize).max(2);
    let zd = rig.latent_dim();
    let gain: Vec<f64> = (0..zd)
        .map(|_| 1.0 + spec.amplitude_noise * n01.sample(rng))
        .collect();
    let shift: Vec<f64> = (0..zd)
        .map(|_| spec.amplitude_noise * n01.sample(rng))
        .collect();
    let core = rig.render(len, |u| {
        g.latent_at(u)
            .iter()
            .zip(&gain)
            .zip(&shift)
            .map(|((z, a), b)| z * a + b)
            .collect()
    });
    let prep = rng.random_range(spec.prep_len.0..=spec.prep_len.1);
    let retract = rng.random_range(spec.prep_len.0..=spec.prep_len.1);
    let rest = rig.rest_frame();
    let zero = vec![0.0; rest.len()];
    let mut rows = vec![rest.clone()];
    rows.extend(hermite_frames(
        &rest,
        &zero,
        core.frame(0),
        &end_velocity(&core, false),
        prep - 1,
    ));
    let s = rows.len();
    rows.extend((0..core.len()).map(|i| core.frame(i).to_vec()));
    let e = rows.len() - 1;
    rows.extend(hermite_frames(
        core.frame(core.len() - 1),
        &end_velocity(&core, true),
        &rest,
        &zero,
        retract - 1,
    ));
    rows.push(rest);
    let mut m = MotionSequence::from_rows(&rows).expect("finite synthetic frames");
    m.fps = FPS;
    (m, [s, e], rho)
}

/// Deterministic given `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n01 = Normal::new(0.0, 1.0).expect("unit normal");
    let rig = SynthRig::new(spec.layout(), spec.latent, &mut rng);
    let zd = rig.latent_dim();
    let lexicon: Vec<SynthGloss> = (0..spec.vocab)
        .map(|i| SynthGloss {
            name: gloss_name(i),
            canonical_len: rng.random_range(spec.core_len.0..=spec.core_len.1),
            offset: (0..zd).map(|_| 1.2 * n01.sample(&mut rng)).collect(),
            amps: (0..zd)
                .map(|_| [n01.sample(&mut rng), 0.6 * n01.sample(&mut rng)])
                .collect(),
            phases: (0..zd)
                .map(|_| {
                    [
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    ]
                })
                .collect(),
        })
        .collect();

    let mut words = Vec::with_capacity(spec.vocab * spec.variants);
    for g in &lexicon {
        for v in 0..spec.variants {
            let (m, span, rho) = render_variant(&rig, g, spec, &mut rng);
            words.push(WordRecord {
                gloss: g.name.clone(),
                source_info: json!({ "source": "synthetic", "variant": v, "time_warp": rho }),
                segment: Segment {
                    interval: [0.0, m.len() as f64 / FPS as f64],
                    bbox: [0.0, 0.0, 512.0, 512.0],
                },
                enrichment: json!({ "meaning": format!("synthetic sign {}", g.name) }),
                is_dominant: true,
                core_span: span,
                arrays: PartArrays::from_motion(&m)?,
            });
        }
    }

    let mut sentences = Vec::with_capacity(spec.sentences);
    let mut dialogues = Vec::new();
    let mut turns = Vec::new();
    for i in 0..spec.sentences {
        let k = rng.random_range(spec.glosses_per_sentence.0..=spec.glosses_per_sentence.1);
        let mut glosses: Vec<usize> = Vec::with_capacity(k);
        while glosses.len() < k {
            let g = rng.random_range(0..spec.vocab);
            if glosses.last() != Some(&g) {
                glosses.push(g);
            }
        }
        let segs: Vec<MotionSequence> = glosses
            .iter()
            .map(|&g| rig.render_gloss(&lexicon[g], lexicon[g].canonical_len))
            .collect();
        let (gt, spans) = blend_segments(&segs, spec.transition)?;
        let names: Vec<String> = glosses.iter().map(|&g| lexicon[g].name.clone()).collect();
        let dlg = i / spec.sentences_per_dialogue;
        let turn = i % spec.sentences_per_dialogue;
        sentences.push(SynthSentence {
            id: format!("d{dlg:05}-t{turn}-s0"),
            glosses,
        });
        turns.push(Turn {
            role: if turn.is_multiple_of(2) {
                Role::User
            } else {
                Role::Assistant
            },
            sentences: vec![SentenceRecord {
                text: names
                    .iter()
                    .map(|n| n.to_lowercase())
                    .collect::<Vec<_>>()
                    .join(" "),
                gloss: names.join(" "),
                arrays: PartArrays::from_motion(&gt)?,
                gloss_spans: Some(spans),
            }],
        });
        if turn + 1 == spec.sentences_per_dialogue || i + 1 == spec.sentences {
            dialogues.push(DialogueRecord {
                id: Some(format!("d{dlg:05}")),
                conversation: std::mem::take(&mut turns),
            });
        }
    }
    Ok(SynthCorpus {
        rig,
        lexicon,
        words,
        dialogues,
        sentences,
    })
}
