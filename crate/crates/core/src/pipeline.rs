//! Staged runner from raw records to evaluation. Every stage writes into
//! `out_dir/<stage>/` and is recorded in `out_dir/manifest.json` together
//! with a hash of its outputs, so completed stages can be skipped on resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::braid::{
    make_boundary_mask, BraidModel, BraidPair, BraidTrainConfig, DenoiserConfig, DiffusionSchedule,
    INFERENCE_RADIUS,
};
use crate::dataset::{
    dialogue_id, dominant_split, drop_frames, load_dialogues, load_words, qc_filter, word_id,
    DialogueRecord, DominantConfig, NoHooks, QcConfig, QcReason, Role, WordRecord,
};
use crate::duration::{
    gloss_pair_features, integer_plan, largest_remainder, pair_feature_dim,
    sentence_token_features, target_allocation, token_feature_dim, DurationConfig, DurationInput,
    DurationModel, DurationSample, GlossPlan, MIN_LEN, SCALE_CLAMP,
};
use crate::error::{invalid, CoreError, Result};
use crate::frame_select::{select_core_span, NullRefiner, TrimConfig, TrimFlags};
use crate::metrics::{dtw_mpjpe, dtw_pa_mpjpe, fgd, length_ratio, PointAdapter, SyntheticSkeleton};
use crate::motion::{
    linear_resample, load_motion, save_motion, GlossClip, MotionSequence, PartLayout,
};
use crate::stitch::{assemble_sentence, rescale_single, RefinedPair};
use crate::synth::{synth_generate, SynthSpec};

pub const STAGES: [&str; 8] = [
    "ingest",
    "qc",
    "trim",
    "train-duration",
    "train-braid",
    "compose",
    "stitch",
    "eval",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub ddim_steps: usize,
    pub radius: usize,
    /// Interpolated frames between clips in the linear baseline and fallback.
    pub transition_frames: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            radius: INFERENCE_RADIUS,
            transition_frames: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Word-level records; with neither input set a synthetic corpus is used.
    pub words: Option<PathBuf>,
    pub dialogues: Option<PathBuf>,
    pub strict: bool,
    pub seed: u64,
    /// Worker threads, 0 for the rayon default. Not part of the config hash.
    pub workers: usize,
    /// Fraction of dialogues, in file order, used for training.
    pub train_fraction: f64,
    pub synth: SynthSpec,
    pub qc: QcConfig,
    pub dominant: DominantConfig,
    pub trim: TrimConfig,
    pub dgloss: DurationConfig,
    pub dsent: DurationConfig,
    pub denoiser: DenoiserConfig,
    pub braid: BraidTrainConfig,
    pub inference: InferenceConfig,
    pub skeleton_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            words: None,
            dialogues: None,
            strict: true,
            seed: 0,
            workers: 0,
            train_fraction: 0.8,
            synth: SynthSpec::default(),
            qc: QcConfig::default(),
            dominant: DominantConfig::default(),
            trim: TrimConfig::default(),
            dgloss: DurationConfig {
                hidden: 128,
                layers: 3,
                epochs: 40,
                batch_size: 32,
                ..DurationConfig::gloss()
            },
            dsent: DurationConfig {
                epochs: 40,
                batch_size: 16,
                ..DurationConfig::sentence()
            },
            denoiser: DenoiserConfig::default(),
            braid: BraidTrainConfig::default(),
            inference: InferenceConfig::default(),
            skeleton_seed: 11,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return invalid("train_fraction must lie in (0, 1)");
        }
        if self.words.is_some() != self.dialogues.is_some() {
            return invalid("words and dialogues inputs must be given together");
        }
        if self.inference.ddim_steps == 0 {
            return invalid("ddim_steps must be positive");
        }
        self.trim.validate()?;
        if self.words.is_none() {
            self.synth.validate()?;
        }
        Ok(())
    }

    /// sha256 of the canonical (key-sorted) JSON of every setting that can
    /// change results; `workers` and `out_dir` are excluded.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
            m.remove("out_dir");
        }
        Ok(hex::encode(Sha256::digest(
            serde_json::to_string(&v)?.as_bytes(),
        )))
    }

    /// Per-component seed derived from the run seed.
    pub fn derived_seed(&self, component: &str) -> u64 {
        hash_u64(&format!("{}:{component}", self.seed))
    }
}

fn hash_u64(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub output_hash: Option<String>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn upsert(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
        self.stages.sort_by_key(|s| {
            STAGES
                .iter()
                .position(|n| *n == s.name)
                .unwrap_or(usize::MAX)
        });
    }
}

/// sha256 over every file below `dir`, in sorted relative-path order.
pub fn hash_dir(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                let rel = p
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                out.push((rel, p));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        let bytes = fs::read(&p)?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f =
        fs::File::open(path).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&s)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub gloss: String,
    pub frames: usize,
    pub core_span: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceMeta {
    pub id: String,
    pub dialogue: String,
    pub role: Role,
    pub text: String,
    pub gloss: Vec<String>,
    pub spans: Option<Vec<[usize; 2]>>,
    pub frames: usize,
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcRow {
    pub id: String,
    pub gloss: String,
    pub keep: bool,
    pub reasons: Vec<QcReason>,
    pub dropped_frames: usize,
    pub dominant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimRow {
    pub id: String,
    pub span: [usize; 2],
    pub recorded_span: [usize; 2],
    pub iou: f64,
    pub flags: TrimFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMethod {
    Braid,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub sentence: String,
    pub k: usize,
    pub clips: [String; 2],
    pub lengths: [usize; 2],
    pub boundary: usize,
    pub method: PairMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub sentence: String,
    pub plan: GlossPlan,
    pub predicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub sentences: usize,
    pub dtw_mpjpe: f64,
    pub dtw_pa_mpjpe: f64,
    pub dtw_mpvpe: f64,
    pub length_ratio: f64,
    /// Mean of `|T_pred/T_gt − 1|` over sentences.
    pub length_deviation: f64,
    pub fgd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationEval {
    pub pairs: usize,
    /// Mean `|ŝ − s|` of the pair predictor on held-out pairs.
    pub mae_model: f64,
    /// Mean `|s|`, i.e. the error of always predicting no rescaling.
    pub mae_zero: f64,
    pub reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodMetrics>,
    pub duration: Option<DurationEval>,
    pub compose_fallback: bool,
    pub skipped_sentences: usize,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Frames `a`, then `n` linearly interpolated frames, then `b`; the pair
/// boundary is placed at the middle of the transition.
pub fn linear_bridge(
    a: &MotionSequence,
    b: &MotionSequence,
    n: usize,
) -> Result<(MotionSequence, usize)> {
    let (out, bounds) = linear_transition(&[a, b], n)?;
    Ok((out, bounds[0]))
}

/// Concatenates clips with `n` interpolated frames between neighbours.
/// Returns the sequence and, per junction, the transition midpoint.
pub fn linear_transition(
    clips: &[&MotionSequence],
    n: usize,
) -> Result<(MotionSequence, Vec<usize>)> {
    let Some(first) = clips.first() else {
        return Err(CoreError::Empty("clips"));
    };
    let d = first.dim();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut bounds = Vec::new();
    for (k, c) in clips.iter().enumerate() {
        if c.dim() != d || c.is_empty() {
            return Err(CoreError::Dimension(
                "clips differ in D or are empty".into(),
            ));
        }
        if k > 0 {
            let p = clips[k - 1].frame(clips[k - 1].len() - 1);
            let q = c.frame(0);
            bounds.push(rows.len() + n.div_ceil(2));
            for i in 1..=n {
                let w = i as f64 / (n + 1) as f64;
                rows.push(p.iter().zip(q).map(|(x, y)| x + w * (y - x)).collect());
            }
        }
        rows.extend((0..c.len()).map(|i| c.frame(i).to_vec()));
    }
    let mut m = MotionSequence::from_rows(&rows)?;
    m.fps = first.fps;
    Ok((m, bounds))
}

/// Deterministic variant index for gloss position `pos` of a sentence.
pub fn pick_variant(seed: u64, sentence: &str, pos: usize, n: usize) -> usize {
    (hash_u64(&format!("{seed}:{sentence}:{pos}")) % n as u64) as usize
}

/// Trimmed cores grouped by gloss, each group sorted by clip id.
pub type CoreLibrary = BTreeMap<String, Vec<(String, MotionSequence)>>;

type Cores<'a> = Vec<(&'a str, &'a MotionSequence)>;

fn sentence_cores<'a>(lib: &'a CoreLibrary, s: &SentenceMeta, seed: u64) -> Option<Cores<'a>> {
    s.gloss
        .iter()
        .enumerate()
        .map(|(pos, g)| {
            let v = lib.get(g)?;
            let (id, m) = &v[pick_variant(seed, &s.id, pos, v.len())];
            Some((id.as_str(), m))
        })
        .collect()
}

fn pair_sample(a: &MotionSequence, b: &MotionSequence, la: f64, lb: f64) -> Result<DurationSample> {
    let s = (((la + lb) / (a.len() + b.len()) as f64).ln()).clamp(-SCALE_CLAMP, SCALE_CLAMP);
    Ok(DurationSample {
        input: DurationInput::Pair(gloss_pair_features(a, b)?),
        s,
        w: vec![la / (la + lb), lb / (la + lb)],
    })
}

/// Fractional ground-truth gloss lengths of a sentence.
fn gt_lengths(spans: &[[usize; 2]], total: usize) -> Result<Vec<f64>> {
    let sp: Vec<(usize, usize)> = spans.iter().map(|s| (s[0], s[1])).collect();
    Ok(target_allocation(&sp, Some(total))?
        .into_iter()
        .map(|w| w * total as f64)
        .collect())
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub config_hash: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash()?;
        Ok(Self { cfg, config_hash })
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.cfg.out_dir.join(stage)
    }

    fn manifest_path(&self) -> PathBuf {
        self.cfg.out_dir.join("manifest.json")
    }

    /// The on-disk manifest if it belongs to this configuration, else a
    /// fresh one.
    pub fn manifest(&self) -> Manifest {
        let fresh = || Manifest {
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            seeds: ["dgloss", "dsent", "braid", "variants", "sampling"]
                .iter()
                .map(|c| (c.to_string(), self.cfg.derived_seed(c)))
                .collect(),
            stages: Vec::new(),
        };
        match read_json::<Manifest>(&self.manifest_path()) {
            Ok(m) if m.config_hash == self.config_hash => m,
            _ => fresh(),
        }
    }

    fn is_current(&self, m: &Manifest, stage: &str) -> bool {
        let Some(rec) = m.stage(stage) else {
            return false;
        };
        let dir = self.dir(stage);
        rec.status == StageStatus::Done && dir.is_dir() && hash_dir(&dir).ok() == rec.output_hash
    }

    /// Runs one stage, recording it in the manifest. With `resume`, a stage
    /// whose recorded output hash still matches is skipped.
    pub fn run_stage(&self, stage: &str, resume: bool) -> Result<bool> {
        if !STAGES.contains(&stage) {
            return invalid(format!("unknown stage {stage}"));
        }
        fs::create_dir_all(&self.cfg.out_dir)?;
        let mut m = self.manifest();
        if resume && self.is_current(&m, stage) {
            return Ok(false);
        }
        let dir = self.dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let t0 = Instant::now();
        let res = self.with_pool(|| self.execute(stage, &dir));
        let seconds = t0.elapsed().as_secs_f64();
        let rec = match &res {
            Ok(()) => StageRecord {
                name: stage.to_string(),
                status: StageStatus::Done,
                output_hash: Some(hash_dir(&dir)?),
                seconds,
                error: None,
            },
            Err(e) => StageRecord {
                name: stage.to_string(),
                status: StageStatus::Failed,
                output_hash: None,
                seconds,
                error: Some(e.to_string()),
            },
        };
        m.upsert(rec);
        write_json(&self.manifest_path(), &m)?;
        res.map(|()| true).map_err(|e| CoreError::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        })
    }

    /// Runs every stage in order, halting at the first failure.
    pub fn run_all(&self, resume: bool) -> Result<Manifest> {
        for s in STAGES {
            self.run_stage(s, resume)?;
        }
        Ok(self.manifest())
    }

    fn with_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        if self.cfg.workers == 0 {
            return f();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| CoreError::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(f)
    }

    fn execute(&self, stage: &str, dir: &Path) -> Result<()> {
        match stage {
            "ingest" => self.ingest(dir),
            "qc" => self.qc(dir),
            "trim" => self.trim(dir),
            "train-duration" => self.train_duration(dir),
            "train-braid" => self.train_braid(dir),
            "compose" => self.compose(dir),
            "stitch" => self.stitch(dir),
            "eval" => self.eval(dir),
            _ => unreachable!("checked by run_stage"),
        }
    }

    fn needs(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        if !self.is_current(&self.manifest(), stage) {
            return invalid(format!("stage {stage} has no current output; run it first"));
        }
        Ok(dir)
    }

    pub fn layout(&self) -> Result<PartLayout> {
        read_json(&self.dir("ingest").join("layout.json"))
    }

    fn load_records(&self) -> Result<(Vec<WordRecord>, Vec<DialogueRecord>)> {
        match (&self.cfg.words, &self.cfg.dialogues) {
            (Some(w), Some(d)) => Ok((
                load_words(w, self.cfg.strict)?,
                load_dialogues(d, self.cfg.strict)?,
            )),
            _ => {
                let c = synth_generate(&self.cfg.synth)?;
                Ok((c.words, c.dialogues))
            }
        }
    }

    fn ingest(&self, dir: &Path) -> Result<()> {
        let (words, dialogues) = self.load_records()?;
        if words.is_empty() || dialogues.is_empty() {
            return Err(CoreError::Empty("word or dialogue records"));
        }
        let layout = words[0].arrays.layout();
        fs::create_dir_all(dir.join("words"))?;
        fs::create_dir_all(dir.join("sentences"))?;
        let clips: Vec<ClipMeta> = words
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let id = word_id(i);
                let clip = w.to_clip(&id)?;
                if clip.motion.dim() != layout.dim() {
                    return Err(CoreError::Schema(format!(
                        "{id}: layout differs from the first record"
                    )));
                }
                save_motion(dir.join("words").join(format!("{id}.svmx")), &clip.motion)?;
                Ok(ClipMeta {
                    id,
                    gloss: w.gloss.clone(),
                    frames: clip.motion.len(),
                    core_span: [clip.core_span.0, clip.core_span.1],
                })
            })
            .collect::<Result<_>>()?;

        let n_train = ((dialogues.len() as f64 * self.cfg.train_fraction).round() as usize)
            .clamp(1, dialogues.len().max(2) - 1);
        let mut jobs = Vec::new();
        for (di, d) in dialogues.iter().enumerate() {
            let did = dialogue_id(di, d);
            for (ti, turn) in d.conversation.iter().enumerate() {
                for (si, s) in turn.sentences.iter().enumerate() {
                    jobs.push((
                        format!("{did}-t{ti}-s{si}"),
                        did.clone(),
                        turn.role,
                        s,
                        di < n_train,
                    ));
                }
            }
        }
        let sentences: Vec<SentenceMeta> = jobs
            .par_iter()
            .map(|(sid, did, role, s, train)| {
                let x = s.arrays.to_motion(sid)?;
                if x.dim() != layout.dim() {
                    return Err(CoreError::Schema(format!(
                        "{sid}: layout differs from the word records"
                    )));
                }
                save_motion(dir.join("sentences").join(format!("{sid}.svmx")), &x)?;
                let gloss: Vec<String> = s.gloss.split_whitespace().map(str::to_string).collect();
                let spans = s.gloss_spans.clone().filter(|sp| sp.len() == gloss.len());
                Ok(SentenceMeta {
                    id: sid.clone(),
                    dialogue: did.clone(),
                    role: *role,
                    text: s.text.clone(),
                    gloss,
                    spans,
                    frames: x.len(),
                    train: *train,
                })
            })
            .collect::<Result<_>>()?;
        write_json(&dir.join("layout.json"), &layout)?;
        write_jsonl(&dir.join("clips.jsonl"), &clips)?;
        write_jsonl(&dir.join("sentences.jsonl"), &sentences)?;
        Ok(())
    }

    fn qc(&self, dir: &Path) -> Result<()> {
        let src = self.needs("ingest")?;
        let layout = self.layout()?;
        let metas: Vec<ClipMeta> = read_jsonl(&src.join("clips.jsonl"))?;
        let checked: Vec<(ClipMeta, QcRow, Option<GlossClip>)> = metas
            .into_par_iter()
            .map(|m| {
                let x = load_motion(src.join("words").join(format!("{}.svmx", m.id)))?;
                let rep = qc_filter(&m.id, &x, &layout, &self.cfg.qc, &NoHooks);
                let clip = if rep.keep {
                    let c = GlossClip::new(m.gloss.clone(), x, (m.core_span[0], m.core_span[1]))?;
                    Some(drop_frames(&c, &rep.dropped_frames)?)
                } else {
                    None
                };
                let row = QcRow {
                    id: m.id.clone(),
                    gloss: m.gloss.clone(),
                    keep: rep.keep,
                    reasons: rep.reasons,
                    dropped_frames: rep.dropped_frames.len(),
                    dominant: false,
                };
                Ok((m, row, clip))
            })
            .collect::<Result<_>>()?;

        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, (m, _, c)) in checked.iter().enumerate() {
            if c.is_some() {
                groups.entry(m.gloss.as_str()).or_default().push(i);
            }
        }
        let groups: Vec<Vec<usize>> = groups.into_values().collect();
        let flags: Vec<Vec<bool>> = groups
            .par_iter()
            .map(|idx| {
                let ms: Vec<&MotionSequence> = idx
                    .iter()
                    .map(|&i| &checked[i].2.as_ref().expect("kept").motion)
                    .collect();
                dominant_split(&ms, &self.cfg.dominant)
            })
            .collect::<Result<_>>()?;
        let mut rows: Vec<QcRow> = checked.iter().map(|c| c.1.clone()).collect();
        for (idx, fl) in groups.iter().zip(&flags) {
            for (&i, &f) in idx.iter().zip(fl) {
                rows[i].dominant = f;
            }
        }
        fs::create_dir_all(dir.join("words"))?;
        let mut kept = Vec::new();
        for ((m, _, c), row) in checked.iter().zip(&rows) {
            if let (Some(c), true) = (c, row.dominant) {
                save_motion(dir.join("words").join(format!("{}.svmx", m.id)), &c.motion)?;
                kept.push(ClipMeta {
                    id: m.id.clone(),
                    gloss: m.gloss.clone(),
                    frames: c.motion.len(),
                    core_span: [c.core_span.0, c.core_span.1],
                });
            }
        }
        write_jsonl(&dir.join("report.jsonl"), &rows)?;
        write_jsonl(&dir.join("clips.jsonl"), &kept)?;
        Ok(())
    }

    fn trim(&self, dir: &Path) -> Result<()> {
        let src = self.needs("qc")?;
        let metas: Vec<ClipMeta> = read_jsonl(&src.join("clips.jsonl"))?;
        fs::create_dir_all(dir.join("cores"))?;
        let out: Vec<(ClipMeta, TrimRow)> = metas
            .into_par_iter()
            .map(|m| {
                let x = load_motion(src.join("words").join(format!("{}.svmx", m.id)))?;
                let clip = GlossClip::new(m.gloss.clone(), x, (m.core_span[0], m.core_span[1]))?;
                let ((s, e), res) =
                    select_core_span(&m.id, &clip, None, &self.cfg.trim, &NullRefiner)?;
                let core = clip.motion.slice(s, e + 1)?;
                save_motion(dir.join("cores").join(format!("{}.svmx", m.id)), &core)?;
                let inter = (e.min(m.core_span[1]) + 1).saturating_sub(s.max(m.core_span[0]));
                let union = e.max(m.core_span[1]) + 1 - s.min(m.core_span[0]);
                let row = TrimRow {
                    id: m.id.clone(),
                    span: [s, e],
                    recorded_span: m.core_span,
                    iou: inter as f64 / union as f64,
                    flags: res.flags,
                };
                let meta = ClipMeta {
                    frames: core.len(),
                    core_span: [s, e],
                    ..m
                };
                Ok((meta, row))
            })
            .collect::<Result<_>>()?;
        let (metas, rows): (Vec<ClipMeta>, Vec<TrimRow>) = out.into_iter().unzip();
        write_jsonl(&dir.join("cores.jsonl"), &metas)?;
        write_jsonl(&dir.join("report.jsonl"), &rows)?;
        Ok(())
    }

    /// Trimmed cores from the trim stage.
    pub fn core_library(&self) -> Result<CoreLibrary> {
        let dir = self.needs("trim")?;
        let metas: Vec<ClipMeta> = read_jsonl(&dir.join("cores.jsonl"))?;
        let mut lib = CoreLibrary::new();
        for m in metas {
            let x = load_motion(dir.join("cores").join(format!("{}.svmx", m.id)))?;
            lib.entry(m.gloss).or_default().push((m.id, x));
        }
        for v in lib.values_mut() {
            v.sort_by(|a, b| a.0.cmp(&b.0));
        }
        Ok(lib)
    }

    pub fn sentences(&self) -> Result<Vec<SentenceMeta>> {
        read_jsonl(&self.needs("ingest")?.join("sentences.jsonl"))
    }

    pub fn ground_truth(&self, sentence: &str) -> Result<MotionSequence> {
        load_motion(
            self.dir("ingest")
                .join("sentences")
                .join(format!("{sentence}.svmx")),
        )
    }

    /// Training sentences that have spans and a core for every gloss.
    fn training_set<'a>(
        &self,
        lib: &'a CoreLibrary,
        train: bool,
    ) -> Result<Vec<(SentenceMeta, MotionSequence, Cores<'a>)>> {
        let seed = self.cfg.derived_seed("variants");
        self.sentences()?
            .into_iter()
            .filter(|s| s.train == train && s.spans.is_some())
            .filter_map(|s| sentence_cores(lib, &s, seed).map(|c| (s, c)))
            .map(|(s, c)| Ok((self.ground_truth(&s.id)?, s, c)))
            .map(|r: Result<_>| r.map(|(gt, s, c)| (s, gt, c)))
            .collect()
    }

    fn train_duration(&self, dir: &Path) -> Result<()> {
        let lib = self.core_library()?;
        let set = self.training_set(&lib, true)?;
        let mut pair_samples = Vec::new();
        let mut sent_samples = Vec::new();
        for (s, gt, cores) in &set {
            let lens = gt_lengths(s.spans.as_deref().expect("filtered"), gt.len())?;
            for k in 0..cores.len().saturating_sub(1) {
                pair_samples.push(pair_sample(
                    cores[k].1,
                    cores[k + 1].1,
                    lens[k],
                    lens[k + 1],
                )?);
            }
            let ms: Vec<&MotionSequence> = cores.iter().map(|c| c.1).collect();
            let src: usize = ms.iter().map(|m| m.len()).sum();
            sent_samples.push(DurationSample {
                input: DurationInput::Tokens(sentence_token_features(&ms)?),
                s: ((gt.len() as f64 / src as f64).ln()).clamp(-SCALE_CLAMP, SCALE_CLAMP),
                w: lens.iter().map(|l| l / gt.len() as f64).collect(),
            });
        }
        let d = self.layout()?.dim();
        let mut gcfg = self.cfg.dgloss.clone();
        gcfg.seed = self.cfg.derived_seed("dgloss");
        let mut dgloss = DurationModel::new(gcfg, pair_feature_dim(d));
        let grep = dgloss.train(&pair_samples)?;
        dgloss.save(dir.join("dgloss.nkcp"))?;
        let mut scfg = self.cfg.dsent.clone();
        scfg.seed = self.cfg.derived_seed("dsent");
        let mut dsent = DurationModel::new(scfg, token_feature_dim(d));
        let srep = dsent.train(&sent_samples)?;
        dsent.save(dir.join("dsent.nkcp"))?;
        write_json(
            &dir.join("report.json"),
            &serde_json::json!({
                "pair_samples": pair_samples.len(),
                "sentence_samples": sent_samples.len(),
                "dgloss": grep,
                "dsent": srep,
            }),
        )
    }

    fn train_braid(&self, dir: &Path) -> Result<()> {
        let lib = self.core_library()?;
        let set = self.training_set(&lib, true)?;
        let mut pairs = Vec::new();
        for (s, gt, cores) in &set {
            let w: Vec<f64> = gt_lengths(s.spans.as_deref().expect("filtered"), gt.len())?;
            let lens = largest_remainder(&w, gt.len());
            let mut starts = vec![0];
            for l in &lens {
                starts.push(starts.last().expect("nonempty") + l);
            }
            for k in 0..cores.len().saturating_sub(1) {
                let (la, lb) = (lens[k], lens[k + 1]);
                if la == 0 || lb == 0 {
                    continue;
                }
                let a = linear_resample(cores[k].1, la)?;
                let b = linear_resample(cores[k + 1].1, lb)?;
                pairs.push(BraidPair {
                    cond: MotionSequence::concat(&[&a, &b])?,
                    target: gt.slice(starts[k], starts[k + 2])?,
                    boundary: la,
                });
            }
        }
        let mut model = BraidModel::new(
            self.cfg.denoiser.clone(),
            self.layout()?,
            self.cfg.derived_seed("braid"),
        )?;
        let mut tcfg = self.cfg.braid.clone();
        tcfg.seed = self.cfg.derived_seed("braid");
        let losses = model.train(&pairs, &tcfg, &DiffusionSchedule::standard(), |_, _| {})?;
        model.with_ema_weights().save(dir.join("braid.nkcp"))?;
        write_json(
            &dir.join("report.json"),
            &serde_json::json!({ "pairs": pairs.len(), "losses": losses }),
        )
    }

    fn load_duration(&self, name: &str) -> Result<Option<DurationModel>> {
        let p = self.dir("train-duration").join(format!("{name}.nkcp"));
        if self.is_current(&self.manifest(), "train-duration") && p.exists() {
            Ok(Some(DurationModel::load(p)?))
        } else {
            Ok(None)
        }
    }

    /// Held-out sentences with a core for every gloss, paired with cores.
    fn test_set<'a>(&self, lib: &'a CoreLibrary) -> Result<Vec<(SentenceMeta, Cores<'a>)>> {
        let seed = self.cfg.derived_seed("variants");
        Ok(self
            .sentences()?
            .into_iter()
            .filter(|s| !s.train)
            .filter_map(|s| sentence_cores(lib, &s, seed).map(|c| (s, c)))
            .collect())
    }

    fn compose(&self, dir: &Path) -> Result<()> {
        let lib = self.core_library()?;
        let test = self.test_set(&lib)?;
        let dgloss = self.load_duration("dgloss")?;
        let braid_path = self.dir("train-braid").join("braid.nkcp");
        let braid = if self.is_current(&self.manifest(), "train-braid") && braid_path.exists() {
            Some(BraidModel::load(&braid_path)?)
        } else {
            None
        };
        let sched = DiffusionSchedule::standard();
        let inf = &self.cfg.inference;
        let sampling = self.cfg.derived_seed("sampling");
        fs::create_dir_all(dir.join("pairs"))?;
        let jobs: Vec<(&SentenceMeta, usize, &Cores)> = test
            .iter()
            .flat_map(|(s, c)| (0..c.len().saturating_sub(1)).map(move |k| (s, k, c)))
            .collect();
        let rows: Vec<PairRow> = jobs
            .par_iter()
            .map(|&(s, k, cores)| {
                let (a, b) = (cores[k].1, cores[k + 1].1);
                let lengths = match &dgloss {
                    Some(m) => {
                        let pred = m.predict(&DurationInput::Pair(gloss_pair_features(a, b)?))?;
                        let p = integer_plan(a.len() + b.len(), &pred, MIN_LEN)?;
                        [p.lengths[0], p.lengths[1]]
                    }
                    None => [a.len(), b.len()],
                };
                let ra = linear_resample(a, lengths[0])?;
                let rb = linear_resample(b, lengths[1])?;
                let (motion, boundary, method) = match &braid {
                    Some(model) => {
                        let cond = MotionSequence::concat(&[&ra, &rb])?;
                        let mask = make_boundary_mask(lengths[0], lengths[1], inf.radius)?;
                        let seed = hash_u64(&format!("{sampling}:{}:{k}", s.id));
                        (
                            model.refine_pair(&cond, &mask, &sched, inf.ddim_steps, seed)?,
                            lengths[0],
                            PairMethod::Braid,
                        )
                    }
                    None => {
                        let (m, bd) = linear_bridge(&ra, &rb, inf.transition_frames)?;
                        (m, bd, PairMethod::Linear)
                    }
                };
                save_motion(
                    dir.join("pairs").join(format!("{}.{k}.svmx", s.id)),
                    &motion,
                )?;
                Ok(PairRow {
                    sentence: s.id.clone(),
                    k,
                    clips: [cores[k].0.to_string(), cores[k + 1].0.to_string()],
                    lengths,
                    boundary,
                    method,
                })
            })
            .collect::<Result<_>>()?;
        write_jsonl(&dir.join("pairs.jsonl"), &rows)
    }

    fn stitch(&self, dir: &Path) -> Result<()> {
        let lib = self.core_library()?;
        let test = self.test_set(&lib)?;
        let pair_dir = self.needs("compose")?;
        let rows: Vec<PairRow> = read_jsonl(&pair_dir.join("pairs.jsonl"))?;
        let mut by_sentence: BTreeMap<&str, Vec<&PairRow>> = BTreeMap::new();
        for r in &rows {
            by_sentence.entry(r.sentence.as_str()).or_default().push(r);
        }
        let dsent = self.load_duration("dsent")?;
        fs::create_dir_all(dir.join("sentences"))?;
        let plans: Vec<PlanRow> = test
            .par_iter()
            .map(|(s, cores)| {
                let ms: Vec<&MotionSequence> = cores.iter().map(|c| c.1).collect();
                let src: usize = ms.iter().map(|m| m.len()).sum();
                let plan = match &dsent {
                    Some(m) => integer_plan(
                        src,
                        &m.predict(&DurationInput::Tokens(sentence_token_features(&ms)?))?,
                        MIN_LEN,
                    )?,
                    None => GlossPlan {
                        lengths: ms.iter().map(|m| m.len()).collect(),
                        total: src,
                    },
                };
                let out = if ms.len() == 1 {
                    rescale_single(ms[0], &plan)?
                } else {
                    let mut prs = by_sentence.get(s.id.as_str()).cloned().unwrap_or_default();
                    prs.sort_by_key(|r| r.k);
                    if prs.len() != ms.len() - 1 {
                        return invalid(format!(
                            "{}: {} composed pairs for {} glosses",
                            s.id,
                            prs.len(),
                            ms.len()
                        ));
                    }
                    let pairs = prs
                        .iter()
                        .map(|r| {
                            Ok(RefinedPair {
                                motion: load_motion(
                                    pair_dir
                                        .join("pairs")
                                        .join(format!("{}.{}.svmx", r.sentence, r.k)),
                                )?,
                                boundary: r.boundary,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    assemble_sentence(&pairs, &plan)?
                };
                save_motion(dir.join("sentences").join(format!("{}.svmx", s.id)), &out)?;
                Ok(PlanRow {
                    sentence: s.id.clone(),
                    plan,
                    predicted: dsent.is_some(),
                })
            })
            .collect::<Result<_>>()?;
        write_jsonl(&dir.join("plans.jsonl"), &plans)
    }

    fn eval(&self, dir: &Path) -> Result<()> {
        let lib = self.core_library()?;
        let test = self.test_set(&lib)?;
        let stitched = self.needs("stitch")?;
        let pair_rows: Vec<PairRow> = read_jsonl(&self.needs("compose")?.join("pairs.jsonl"))?;
        let layout = self.layout()?;
        let skel = SyntheticSkeleton::new(&layout, self.cfg.skeleton_seed);
        let (joints, verts) = (skel.joint_subset(), skel.vertex_subset());
        let n_tr = self.cfg.inference.transition_frames;

        struct Row {
            gt: MotionSequence,
            outs: [MotionSequence; 2],
        }
        let rows: Vec<Row> = test
            .par_iter()
            .map(|(s, cores)| {
                let ms: Vec<&MotionSequence> = cores.iter().map(|c| c.1).collect();
                Ok(Row {
                    gt: self.ground_truth(&s.id)?,
                    outs: [
                        load_motion(stitched.join("sentences").join(format!("{}.svmx", s.id)))?,
                        linear_transition(&ms, n_tr)?.0,
                    ],
                })
            })
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Err(CoreError::Empty("evaluable held-out sentences"));
        }

        let per: Vec<[[f64; 3]; 2]> = rows
            .par_iter()
            .map(|r| {
                let g = skel.points(&r.gt)?;
                let mut out = [[0.0; 3]; 2];
                for (o, x) in out.iter_mut().zip(&r.outs) {
                    let p = skel.points(x)?;
                    *o = [
                        dtw_mpjpe(&p, &g, &joints)?,
                        dtw_pa_mpjpe(&p, &g, &joints)?,
                        dtw_mpjpe(&p, &g, &verts)?,
                    ];
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let gt_frames: Vec<Vec<f64>> = rows
            .iter()
            .flat_map(|r| (0..r.gt.len()).map(|i| r.gt.frame(i).to_vec()))
            .collect();
        let gt_lens: Vec<usize> = rows.iter().map(|r| r.gt.len()).collect();
        let braid_used = pair_rows.iter().any(|r| r.method == PairMethod::Braid);
        let names = [
            if braid_used {
                "braid"
            } else {
                "composed-linear"
            },
            "linear-baseline",
        ];
        let mut methods = Vec::new();
        for (mi, name) in names.iter().enumerate() {
            let n = rows.len() as f64;
            let mean = |j: usize| per.iter().map(|p| p[mi][j]).sum::<f64>() / n;
            let lens: Vec<usize> = rows.iter().map(|r| r.outs[mi].len()).collect();
            let frames: Vec<Vec<f64>> = rows
                .iter()
                .flat_map(|r| (0..r.outs[mi].len()).map(|i| r.outs[mi].frame(i).to_vec()))
                .collect();
            methods.push(MethodMetrics {
                method: name.to_string(),
                sentences: rows.len(),
                dtw_mpjpe: mean(0),
                dtw_pa_mpjpe: mean(1),
                dtw_mpvpe: mean(2),
                length_ratio: length_ratio(&lens, &gt_lens)?,
                length_deviation: lens
                    .iter()
                    .zip(&gt_lens)
                    .map(|(&p, &g)| (p as f64 / g as f64 - 1.0).abs())
                    .sum::<f64>()
                    / n,
                fgd: fgd(&frames, &gt_frames)?,
            });
        }
        let report = EvalReport {
            methods,
            duration: self.duration_eval(&lib)?,
            compose_fallback: !braid_used,
            skipped_sentences: self.sentences()?.iter().filter(|s| !s.train).count() - test.len(),
        };
        write_jsonl(&dir.join("metrics.jsonl"), &report.methods)?;
        write_json(&dir.join("report.json"), &report)
    }

    fn duration_eval(&self, lib: &CoreLibrary) -> Result<Option<DurationEval>> {
        let Some(model) = self.load_duration("dgloss")? else {
            return Ok(None);
        };
        let set = self.training_set(lib, false)?;
        let mut errs = (0.0, 0.0, 0usize);
        for (s, gt, cores) in &set {
            let lens = gt_lengths(s.spans.as_deref().expect("filtered"), gt.len())?;
            for k in 0..cores.len().saturating_sub(1) {
                let smp = pair_sample(cores[k].1, cores[k + 1].1, lens[k], lens[k + 1])?;
                let pred = model.predict(&smp.input)?;
                errs.0 += (pred.s - smp.s).abs();
                errs.1 += smp.s.abs();
                errs.2 += 1;
            }
        }
        if errs.2 == 0 {
            return Ok(None);
        }
        let n = errs.2 as f64;
        let (mae_model, mae_zero) = (errs.0 / n, errs.1 / n);
        Ok(Some(DurationEval {
            pairs: errs.2,
            mae_model,
            mae_zero,
            reduction: if mae_zero > 0.0 {
                1.0 - mae_model / mae_zero
            } else {
                0.0
            },
        }))
    }

    pub fn report(&self) -> Result<EvalReport> {
        read_json(&self.needs("eval")?.join("report.json"))
    }
}

/// Runs all stages with resume and returns the evaluation report.
pub fn run_pipeline(cfg: PipelineConfig) -> Result<EvalReport> {
    let p = Pipeline::new(cfg)?;
    p.run_all(true)?;
    p.report()
}
