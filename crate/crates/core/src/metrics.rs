//! Alignment, distributional, text and ranking metrics.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::motion::{MotionSequence, PartGroup, PartLayout};

/// `T × J` points in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSequence {
    t: usize,
    j: usize,
    pts: Vec<[f64; 3]>,
}

impl PointSequence {
    pub fn new(t: usize, j: usize, pts: Vec<[f64; 3]>) -> Result<Self> {
        if t == 0 || j == 0 {
            return Err(CoreError::Empty("point sequence"));
        }
        if pts.len() != t * j {
            return Err(CoreError::Dimension(format!(
                "{} points for {t}x{j}",
                pts.len()
            )));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("point sequence"));
        }
        Ok(Self { t, j, pts })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn joints(&self) -> usize {
        self.j
    }

    pub fn frame(&self, i: usize) -> &[[f64; 3]] {
        &self.pts[i * self.j..(i + 1) * self.j]
    }

    pub fn map_points(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            pts: self.pts.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_subset(subset: &[usize], j: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(CoreError::Empty("point subset"));
    }
    if let Some(&bad) = subset.iter().find(|&&s| s >= j) {
        return invalid(format!("point index {bad} ≥ J = {j}"));
    }
    Ok(())
}

/// Mean per-point Euclidean distance between two frames over `subset`.
pub fn frame_error(a: &[[f64; 3]], b: &[[f64; 3]], subset: &[usize]) -> f64 {
    subset.iter().map(|&s| dist(a[s], b[s])).sum::<f64>() / subset.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// DTW under steps (1,0), (0,1), (1,1) with mean point distance as the frame
/// cost; ties prefer the diagonal, then (1,0).
pub fn dtw_align(a: &PointSequence, b: &PointSequence, subset: &[usize]) -> Result<Alignment> {
    if a.joints() != b.joints() {
        return Err(CoreError::Dimension(format!(
            "J {} vs {}",
            a.joints(),
            b.joints()
        )));
    }
    check_subset(subset, a.joints())?;
    let (n, m) = (a.len(), b.len());
    let cost = |i: usize, j: usize| frame_error(a.frame(i), b.frame(j), subset);
    let mut acc = vec![f64::INFINITY; n * m];
    let mut back = vec![0u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            if i == 0 && j == 0 {
                acc[0] = c;
                continue;
            }
            let mut best = (f64::INFINITY, 0u8);
            for (k, (di, dj)) in [(1, 1), (1, 0), (0, 1)].into_iter().enumerate() {
                if i >= di && j >= dj {
                    let v = acc[(i - di) * m + (j - dj)];
                    if v < best.0 {
                        best = (v, k as u8);
                    }
                }
            }
            acc[i * m + j] = best.0 + c;
            back[i * m + j] = best.1;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        match back[i * m + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(Alignment {
        path,
        cost: acc[n * m - 1],
    })
}

/// Mean over the DTW path of the per-pair point error.
pub fn dtw_mpjpe(a: &PointSequence, b: &PointSequence, subset: &[usize]) -> Result<f64> {
    let al = dtw_align(a, b, subset)?;
    Ok(al
        .path
        .iter()
        .map(|&(i, j)| frame_error(a.frame(i), b.frame(j), subset))
        .sum::<f64>()
        / al.path.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// Rank-deficient input; only the translation was fitted.
    pub translation_only: bool,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * (self.rotation * Vector3::from(p)) + self.translation;
        [v[0], v[1], v[2]]
    }
}

/// Least-squares similarity transform taking `p` onto `q` (Umeyama).
pub fn procrustes(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<Similarity> {
    if p.len() != q.len() {
        return Err(CoreError::Dimension(format!(
            "{} vs {} points",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(CoreError::Empty("procrustes points"));
    }
    let n = p.len() as f64;
    let mean = |xs: &[[f64; 3]]| {
        xs.iter()
            .fold(Vector3::zeros(), |acc, x| acc + Vector3::from(*x))
            / n
    };
    let (mp, mq) = (mean(p), mean(q));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (pa, qb) = (Vector3::from(*a) - mp, Vector3::from(*b) - mq);
        cov += qb * pa.transpose();
        var_p += pa.norm_squared();
    }
    cov /= n;
    var_p /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let degenerate =
        var_p <= 1e-18 || sv[order[0]] <= 1e-15 || sv[order[1]] <= 1e-12 * sv[order[0]];
    if degenerate {
        return Ok(Similarity {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: mq - mp,
            translation_only: true,
        });
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(order[2], order[2])] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = (0..3).map(|i| sv[i] * s[(i, i)]).sum::<f64>() / var_p;
    let translation = mq - scale * (rotation * mp);
    Ok(Similarity {
        rotation,
        scale,
        translation,
        translation_only: false,
    })
}

/// Per-frame error after aligning `pred` to `gt` over the subset.
pub fn pa_frame_error(pred: &[[f64; 3]], gt: &[[f64; 3]], subset: &[usize]) -> Result<f64> {
    let p: Vec<[f64; 3]> = subset.iter().map(|&s| pred[s]).collect();
    let q: Vec<[f64; 3]> = subset.iter().map(|&s| gt[s]).collect();
    let tr = procrustes(&p, &q)?;
    Ok(p.iter()
        .zip(&q)
        .map(|(&a, &b)| dist(tr.apply(a), b))
        .sum::<f64>()
        / p.len() as f64)
}

/// DTW alignment followed by per-pair Procrustes.
pub fn dtw_pa_mpjpe(pred: &PointSequence, gt: &PointSequence, subset: &[usize]) -> Result<f64> {
    let al = dtw_align(pred, gt, subset)?;
    let mut total = 0.0;
    for &(i, j) in &al.path {
        total += pa_frame_error(pred.frame(i), gt.frame(j), subset)?;
    }
    Ok(total / al.path.len() as f64)
}

/// Mean of per-sample `pred/gt` length ratios.
pub fn length_ratio(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(CoreError::Dimension("length lists differ".into()));
    }
    if pred.is_empty() {
        return Err(CoreError::Empty("length lists"));
    }
    if gt.contains(&0) {
        return invalid("zero ground-truth length");
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| p as f64 / g as f64)
        .sum::<f64>()
        / pred.len() as f64)
}

pub const FGD_EPS: f64 = 1e-6;

fn mean_cov(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let f = rows
        .first()
        .map(Vec::len)
        .ok_or(CoreError::Empty("feature set"))?;
    if rows.iter().any(|r| r.len() != f) {
        return Err(CoreError::Dimension("ragged feature rows".into()));
    }
    let n = rows.len() as f64;
    let mut mu = DVector::zeros(f);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(f, f);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    for i in 0..f {
        cov[(i, i)] += FGD_EPS;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-300);
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(CoreError::InvalidArgument(
            "matrix is not positive semidefinite".into(),
        ));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fgd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    if ma.len() != mb.len() {
        return Err(CoreError::Dimension(format!(
            "F {} vs {}",
            ma.len(),
            mb.len()
        )));
    }
    let ra = sym_sqrt(&ca)?;
    let inner = sym_sqrt(&(&ra * &cb * &ra))?;
    let tr = ca.trace() + cb.trace() - 2.0 * inner.trace();
    Ok(((ma - mb).norm_squared() + tr).max(0.0))
}

fn ngram_counts<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with brevity penalty; orders 2–4 use add-one smoothing.
pub fn bleu4<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched: usize = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let total: usize = h.values().sum();
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln() / 4.0;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_p.exp()
}

fn char_grams(s: &str, n: usize) -> HashMap<String, usize> {
    let chars: Vec<char> = s.chars().collect();
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w.iter().collect()).or_insert(0) += 1;
        }
    }
    m
}

/// chrF over character n-grams of orders 1–6 with whitespace removed;
/// precision and recall are averaged over the orders present.
pub fn chrf<T: AsRef<str>>(hyp: &[T], reference: &[T], beta: f64) -> f64 {
    let join = |t: &[T]| {
        t.iter()
            .map(AsRef::as_ref)
            .collect::<String>()
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
    };
    let (h, r) = (join(hyp), join(reference));
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (mut ps, mut rs, mut k) = (0.0, 0.0, 0.0);
    for n in 1..=6 {
        let hg = char_grams(&h, n);
        let rg = char_grams(&r, n);
        let (ht, rt): (usize, usize) = (hg.values().sum(), rg.values().sum());
        if ht == 0 || rt == 0 {
            continue;
        }
        let m: usize = hg
            .iter()
            .map(|(g, &c)| c.min(rg.get(g).copied().unwrap_or(0)))
            .sum();
        ps += m as f64 / ht as f64;
        rs += m as f64 / rt as f64;
        k += 1.0;
    }
    if k == 0.0 {
        return 0.0;
    }
    let (p, rc) = (ps / k, rs / k);
    if p + rc == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * p * rc / (b2 * p + rc)
}

/// Multiset token overlap F1.
pub fn token_f1<A: AsRef<str>, B: AsRef<str>>(hyp: &[A], reference: &[B]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return if hyp.is_empty() && reference.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in hyp {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / hyp.len() as f64;
    let r = common as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu4: f64,
    pub chrf: f64,
    pub f1: f64,
}

pub fn text_metrics<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Result<TextScores> {
    if reference.is_empty() {
        return Err(CoreError::Empty("reference tokens"));
    }
    Ok(TextScores {
        bleu4: bleu4(hyp, reference),
        chrf: chrf(hyp, reference, 2.0),
        f1: token_f1(hyp, reference),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub n: usize,
    pub mrr: f64,
    /// `(k, R@k)`.
    pub recall: Vec<(usize, f64)>,
}

impl RankingMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// 1-based rank of `reference` in `ranked`, if present.
pub fn rank_of<T: PartialEq>(ranked: &[T], reference: &T) -> Option<usize> {
    ranked.iter().position(|r| r == reference).map(|p| p + 1)
}

/// MRR and recall from per-query 1-based ranks; `None` counts as a miss.
pub fn ranking_metrics(ranks: &[Option<usize>], ks: &[usize]) -> RankingMetrics {
    let n = ranks.len();
    if n == 0 {
        return RankingMetrics {
            n,
            mrr: 0.0,
            recall: ks.iter().map(|&k| (k, 0.0)).collect(),
        };
    }
    let mrr = ranks
        .iter()
        .map(|r| r.map_or(0.0, |r| 1.0 / r as f64))
        .sum::<f64>()
        / n as f64;
    let recall = ks
        .iter()
        .map(|&k| {
            (
                k,
                ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / n as f64,
            )
        })
        .collect();
    RankingMetrics { n, mrr, recall }
}

/// Maps motion features to points, standing in for body-model kinematics.
pub trait PointAdapter: Send + Sync {
    fn points(&self, x: &MotionSequence) -> Result<PointSequence>;
    fn joint_subset(&self) -> Vec<usize>;
    fn vertex_subset(&self) -> Vec<usize>;
}

/// Fixed random linear skeleton: body and hand joints depend only on their
/// own part channels, face vertices on the face channels.
#[derive(Clone, Debug)]
pub struct SyntheticSkeleton {
    d: usize,
    rest: Vec<[f64; 3]>,
    /// Per point: channel indices and their 3-vector loadings.
    loadings: Vec<Vec<(usize, [f64; 3])>>,
    n_joints: usize,
}

pub const SKELETON_BODY_JOINTS: usize = 22;
pub const SKELETON_HAND_JOINTS: usize = 30;
pub const SKELETON_FACE_VERTICES: usize = 10;

impl SyntheticSkeleton {
    pub fn new(layout: &PartLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let groups = [
            (PartGroup::Body, SKELETON_BODY_JOINTS),
            (PartGroup::Hands, SKELETON_HAND_JOINTS),
            (PartGroup::Face, SKELETON_FACE_VERTICES),
        ];
        let mut rest = Vec::new();
        let mut loadings = Vec::new();
        for (g, count) in groups {
            let chans: Vec<usize> = layout.group_ranges(g).into_iter().flatten().collect();
            let gain = if chans.is_empty() {
                0.0
            } else {
                0.1 / (chans.len() as f64).sqrt()
            };
            for _ in 0..count {
                rest.push([0.0, 1.0, 0.0].map(|c: f64| c + 0.3 * unit.sample(&mut rng)));
                let l = chans
                    .iter()
                    .map(|&c| (c, [0; 3].map(|_| gain * unit.sample(&mut rng))))
                    .collect();
                loadings.push(l);
            }
        }
        Self {
            d: layout.dim(),
            rest,
            loadings,
            n_joints: SKELETON_BODY_JOINTS + SKELETON_HAND_JOINTS,
        }
    }

    pub fn num_points(&self) -> usize {
        self.rest.len()
    }
}

impl PointAdapter for SyntheticSkeleton {
    fn points(&self, x: &MotionSequence) -> Result<PointSequence> {
        if x.dim() != self.d {
            return Err(CoreError::Dimension(format!(
                "skeleton expects D={}, got {}",
                self.d,
                x.dim()
            )));
        }
        let mut pts = Vec::with_capacity(x.len() * self.rest.len());
        for i in 0..x.len() {
            let f = x.frame(i);
            for (r, l) in self.rest.iter().zip(&self.loadings) {
                let mut p = *r;
                for &(c, w) in l {
                    for k in 0..3 {
                        p[k] += w[k] * f[c];
                    }
                }
                pts.push(p);
            }
        }
        PointSequence::new(x.len(), self.rest.len(), pts)
    }

    fn joint_subset(&self) -> Vec<usize> {
        (0..self.n_joints).collect()
    }

    fn vertex_subset(&self) -> Vec<usize> {
        (0..self.rest.len()).collect()
    }
}
