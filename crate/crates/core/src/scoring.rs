//! Cosine trial scoring and detection metrics.
//!
//! The EER is read off the ROC traced by sweeping the acceptance threshold
//! (`score >= t` accepts) over every distinct observed score, plus a final
//! point above all scores. Equal scores are one threshold. Between the two
//! adjacent ROC points where `FAR - FRR` changes sign, FAR and FRR are
//! interpolated linearly and the EER is taken where they meet.

use crate::embedding::{check_same_dim, dot, norm, Embedding, VectorError};
use crate::fusion::{fuse_weighted, FusionError};
use crate::store::{EmbeddingStore, StoreError};
use crate::trial::{Label, Trial};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const DCF_P_TARGET: f64 = 0.01;
pub const DCF_C_MISS: f64 = 1.0;
pub const DCF_C_FA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("need at least one target and one nontarget score (got {targets} / {nontargets})")]
    SingleClass { targets: usize, nontargets: usize },
    #[error("non-finite score for trial {0}")]
    NonFinite(String),
    #[error("baseline EER must be positive")]
    ZeroBaseline,
    #[error("score file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Equal error rate in percent.
    pub eer: f64,
    pub eer_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_dcf: Option<f64>,
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64, ScoreError> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, ScoreError> {
    check_same_dim(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(VectorError::ZeroVector.into());
    }
    if !(na.is_finite() && nb.is_finite()) {
        return Err(VectorError::NonFinite(0).into());
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One point of the ROC: acceptance threshold and the error rates it yields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>), ScoreError> {
    let mut tar = Vec::new();
    let mut non = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(ScoreError::NonFinite(r.trial.to_string()));
        }
        match r.trial.label {
            Label::Target => tar.push(r.score),
            Label::Nontarget => non.push(r.score),
        }
    }
    Ok((tar, non))
}

/// ROC points in order of increasing threshold; the last point has an
/// infinite threshold (nothing accepted).
pub fn roc_points(targets: &[f64], nontargets: &[f64]) -> Vec<RocPoint> {
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut targets_below = 0usize;
    let mut nontargets_at_or_above = nontargets.len();
    let mut points = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push(RocPoint {
            threshold: t,
            far: nontargets_at_or_above as f64 / nn,
            frr: targets_below as f64 / nt,
        });
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                targets_below += 1;
            } else {
                nontargets_at_or_above -= 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    points
}

/// EER (as a fraction) and threshold from a ROC ordered by threshold.
pub fn eer_from_roc(points: &[RocPoint]) -> (f64, f64) {
    let d = |p: &RocPoint| p.far - p.frr;
    let j = points
        .iter()
        .position(|p| d(p) <= 0.0)
        .expect("ROC always ends at FAR=0, FRR=1");
    let pj = points[j];
    if d(&pj) == 0.0 || j == 0 {
        return (pj.far, pj.threshold);
    }
    let pi = points[j - 1];
    let (di, dj) = (d(&pi), d(&pj));
    let alpha = di / (di - dj);
    let eer = pi.far + alpha * (pj.far - pi.far);
    let threshold = if pj.threshold.is_finite() {
        pi.threshold + alpha * (pj.threshold - pi.threshold)
    } else {
        pi.threshold
    };
    (eer, threshold)
}

/// Normalized minimum detection cost over all ROC points.
pub fn min_dcf(points: &[RocPoint], p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    points
        .iter()
        .map(|p| (c_miss * p.frr * p_target + c_fa * p.far * (1.0 - p_target)) / norm)
        .fold(f64::INFINITY, f64::min)
}

pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<EvalReport, ScoreError> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(ScoreError::SingleClass {
            targets: targets.len(),
            nontargets: nontargets.len(),
        });
    }
    let roc = roc_points(targets, nontargets);
    let (eer, eer_threshold) = eer_from_roc(&roc);
    Ok(EvalReport {
        eer: 100.0 * eer,
        eer_threshold,
        n_target: targets.len(),
        n_nontarget: nontargets.len(),
        min_dcf: Some(min_dcf(&roc, DCF_P_TARGET, DCF_C_MISS, DCF_C_FA)),
    })
}

/// EER report for a scored trial list.
///
/// ```
/// use ttasv::scoring::{compute_eer, ScoreRecord};
/// use ttasv::trial::{Label, Trial};
/// let rec = |l, s| ScoreRecord { trial: Trial::new(l, "e", "t"), score: s };
/// let r = compute_eer(&[
///     rec(Label::Target, 0.9), rec(Label::Target, 0.3),
///     rec(Label::Nontarget, 0.7), rec(Label::Nontarget, 0.1),
/// ]).unwrap();
/// assert_eq!(r.eer, 50.0);
/// ```
pub fn compute_eer(records: &[ScoreRecord]) -> Result<EvalReport, ScoreError> {
    let (tar, non) = split_scores(records)?;
    eer_from_scores(&tar, &non)
}

/// `100 * (baseline - system) / baseline`, both in percent.
pub fn relative_reduction(baseline_eer: f64, system_eer: f64) -> Result<f64, ScoreError> {
    if baseline_eer <= 0.0 || !baseline_eer.is_finite() {
        return Err(ScoreError::ZeroBaseline);
    }
    Ok(100.0 * (baseline_eer - system_eer) / baseline_eer)
}

/// Scores trials, computing each utterance's embedding once through `embed`.
pub fn score_trials_with<F>(trials: &[Trial], mut embed: F) -> Result<Vec<ScoreRecord>, ScoreError>
where
    F: FnMut(&str) -> Result<Embedding, ScoreError>,
{
    let mut cache: HashMap<String, Embedding> = HashMap::new();
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        for id in [&t.enroll_id, &t.test_id] {
            if !cache.contains_key(id) {
                let e = embed(id)?;
                cache.insert(id.clone(), e);
            }
        }
        let score = cosine_score(&cache[&t.enroll_id], &cache[&t.test_id])?;
        out.push(ScoreRecord {
            trial: t.clone(),
            score,
        });
    }
    Ok(out)
}

/// Scores trials using the embeddings stored under `condition`.
pub fn score_condition(
    trials: &[Trial],
    store: &EmbeddingStore,
    condition: &str,
) -> Result<Vec<ScoreRecord>, ScoreError> {
    score_trials_with(trials, |utt| Ok(store.get(utt, condition)?.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub w: f64,
    pub eer: f64,
}

/// EER of weighted-mean fusion of `orig_condition` and `tts_condition` at each
/// weight, fusing both trial sides identically.
pub fn weight_sweep(
    trials: &[Trial],
    store: &EmbeddingStore,
    orig_condition: &str,
    tts_condition: &str,
    weights: &[f64],
    normalize: bool,
) -> Result<Vec<SweepRow>, ScoreError> {
    weights
        .iter()
        .map(|&w| {
            let recs = score_trials_with(trials, |utt| {
                let b = store.get(utt, orig_condition)?;
                let g = store.get(utt, tts_condition)?;
                Ok(fuse_weighted(b, g, w, normalize)?)
            })?;
            Ok(SweepRow {
                w,
                eer: compute_eer(&recs)?.eer,
            })
        })
        .collect()
}

pub fn format_sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("w,eer_percent\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.w, r.eer));
    }
    s
}

/// Score file lines: `<enroll_utt> <test_utt> <score>`.
pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!("{} {} {}\n", r.trial.enroll_id, r.trial.test_id, r.score));
    }
    s
}

/// Parses a score file and attaches labels from `trials` (matched by position
/// and checked by utterance ids). `#` lines are comments.
pub fn parse_scores(text: &str, trials: &[Trial]) -> Result<Vec<ScoreRecord>, ScoreError> {
    let mut out = Vec::new();
    let mut it = trials.iter();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |reason: String| ScoreError::Parse { line: i + 1, reason };
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", f.len())));
        }
        let score: f64 = f[2].parse().map_err(|e| err(format!("bad score: {e}")))?;
        let trial = it.next().ok_or_else(|| err("more scores than trials".into()))?;
        if trial.enroll_id != f[0] || trial.test_id != f[1] {
            return Err(err(format!("scores out of step with trial list ({trial})")));
        }
        out.push(ScoreRecord {
            trial: trial.clone(),
            score,
        });
    }
    if out.len() != trials.len() {
        return Err(ScoreError::Parse {
            line: text.lines().count(),
            reason: format!("{} scores for {} trials", out.len(), trials.len()),
        });
    }
    Ok(out)
}
