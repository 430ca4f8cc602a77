//! Synthetic speaker embeddings with duration-dependent noise and imperfect
//! TTS cloning.
//!
//! A speaker is a unit centroid on the sphere. A bona-fide observation of
//! duration `T` is `normalize(c + σ(T)·g + session_sigma·h)` with
//! `σ(T) = sigma0 / √T`, where `g` and `h` are standard Gaussian vectors scaled
//! by `1/√dim`. A TTS embedding cloned from a prompt of duration `T` is
//! `normalize(α(T)·c + beta·bias + prompt_coupling·session_sigma·h + tts_sigma·n)`
//! with `α(T) = alpha·(1 − e^(−T))`, where `h` is the prompt's own session
//! vector: the clone inherits the prompt's channel character but not the
//! encoder's short-input estimation noise `g`.
//!
//! Every draw is seeded from `(seed, stream, speaker, utterance, extra)`, so the
//! output does not depend on generation order.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{tts_condition, Embedding, CONDITION_ORIG};
use crate::fusion::{fuse_addition, fuse_concat, two_stage_fuse};
use crate::scoring::{compute_eer, score_condition, score_trials_with, weight_sweep, ScoreError};
use crate::store::EmbeddingStore;
use crate::trial::{Label, Trial};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

fn default_weights() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub dim: usize,
    pub sigma0: f64,
    /// Duration-independent session variability.
    pub session_sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tts_sigma: f64,
    pub prompt_coupling: f64,
    pub durations: Vec<f64>,
    pub seed: u64,
    pub backends: Vec<String>,
    pub weights: Vec<f64>,
    pub normalize: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_speakers: 50,
            utts_per_speaker: 20,
            dim: crate::DEFAULT_DIM,
            sigma0: 2.05,
            session_sigma: 1.5,
            alpha: 0.9,
            beta: 0.3,
            tts_sigma: 1.0,
            prompt_coupling: 1.0,
            durations: vec![0.5, 1.0, 2.0, 8.0],
            seed: 0,
            backends: vec!["cosyvoice".into(), "maskgct".into()],
            weights: default_weights(),
            normalize: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.num_speakers < 2 {
            return bad("num_speakers must be at least 2");
        }
        if self.utts_per_speaker < 2 {
            return bad("utts_per_speaker must be at least 2");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.sigma0 > 0.0) {
            return bad("sigma0 must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if ![self.beta, self.session_sigma, self.tts_sigma, self.prompt_coupling]
            .iter()
            .all(|x| *x >= 0.0)
        {
            return bad("beta, session_sigma, tts_sigma and prompt_coupling must be non-negative");
        }
        if self.durations.is_empty() || self.durations.iter().any(|d| !(*d > 0.0)) {
            return bad("durations must be positive");
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("weights must lie in [0, 1]");
        }
        let names: BTreeSet<&String> = self.backends.iter().collect();
        if names.len() != self.backends.len() || self.backends.iter().any(|b| b.trim().is_empty()) {
            return bad("backend names must be unique and nonempty");
        }
        Ok(())
    }

    /// `alpha·(1 − e^(−T))`.
    pub fn fidelity(&self, prompt_duration_s: f64) -> f64 {
        self.alpha * (1.0 - (-prompt_duration_s).exp())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn keyed_rng(seed: u64, stream: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ fnv(stream));
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn utt_id(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:03}/utt{utt:03}")
}

/// Unit centroids drawn uniformly on the sphere.
pub fn gen_speakers(cfg: &SimConfig) -> Vec<Vec<f64>> {
    (0..cfg.num_speakers)
        .map(|s| unit(gaussian(&mut keyed_rng(cfg.seed, "speaker", &[s as u64]), cfg.dim)))
        .collect()
}

/// Fixed random direction standing in for a backend's systematic bias.
pub fn backend_bias(cfg: &SimConfig, backend: &str) -> Vec<f64> {
    unit(gaussian(&mut keyed_rng(cfg.seed, "bias", &[fnv(backend)]), cfg.dim))
}

fn to_embedding(id: String, condition: String, v: Vec<f64>) -> Embedding {
    let v = unit(v);
    Embedding {
        utt_id: id,
        condition,
        values: v.into_iter().map(|x| x as f32).collect(),
    }
}

fn session(speaker: usize, utt: usize, cfg: &SimConfig) -> Vec<f64> {
    gaussian(
        &mut keyed_rng(cfg.seed, "session", &[speaker as u64, utt as u64]),
        cfg.dim,
    )
}

/// The additive noise of an observation: `σ(T)·g + session_sigma·h`, both
/// scaled by `1/√dim`.
fn observation_noise(speaker: usize, utt: usize, duration_s: f64, cfg: &SimConfig) -> Vec<f64> {
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let sigma = cfg.sigma0 / duration_s.sqrt();
    let session = session(speaker, utt, cfg);
    let noise = gaussian(
        &mut keyed_rng(cfg.seed, "obs", &[speaker as u64, utt as u64, duration_s.to_bits()]),
        cfg.dim,
    );
    session
        .iter()
        .zip(&noise)
        .map(|(h, g)| scale * (sigma * g + cfg.session_sigma * h))
        .collect()
}

pub fn gen_observation(
    centroid: &[f64],
    speaker: usize,
    utt: usize,
    duration_s: f64,
    cfg: &SimConfig,
) -> Embedding {
    let noise = observation_noise(speaker, utt, duration_s, cfg);
    let v = centroid.iter().zip(&noise).map(|(c, n)| c + n).collect();
    to_embedding(utt_id(speaker, utt), CONDITION_ORIG.to_string(), v)
}

#[allow(clippy::too_many_arguments)]
pub fn gen_tts_embedding(
    centroid: &[f64],
    prompt_duration_s: f64,
    bias: &[f64],
    backend: &str,
    speaker: usize,
    utt: usize,
    cfg: &SimConfig,
) -> Embedding {
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let a = cfg.fidelity(prompt_duration_s);
    let h = session(speaker, utt, cfg);
    let noise = gaussian(
        &mut keyed_rng(
            cfg.seed,
            "tts",
            &[fnv(backend), speaker as u64, utt as u64, prompt_duration_s.to_bits()],
        ),
        cfg.dim,
    );
    let coupled = cfg.prompt_coupling * cfg.session_sigma;
    let v = centroid
        .iter()
        .zip(bias.iter().zip(noise.iter().zip(&h)))
        .map(|(c, (b, (n, h)))| a * c + cfg.beta * b + scale * (coupled * h + cfg.tts_sigma * n))
        .collect();
    to_embedding(utt_id(speaker, utt), tts_condition(backend, None), v)
}

/// Every same-speaker pair as a target, plus as many distinct cross-speaker
/// pairs drawn at random as nontargets.
pub fn gen_trials(cfg: &SimConfig) -> Vec<Trial> {
    let mut trials = Vec::new();
    for s in 0..cfg.num_speakers {
        for i in 0..cfg.utts_per_speaker {
            for j in i + 1..cfg.utts_per_speaker {
                trials.push(Trial::new(Label::Target, utt_id(s, i), utt_id(s, j)));
            }
        }
    }
    let n_target = trials.len();
    let n_utts = cfg.num_speakers * cfg.utts_per_speaker;
    let max_nontarget = n_utts * (n_utts - cfg.utts_per_speaker) / 2;
    let wanted = n_target.min(max_nontarget);
    let mut rng = keyed_rng(cfg.seed, "trials", &[]);
    let mut seen = HashSet::new();
    while seen.len() < wanted {
        let a = rng.random_range(0..n_utts);
        let b = rng.random_range(0..n_utts);
        let (sa, sb) = (a / cfg.utts_per_speaker, b / cfg.utts_per_speaker);
        if sa == sb || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        trials.push(Trial::new(
            Label::Nontarget,
            utt_id(lo / cfg.utts_per_speaker, lo % cfg.utts_per_speaker),
            utt_id(hi / cfg.utts_per_speaker, hi % cfg.utts_per_speaker),
        ));
    }
    trials
}

/// Bona-fide and TTS embeddings of every utterance at one duration.
pub fn gen_store(cfg: &SimConfig, centroids: &[Vec<f64>], duration_s: f64) -> EmbeddingStore {
    let biases: Vec<Vec<f64>> = cfg.backends.iter().map(|b| backend_bias(cfg, b)).collect();
    let mut store = EmbeddingStore::with_dim(cfg.dim);
    for (s, c) in centroids.iter().enumerate() {
        for u in 0..cfg.utts_per_speaker {
            store
                .put(gen_observation(c, s, u, duration_s, cfg))
                .expect("generated keys are unique");
            for (name, bias) in cfg.backends.iter().zip(&biases) {
                store
                    .put(gen_tts_embedding(c, duration_s, bias, name, s, u, cfg))
                    .expect("generated keys are unique");
            }
        }
    }
    store
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub duration_s: f64,
    pub method: String,
    pub w: Option<f64>,
    pub eer_percent: f64,
}

pub const METHOD_BASELINE: &str = "baseline";

/// Rows per duration: `baseline`; per backend `tts_only:<b>`,
/// `weighted_mean:<b>` at every grid weight, `addition:<b>` and
/// `concatenation:<b>`; with two or more backends, `two_stage` over the first
/// two at every grid weight (inner weight 0.5).
pub fn run_sim_experiment(cfg: &SimConfig) -> Result<Vec<SimRow>, SimError> {
    cfg.validate()?;
    let centroids = gen_speakers(cfg);
    let trials = gen_trials(cfg);
    let mut rows = Vec::new();
    for &d in &cfg.durations {
        let store = gen_store(cfg, &centroids, d);
        let mut push = |method: String, w: Option<f64>, eer: f64| {
            rows.push(SimRow {
                duration_s: d,
                method,
                w,
                eer_percent: eer,
            })
        };
        let base = compute_eer(&score_condition(&trials, &store, CONDITION_ORIG)?)?;
        push(METHOD_BASELINE.into(), Some(1.0), base.eer);
        for b in &cfg.backends {
            let cond = tts_condition(b, None);
            let tts = compute_eer(&score_condition(&trials, &store, &cond)?)?;
            push(format!("tts_only:{b}"), Some(0.0), tts.eer);
            let inner: Vec<f64> = cfg.weights.iter().copied().filter(|w| *w > 0.0 && *w < 1.0).collect();
            for row in weight_sweep(&trials, &store, CONDITION_ORIG, &cond, &inner, cfg.normalize)? {
                push(format!("weighted_mean:{b}"), Some(row.w), row.eer);
            }
            let add = score_trials_with(&trials, |u| {
                Ok(fuse_addition(store.get(u, CONDITION_ORIG)?, store.get(u, &cond)?, cfg.normalize)?)
            })?;
            push(format!("addition:{b}"), None, compute_eer(&add)?.eer);
            let cat = score_trials_with(&trials, |u| {
                Ok(fuse_concat(store.get(u, CONDITION_ORIG)?, store.get(u, &cond)?, cfg.normalize)?)
            })?;
            push(format!("concatenation:{b}"), None, compute_eer(&cat)?.eer);
        }
        if let [b1, b2, ..] = cfg.backends.as_slice() {
            let (c1, c2) = (tts_condition(b1, None), tts_condition(b2, None));
            for &w in cfg.weights.iter().filter(|w| **w > 0.0 && **w < 1.0) {
                let recs = score_trials_with(&trials, |u| {
                    Ok(two_stage_fuse(
                        store.get(u, &c1)?,
                        store.get(u, &c2)?,
                        store.get(u, CONDITION_ORIG)?,
                        0.5,
                        w,
                        cfg.normalize,
                    )?)
                })?;
                push("two_stage".into(), Some(w), compute_eer(&recs)?.eer);
            }
        }
    }
    Ok(rows)
}

pub fn format_sim_csv(rows: &[SimRow]) -> String {
    let mut s = String::from("duration_s,method,w,eer_percent\n");
    for r in rows {
        let w = r.w.map(|w| w.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.duration_s, r.method, w, r.eer_percent));
    }
    s
}

/// Lowest EER among rows of `method_prefix` at `duration_s`.
pub fn best_eer(rows: &[SimRow], duration_s: f64, method_prefix: &str) -> Option<f64> {
    rows.iter()
        .filter(|r| r.duration_s == duration_s && r.method.starts_with(method_prefix))
        .map(|r| r.eer_percent)
        .min_by(f64::total_cmp)
}

/// Maps phoneme coverage in `[0, 1]` to TTS fidelity, linearly up to `alpha_max`.
pub fn fidelity_from_coverage(coverage: f64, alpha_max: f64) -> f64 {
    alpha_max * coverage.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            num_speakers: 10,
            utts_per_speaker: 6,
            durations: vec![0.5, 8.0],
            ..SimConfig::default()
        }
    }

    #[test]
    fn centroids_are_unit_and_deterministic() {
        let cfg = small();
        let a = gen_speakers(&cfg);
        assert_eq!(a, gen_speakers(&cfg));
        for c in &a {
            let n: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn trials_are_balanced() {
        let cfg = small();
        let t = gen_trials(&cfg);
        let targets = t.iter().filter(|t| t.label.is_target()).count();
        assert_eq!(targets, 10 * 15);
        assert_eq!(t.len(), 2 * targets);
        assert_eq!(t, gen_trials(&cfg));
    }

    #[test]
    fn fidelity_increases_with_prompt() {
        let cfg = SimConfig::default();
        assert!(cfg.fidelity(0.5) < cfg.fidelity(2.0));
    }

    #[test]
    fn noiseless_observation_is_centroid() {
        let cfg = SimConfig {
            sigma0: 1e-12,
            session_sigma: 0.0,
            ..small()
        };
        let c = &gen_speakers(&cfg)[0];
        let e = gen_observation(c, 0, 0, 1.0, &cfg);
        let cos: f64 = e.values.iter().zip(c).map(|(a, b)| *a as f64 * b).sum();
        assert!((cos - 1.0).abs() < 1e-6);
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = small();
        let a = format_sim_csv(&run_sim_experiment(&cfg).unwrap());
        let b = format_sim_csv(&run_sim_experiment(&cfg).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("duration_s,method,w,eer_percent\n"));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SimConfig {
            alpha: 1.5,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
