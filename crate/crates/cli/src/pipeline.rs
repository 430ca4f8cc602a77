//! The `run` command: segment → synthesize → embed → fuse → score → report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ttasv::audio::{self, SampleFormat, SegmentDuration, SegmentSpec};
use ttasv::backends::{request_embedding, BackendEndpoint, TextStrategy, TtsCache};
use ttasv::embedding::{tts_condition, Embedding, CONDITION_ORIG, CONDITION_REPEAT15};
use ttasv::fsutil::sha256_file;
use ttasv::fusion::{
    fuse_addition, fuse_concat, fuse_multi_text, fuse_weighted, gate_forward, two_stage_fuse, GateNetwork,
};
use ttasv::scoring::{compute_eer, format_scores, score_trials_with, ScoreError, ScoreRecord};
use ttasv::store::EmbeddingStore;
use ttasv::trial::{parse_trials, trial_utterances, Trial};

use crate::config::ExperimentConfig;
use crate::error::{config, data, CliError, Result};
use crate::util::{config_header, write_if_changed};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURES_FILE: &str = "failures.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CACHE_ENV: &str = "TTA_CACHE_DIR";
pub const REPEAT_SECONDS: f64 = 15.0;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub durations: Option<Vec<SegmentDuration>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub utt: String,
    pub duration: String,
    pub backend: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub config_hash: String,
    pub system: String,
    pub method: String,
    pub backend: Option<String>,
    pub w: Option<f64>,
    pub duration: String,
    /// Mean EER (percent) over rounds.
    pub eer: f64,
    pub eer_per_round: Vec<f64>,
    pub min_dcf: Option<f64>,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub score_files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
pub struct EmbeddingEntry {
    pub duration: String,
    pub utt_id: String,
    pub condition: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub created_unix: u64,
    pub artifacts: Vec<Artifact>,
    pub embeddings: Vec<EmbeddingEntry>,
    pub short_inputs: Vec<EmbeddingEntry>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub reports: Vec<SystemReport>,
    pub failures: Vec<Failure>,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

pub fn store_file(out: &Path, label: &str) -> PathBuf {
    out.join("embeddings").join(format!("{label}.emb"))
}

/// Rejects an output directory holding results of a different config.
pub fn claim_output_dir(out: &Path, cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    std::fs::create_dir_all(out).map_err(data)?;
    let lock = out.join(CONFIG_FILE);
    if lock.exists() {
        let text = std::fs::read_to_string(&lock).map_err(data)?;
        let prev: serde_json::Value = serde_json::from_str(&text).map_err(data)?;
        let prev_hash = prev.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
        if prev_hash != hash {
            return Err(CliError::Config(format!(
                "{} holds results of config {prev_hash}, refusing to mix with config {hash}",
                out.display()
            )));
        }
    }
    let body = serde_json::to_string_pretty(&serde_json::json!({
        "config_hash": hash,
        "config": cfg,
    }))
    .expect("config serializes");
    write_if_changed(&lock, body.as_bytes()).map_err(data)
}

fn audio_path(root: &Path, utt: &str) -> PathBuf {
    root.join(utt)
}

fn segment_path(out: &Path, label: &str, utt: &str) -> PathBuf {
    let mut p = out.join("segments").join(label).join(utt);
    if p.extension().is_none_or(|e| e != "wav") {
        p.as_mut_os_string().push(".wav");
    }
    p
}

struct UttResult {
    embeddings: Vec<Embedding>,
    failures: Vec<Failure>,
    short_input: bool,
    hits: usize,
    misses: usize,
}

struct Ctx<'a> {
    out: &'a Path,
    root: &'a Path,
    label: String,
    spec: SegmentSpec,
    embed: &'a BackendEndpoint,
    tts: Vec<&'a BackendEndpoint>,
    text: &'a TextStrategy,
    cache: &'a TtsCache,
    previous: &'a EmbeddingStore,
    repeat_control: bool,
}

impl Ctx<'_> {
    fn fail(&self, utt: &str, backend: &str, stage: &str, e: impl std::fmt::Display) -> Failure {
        Failure {
            utt: utt.to_string(),
            duration: self.label.clone(),
            backend: backend.to_string(),
            stage: stage.to_string(),
            error: e.to_string(),
        }
    }

    fn embed(&self, utt: &str, condition: &str, path: &Path) -> std::result::Result<Embedding, Failure> {
        if let Ok(e) = self.previous.get(utt, condition) {
            return Ok(e.clone());
        }
        let v = request_embedding(self.embed, path).map_err(|e| self.fail(utt, &self.embed.name, "embed", e))?;
        Embedding::new(utt, condition, v).map_err(|e| self.fail(utt, &self.embed.name, "embed", e))
    }

    fn process(&self, utt: &str) -> UttResult {
        let mut r = UttResult {
            embeddings: Vec::new(),
            failures: Vec::new(),
            short_input: false,
            hits: 0,
            misses: 0,
        };
        let seg_path = segment_path(self.out, &self.label, utt);
        let seg = audio::load_wav(&audio_path(self.root, utt))
            .and_then(|a| audio::truncate_midpoint(&a, &self.spec));
        let seg = match seg {
            Ok(s) => s,
            Err(e) => {
                r.failures.push(self.fail(utt, "", "segment", e));
                return r;
            }
        };
        r.short_input = seg.short_input;
        let bytes = audio::encode_wav(&seg.audio, SampleFormat::Pcm16);
        if let Err(e) = write_if_changed(&seg_path, &bytes) {
            r.failures.push(self.fail(utt, "", "segment", e));
            return r;
        }
        match self.embed(utt, CONDITION_ORIG, &seg_path) {
            Ok(e) => r.embeddings.push(e),
            Err(f) => r.failures.push(f),
        }
        if self.repeat_control {
            let rep_path = segment_path(&self.out.join("segments").join("rep15"), &self.label, utt);
            let rep = audio::repeat_to_duration(&seg.audio, REPEAT_SECONDS)
                .map(|a| audio::encode_wav(&a, SampleFormat::Pcm16))
                .map_err(|e| self.fail(utt, "", "segment", e))
                .and_then(|b| write_if_changed(&rep_path, &b).map_err(|e| self.fail(utt, "", "segment", e)))
                .and_then(|_| self.embed(utt, CONDITION_REPEAT15, &rep_path));
            match rep {
                Ok(e) => r.embeddings.push(e),
                Err(f) => r.failures.push(f),
            }
        }
        for ep in &self.tts {
            for round in 0..self.text.rounds() {
                let cond = tts_condition(&ep.name, Some(round));
                if let Ok(e) = self.previous.get(utt, &cond) {
                    r.embeddings.push(e.clone());
                    continue;
                }
                let text = match self.text.resolve_text(utt, round) {
                    Ok(t) => t,
                    Err(e) => {
                        r.failures.push(self.fail(utt, &ep.name, "synthesize", e));
                        continue;
                    }
                };
                let generated = match self.cache.get_or_generate(ep, &seg_path, text, round) {
                    Ok((p, hit)) => {
                        if hit {
                            r.hits += 1
                        } else {
                            r.misses += 1
                        }
                        p
                    }
                    Err(e) => {
                        r.failures.push(self.fail(utt, &ep.name, "synthesize", e));
                        continue;
                    }
                };
                match self.embed(utt, &cond, &generated) {
                    Ok(e) => r.embeddings.push(e),
                    Err(f) => r.failures.push(f),
                }
            }
        }
        r
    }
}

fn load_previous(path: &Path) -> EmbeddingStore {
    match EmbeddingStore::load(path) {
        Ok(s) => s,
        Err(e) => {
            if path.exists() {
                eprintln!("warning: ignoring unreadable store {}: {e}", path.display());
            }
            EmbeddingStore::default()
        }
    }
}

/// One scorable system: how to produce each utterance's embedding for each round.
#[derive(Debug, Clone)]
pub struct System {
    pub name: String,
    pub method: String,
    pub backend: Option<String>,
    pub w: Option<f64>,
    kind: SystemKind,
}

#[derive(Debug, Clone)]
enum SystemKind {
    Condition(String),
    TtsOnly(String),
    Weighted(String, f64),
    Addition(String),
    Concat(String),
    Gate(String),
    TwoStage(String, String, f64),
    MultiText(String, f64),
}

fn weight_label(w: f64) -> String {
    format!("w{w}")
}

/// Systems evaluable from the conditions present in `store`.
pub fn systems(cfg: &ExperimentConfig, store: &EmbeddingStore) -> Vec<System> {
    let conds = store.conditions();
    let mut backends: Vec<String> = Vec::new();
    let mut rounds: BTreeMap<String, usize> = BTreeMap::new();
    for c in &conds {
        if let Some((b, r)) = c
            .strip_prefix(ttasv::embedding::CONDITION_TTS_PREFIX)
            .and_then(|rest| rest.rsplit_once("/r"))
        {
            if r.parse::<usize>().is_ok() {
                if !backends.contains(&b.to_string()) {
                    backends.push(b.to_string());
                }
                *rounds.entry(b.to_string()).or_default() += 1;
            }
        }
    }
    let has = |m: &str| cfg.fusion.methods.iter().any(|x| x == m);
    let mut out = vec![System {
        name: "baseline".into(),
        method: "baseline".into(),
        backend: None,
        w: Some(1.0),
        kind: SystemKind::Condition(CONDITION_ORIG.into()),
    }];
    if conds.iter().any(|c| c == CONDITION_REPEAT15) {
        out.push(System {
            name: "repeat15".into(),
            method: "repeat15".into(),
            backend: None,
            w: None,
            kind: SystemKind::Condition(CONDITION_REPEAT15.into()),
        });
    }
    let sys = |name: String, method: &str, b: Option<&str>, w: Option<f64>, kind| System {
        name,
        method: method.to_string(),
        backend: b.map(str::to_string),
        w,
        kind,
    };
    for b in &backends {
        out.push(sys(format!("tts_only-{b}"), "tts_only", Some(b), Some(0.0), SystemKind::TtsOnly(b.clone())));
        if has("weighted_mean") {
            for &w in &cfg.fusion.weights {
                out.push(sys(
                    format!("weighted_mean-{b}-{}", weight_label(w)),
                    "weighted_mean",
                    Some(b),
                    Some(w),
                    SystemKind::Weighted(b.clone(), w),
                ));
            }
        }
        if has("addition") {
            out.push(sys(format!("addition-{b}"), "addition", Some(b), None, SystemKind::Addition(b.clone())));
        }
        if has("concatenation") {
            out.push(sys(format!("concatenation-{b}"), "concatenation", Some(b), None, SystemKind::Concat(b.clone())));
        }
        if has("attention_gate") && cfg.fusion.gate.is_some() {
            out.push(sys(format!("attention_gate-{b}"), "attention_gate", Some(b), None, SystemKind::Gate(b.clone())));
        }
        if has("multi_text") && rounds.get(b).copied().unwrap_or(0) > 1 {
            for &w in &cfg.fusion.weights {
                out.push(sys(
                    format!("multi_text-{b}-{}", weight_label(w)),
                    "multi_text",
                    Some(b),
                    Some(w),
                    SystemKind::MultiText(b.clone(), w),
                ));
            }
        }
    }
    if has("two_stage") {
        if let [b1, b2, ..] = backends.as_slice() {
            for &w in &cfg.fusion.weights {
                out.push(sys(
                    format!("two_stage-{}", weight_label(w)),
                    "two_stage",
                    None,
                    Some(w),
                    SystemKind::TwoStage(b1.clone(), b2.clone(), w),
                ));
            }
        }
    }
    out
}

fn round_count(store: &EmbeddingStore, backend: &str) -> usize {
    (0..)
        .take_while(|r| store.conditions().contains(&tts_condition(backend, Some(*r))))
        .count()
}

/// Scores one system, one record list per round.
pub fn score_system(
    sys: &System,
    trials: &[Trial],
    store: &EmbeddingStore,
    normalize: bool,
    inner: f64,
    gate: Option<&GateNetwork>,
) -> std::result::Result<Vec<Vec<ScoreRecord>>, ScoreError> {
    let get = |u: &str, c: &str| -> std::result::Result<Embedding, ScoreError> { Ok(store.get(u, c)?.clone()) };
    let rounds = |b: &str| round_count(store, b).max(1);
    match &sys.kind {
        SystemKind::Condition(c) => Ok(vec![score_trials_with(trials, |u| get(u, c))?]),
        SystemKind::TtsOnly(b) => (0..rounds(b))
            .map(|r| score_trials_with(trials, |u| get(u, &tts_condition(b, Some(r)))))
            .collect(),
        SystemKind::Weighted(b, w) => (0..rounds(b))
            .map(|r| {
                score_trials_with(trials, |u| {
                    let c = tts_condition(b, Some(r));
                    Ok(fuse_weighted(store.get(u, CONDITION_ORIG)?, store.get(u, &c)?, *w, normalize)?)
                })
            })
            .collect(),
        SystemKind::Addition(b) => (0..rounds(b))
            .map(|r| {
                score_trials_with(trials, |u| {
                    let c = tts_condition(b, Some(r));
                    Ok(fuse_addition(store.get(u, CONDITION_ORIG)?, store.get(u, &c)?, normalize)?)
                })
            })
            .collect(),
        SystemKind::Concat(b) => (0..rounds(b))
            .map(|r| {
                score_trials_with(trials, |u| {
                    let c = tts_condition(b, Some(r));
                    Ok(fuse_concat(store.get(u, CONDITION_ORIG)?, store.get(u, &c)?, normalize)?)
                })
            })
            .collect(),
        SystemKind::Gate(b) => {
            let net = gate.ok_or(ScoreError::Fusion(ttasv::fusion::FusionError::MissingGate))?;
            (0..rounds(b))
                .map(|r| {
                    score_trials_with(trials, |u| {
                        let c = tts_condition(b, Some(r));
                        Ok(gate_forward(net, store.get(u, CONDITION_ORIG)?, store.get(u, &c)?, normalize)?.1)
                    })
                })
                .collect()
        }
        SystemKind::TwoStage(b1, b2, w) => (0..rounds(b1).min(rounds(b2)))
            .map(|r| {
                score_trials_with(trials, |u| {
                    Ok(two_stage_fuse(
                        store.get(u, &tts_condition(b1, Some(r)))?,
                        store.get(u, &tts_condition(b2, Some(r)))?,
                        store.get(u, CONDITION_ORIG)?,
                        inner,
                        *w,
                        normalize,
                    )?)
                })
            })
            .collect(),
        SystemKind::MultiText(b, w) => {
            let n = rounds(b);
            Ok(vec![score_trials_with(trials, |u| {
                let gens = (0..n)
                    .map(|r| get(u, &tts_condition(b, Some(r))))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(fuse_multi_text(store.get(u, CONDITION_ORIG)?, &gens, *w, normalize)?)
            })?])
        }
    }
}

/// Scores every system at one duration, writing score files and reports.
pub fn evaluate_duration(
    cfg: &ExperimentConfig,
    hash: &str,
    out: &Path,
    label: &str,
    trials: &[Trial],
    store: &EmbeddingStore,
    gate: Option<&GateNetwork>,
) -> Result<Vec<SystemReport>> {
    let systems = systems(cfg, store);
    systems
        .par_iter()
        .map(|sys| {
            let per_round = score_system(sys, trials, store, cfg.fusion.normalize, cfg.fusion.two_stage_inner, gate)
                .map_err(|e| CliError::Data(format!("{} at {label}: {e}", sys.name)))?;
            let mut eers = Vec::new();
            let mut dcfs = Vec::new();
            let mut files = Vec::new();
            let (mut n_t, mut n_n) = (0, 0);
            for (r, recs) in per_round.iter().enumerate() {
                let rep = compute_eer(recs).map_err(|e| CliError::Data(format!("{} at {label}: {e}", sys.name)))?;
                eers.push(rep.eer);
                dcfs.extend(rep.min_dcf);
                n_t = rep.n_target;
                n_n = rep.n_nontarget;
                let rel = format!("scores/{label}/{}.r{r}.txt", sys.name);
                let mut body = config_header(hash);
                body.push_str(&format!("# system {} duration {label} round {r}\n", sys.name));
                body.push_str(&format_scores(recs));
                write_if_changed(&out.join(&rel), body.as_bytes()).map_err(data)?;
                files.push(rel);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let report = SystemReport {
                config_hash: hash.to_string(),
                system: sys.name.clone(),
                method: sys.method.clone(),
                backend: sys.backend.clone(),
                w: sys.w,
                duration: label.to_string(),
                eer: mean(&eers),
                eer_per_round: eers,
                min_dcf: if dcfs.is_empty() { None } else { Some(mean(&dcfs)) },
                n_target: n_t,
                n_nontarget: n_n,
                score_files: files,
            };
            let body = serde_json::to_string_pretty(&report).expect("report serializes");
            write_if_changed(&out.join(format!("reports/{label}/{}.json", sys.name)), body.as_bytes())
                .map_err(data)?;
            Ok(report)
        })
        .collect()
}

pub fn format_summary(hash: &str, reports: &[SystemReport]) -> String {
    let mut s = config_header(hash);
    s.push_str("duration,system,method,backend,w,eer_percent,min_dcf\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.duration,
            r.system,
            r.method,
            r.backend.as_deref().unwrap_or(""),
            r.w.map(|w| w.to_string()).unwrap_or_default(),
            r.eer,
            r.min_dcf.map(|d| d.to_string()).unwrap_or_default()
        ));
    }
    s
}

fn collect_artifacts(out: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    crate::util::walk_files(out, &mut files).map_err(data)?;
    let mut arts: Vec<Artifact> = files
        .into_iter()
        .filter_map(|p| {
            let rel = p.strip_prefix(out).ok()?.to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE || rel.starts_with("cache/") || rel.contains("/.") || rel.starts_with('.') {
                return None;
            }
            Some((rel, p))
        })
        .map(|(rel, p)| {
            Ok(Artifact {
                sha256: sha256_file(&p).map_err(data)?,
                path: rel,
            })
        })
        .collect::<Result<_>>()?;
    arts.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(arts)
}

pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.run.seed = seed;
    }
    if let Some(ds) = &opts.durations {
        cfg.dataset.durations = ds
            .iter()
            .map(|d| crate::config::DurationValue::Label(d.label()))
            .collect();
    }
    cfg.validate_for_run()?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.run.output.clone())
        .ok_or_else(|| CliError::Config("no output directory (--out or run.output)".into()))?;
    let hash = cfg.hash();
    claim_output_dir(&out, &cfg, &hash)?;

    let trials_path = cfg.dataset.trials.clone().expect("validated");
    let trials = parse_trials(&std::fs::read_to_string(&trials_path).map_err(data)?).map_err(data)?;
    if trials.is_empty() {
        return Err(CliError::Data(format!("trial list {} is empty", trials_path.display())));
    }
    let utts = trial_utterances(&trials);
    let gate = match &cfg.fusion.gate {
        Some(p) if cfg.fusion.methods.iter().any(|m| m == "attention_gate") => {
            Some(GateNetwork::load(p).map_err(config)?)
        }
        _ => None,
    };
    let jobs = opts.jobs.or(cfg.run.jobs).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut entries = Vec::new();
    let mut short_inputs = Vec::new();
    let (mut hits, mut misses) = (0, 0);

    pool.install(|| -> Result<()> {
        for d in cfg.durations()? {
            let label = d.label();
            let store = if let Some(dir) = &cfg.dataset.stores_dir {
                let p = dir.join(format!("{label}.emb"));
                EmbeddingStore::load(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
            } else {
                let store_path = store_file(&out, &label);
                let previous = load_previous(&store_path);
                let text = cfg.text_strategy()?;
                let cache_root = std::env::var_os(CACHE_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| out.join("cache"));
                let cache = TtsCache::new(cache_root);
                let ctx = Ctx {
                    out: &out,
                    root: cfg.dataset.root.as_deref().expect("validated"),
                    label: label.clone(),
                    spec: SegmentSpec {
                        duration: d,
                        anchor: cfg.anchor()?,
                    },
                    embed: cfg.embed_backend()?,
                    tts: cfg.tts_backends(),
                    text: &text,
                    cache: &cache,
                    previous: &previous,
                    repeat_control: cfg.dataset.repeat_control,
                };
                let results: Vec<UttResult> = utts.par_iter().map(|u| ctx.process(u)).collect();
                let mut store = EmbeddingStore::default();
                let mut dur_failed = false;
                for (u, r) in utts.iter().zip(results) {
                    hits += r.hits;
                    misses += r.misses;
                    if r.short_input {
                        short_inputs.push(EmbeddingEntry {
                            duration: label.clone(),
                            utt_id: u.clone(),
                            condition: CONDITION_ORIG.into(),
                        });
                    }
                    dur_failed |= !r.failures.is_empty();
                    failures.extend(r.failures);
                    for e in r.embeddings {
                        store.put(e).map_err(data)?;
                    }
                }
                if !store.is_empty() {
                    write_if_changed(&store_path, &store.to_binary()).map_err(data)?;
                }
                if dur_failed {
                    continue;
                }
                store
            };
            for e in store.iter() {
                entries.push(EmbeddingEntry {
                    duration: label.clone(),
                    utt_id: e.utt_id.clone(),
                    condition: e.condition.clone(),
                });
            }
            reports.extend(evaluate_duration(&cfg, &hash, &out, &label, &trials, &store, gate.as_ref())?);
        }
        Ok(())
    })?;

    write_if_changed(&out.join(SUMMARY_FILE), format_summary(&hash, &reports).as_bytes()).map_err(data)?;
    let failures_path = out.join(FAILURES_FILE);
    if failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path).map_err(data)?;
        }
    } else {
        failures.sort();
        let body = serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": hash,
            "failures": failures,
        }))
        .expect("failures serialize");
        write_if_changed(&failures_path, body.as_bytes()).map_err(data)?;
    }
    entries.sort();
    let manifest = Manifest {
        config_hash: hash.clone(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        artifacts: collect_artifacts(&out)?,
        embeddings: entries,
        short_inputs,
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    ttasv::fsutil::atomic_write(&out.join(MANIFEST_FILE), body.as_bytes()).map_err(data)?;

    if let Some(f) = failures.first() {
        let msg = format!(
            "{} failure(s); first: {} {} at {} ({}): {}; see {}",
            failures.len(),
            f.stage,
            f.utt,
            f.duration,
            f.backend,
            f.error,
            failures_path.display()
        );
        return Err(if failures.iter().any(|f| f.stage != "segment") {
            CliError::Backend(msg)
        } else {
            CliError::Data(msg)
        });
    }
    Ok(RunSummary {
        out_dir: out,
        config_hash: hash,
        reports,
        failures,
        cache_hits: hits,
        cache_misses: misses,
    })
}
