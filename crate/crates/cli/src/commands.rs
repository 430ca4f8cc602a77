//! Single-stage subcommands. Each reads and writes only the documented file
//! formats, so stages compose through the filesystem.

use std::path::{Path, PathBuf};

use ttasv::audio::{self, Anchor, SampleFormat, SegmentDuration, SegmentSpec};
use ttasv::backends::{request_embedding, request_tts, BackendEndpoint, BackendKind, TtsCache};
use ttasv::embedding::Embedding;
use ttasv::fusion::{fuse, two_stage_fuse, FusionConfig, FusionMethod, GateNetwork};
use ttasv::phoneme::{phoneme_set, PronDict};
use ttasv::scoring::{
    compute_eer, format_scores, format_sweep_csv, parse_scores, score_condition, weight_sweep,
};
use ttasv::sim::{format_sim_csv, run_sim_experiment, SimConfig};
use ttasv::store::EmbeddingStore;
use ttasv::training::{format_log_csv, make_samples, save_checkpoint, train_gate, TrainConfig};
use ttasv::trial::{parse_trials, Trial};

use crate::config::ExperimentConfig;
use crate::error::{backend, config, data, CliError, Result};
use crate::util::{wav_files, write_if_changed};

/// Writes `text` to `out`, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_if_changed(p, text.as_bytes()).map_err(data),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Looks `name` up in the config; without a config, `mock` names the built-in mock.
pub fn resolve_backend(cfg: Option<&ExperimentConfig>, name: &str, kind: BackendKind) -> Result<BackendEndpoint> {
    let ep = match cfg {
        Some(c) => c.backend(name)?.clone(),
        None if name == "mock" => BackendEndpoint::mock(name, kind),
        None => {
            return Err(CliError::Config(format!(
                "backend {name:?} needs --config (only \"mock\" is built in)"
            )))
        }
    };
    if ep.kind != kind {
        return Err(CliError::Config(format!("backend {name:?} is not a {kind:?} backend")));
    }
    ep.validate().map_err(config)?;
    Ok(ep)
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_trials(&text).map_err(data)
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Saves binary for `.emb` paths, text otherwise.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e == "emb") {
        store.to_binary()
    } else {
        store.to_text().into_bytes()
    };
    write_if_changed(path, &bytes).map_err(data)
}

pub fn cmd_segment(input: &Path, out: &Path, duration: SegmentDuration, anchor: Anchor) -> Result<usize> {
    let spec = SegmentSpec { duration, anchor };
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        wav_files(input)
            .map_err(data)?
            .into_iter()
            .map(|(id, p)| (p, out.join(id)))
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    let mut short = 0;
    for (src, dst) in &jobs {
        let a = audio::load_wav(src).map_err(|e| CliError::Data(format!("{}: {e}", src.display())))?;
        let seg = audio::truncate_midpoint(&a, &spec).map_err(data)?;
        if seg.short_input {
            short += 1;
            eprintln!("note: {} is shorter than {duration}; kept whole", src.display());
        }
        write_if_changed(dst, &audio::encode_wav(&seg.audio, SampleFormat::Pcm16)).map_err(data)?;
    }
    Ok(short)
}

pub fn cmd_synthesize(
    ep: &BackendEndpoint,
    prompt: &Path,
    text: &str,
    round: usize,
    out: Option<&Path>,
    cache_root: &Path,
) -> Result<PathBuf> {
    match out {
        Some(p) => {
            request_tts(ep, prompt, text, p).map_err(backend)?;
            Ok(p.to_path_buf())
        }
        None => Ok(TtsCache::new(cache_root)
            .get_or_generate(ep, prompt, text, round)
            .map_err(backend)?
            .0),
    }
}

pub fn cmd_embed(ep: &BackendEndpoint, input: &Path, condition: &str, out: &Path) -> Result<usize> {
    let mut store = if out.exists() {
        load_store(out)?
    } else {
        EmbeddingStore::default()
    };
    let files: Vec<(String, PathBuf)> = if input.is_dir() {
        wav_files(input).map_err(data)?
    } else {
        let name = input
            .file_name()
            .ok_or_else(|| CliError::Data(format!("{} has no file name", input.display())))?
            .to_string_lossy()
            .into_owned();
        vec![(name, input.to_path_buf())]
    };
    for (id, p) in &files {
        let v = request_embedding(ep, p).map_err(backend)?;
        store.put(Embedding::new(id.as_str(), condition, v).map_err(data)?).map_err(data)?;
    }
    save_store(&store, out)?;
    Ok(files.len())
}

pub struct FuseArgs<'a> {
    pub method: &'a str,
    pub orig: &'a str,
    pub tts: &'a str,
    pub tts2: Option<&'a str>,
    pub w: f64,
    pub inner: f64,
    pub gate: Option<&'a Path>,
    pub normalize: bool,
}

/// Fuses every utterance that has all required conditions.
pub fn cmd_fuse(store: &EmbeddingStore, a: &FuseArgs) -> Result<EmbeddingStore> {
    let mut out = EmbeddingStore::default();
    let utts: Vec<&str> = store
        .iter()
        .filter(|e| e.condition == a.orig)
        .map(|e| e.utt_id.as_str())
        .collect();
    let gate = a.gate.map(GateNetwork::load).transpose().map_err(config)?;
    for u in utts {
        let (Ok(b), Ok(g)) = (store.get(u, a.orig), store.get(u, a.tts)) else {
            continue;
        };
        let fused = if a.method == "two_stage" {
            let t2 = a
                .tts2
                .ok_or_else(|| CliError::Config("two_stage needs --tts2".into()))?;
            let Ok(g2) = store.get(u, t2) else { continue };
            two_stage_fuse(g, g2, b, a.inner, a.w, a.normalize)
        } else {
            let method: FusionMethod = a.method.parse().map_err(config)?;
            let cfg = FusionConfig {
                method,
                w: a.w,
                normalize_inputs: a.normalize,
            };
            fuse(&cfg, b, g, gate.as_ref())
        }
        .map_err(data)?;
        out.put(fused).map_err(data)?;
    }
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "no utterance has both {:?} and {:?}",
            a.orig, a.tts
        )));
    }
    Ok(out)
}

pub fn cmd_score(trials: &[Trial], store: &EmbeddingStore, condition: &str) -> Result<String> {
    Ok(format_scores(&score_condition(trials, store, condition).map_err(data)?))
}

pub fn cmd_eer(trials: &[Trial], scores_text: &str) -> Result<String> {
    let recs = parse_scores(scores_text, trials).map_err(data)?;
    let rep = compute_eer(&recs).map_err(data)?;
    Ok(serde_json::to_string_pretty(&rep).expect("report serializes") + "\n")
}

pub fn cmd_sweep(
    trials: &[Trial],
    store: &EmbeddingStore,
    orig: &str,
    tts: &str,
    weights: &[f64],
    normalize: bool,
) -> Result<String> {
    Ok(format_sweep_csv(
        &weight_sweep(trials, store, orig, tts, weights, normalize).map_err(data)?,
    ))
}

pub fn cmd_phoneme_report(dict: &Path, text: &str) -> Result<String> {
    let d = PronDict::load(dict).map_err(|e| CliError::Data(format!("{}: {e}", dict.display())))?;
    let p = Path::new(text);
    let body = if p.is_file() {
        std::fs::read_to_string(p).map_err(data)?
    } else {
        text.to_string()
    };
    let rep = phoneme_set(&body, &d);
    let value = serde_json::json!({
        "inventory_size": d.inventory().len(),
        "distinct_count": rep.distinct_count,
        "coverage": rep.coverage,
        "oov_words": rep.oov_words,
        "oov_rate": rep.oov_rate,
        "per_phoneme_counts": rep.per_phoneme_counts,
    });
    Ok(serde_json::to_string_pretty(&value).expect("report serializes") + "\n")
}

pub fn cmd_simulate(cfg: &SimConfig) -> Result<String> {
    let rows = run_sim_experiment(cfg).map_err(|e| match e {
        ttasv::sim::SimError::Config(m) => CliError::Config(m),
        other => CliError::Data(other.to_string()),
    })?;
    Ok(format_sim_csv(&rows))
}

/// Speaker label of a VoxCeleb-style id: everything before the first `/`.
pub fn speaker_of(utt_id: &str) -> &str {
    utt_id.split('/').next().unwrap_or(utt_id)
}

pub struct TrainOutput {
    pub best_epoch: usize,
    pub log_csv: String,
    pub speakers: usize,
}

pub fn cmd_train_gate(
    store: &EmbeddingStore,
    orig: &str,
    tts: &str,
    tc: &TrainConfig,
    out: &Path,
) -> Result<TrainOutput> {
    let mut speakers: Vec<&str> = Vec::new();
    let mut pairs = Vec::new();
    for b in store.iter().filter(|e| e.condition == orig) {
        let Ok(g) = store.get(&b.utt_id, tts) else { continue };
        let spk = speaker_of(&b.utt_id);
        let label = match speakers.iter().position(|s| *s == spk) {
            Some(i) => i,
            None => {
                speakers.push(spk);
                speakers.len() - 1
            }
        };
        pairs.push((b.clone(), g.clone(), label));
    }
    let samples = make_samples(&pairs, tc.normalize_inputs).map_err(data)?;
    let outcome = train_gate(&samples, tc, None).map_err(data)?;
    save_checkpoint(out, &outcome.gate, &outcome.classifier).map_err(data)?;
    Ok(TrainOutput {
        best_epoch: outcome.best_epoch,
        log_csv: format_log_csv(&outcome.log),
        speakers: speakers.len(),
    })
}
