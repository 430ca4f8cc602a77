//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttasv::audio::{encode_wav, AudioBuffer, SampleFormat, SegmentDuration};
use ttasv::backends::{EmbedRequest, EmbedResponse, TtsRequest, TtsResponse};
use ttasv::embedding::{tts_condition, CONDITION_ORIG};
use ttasv::fusion::{fuse_addition, fuse_weighted, gate_forward, GateNetwork};
use ttasv::phoneme::{phoneme_set, select_texts, PronDict};
use ttasv::scoring::{compute_eer, cosine, relative_reduction, score_condition, ScoreRecord};
use ttasv::sim::{
    best_eer, fidelity_from_coverage, gen_speakers, gen_store, gen_trials, run_sim_experiment, SimConfig,
};
use ttasv::training::{checkpoint_bytes, grad_check, parse_checkpoint, AamClassifier, TrainSample};
use ttasv::trial::{format_trials, parse_trials, Label, Trial};
use ttasv::{Embedding, EmbeddingStore};
use ttasv_cli::config::ExperimentConfig;
use ttasv_cli::pipeline::{cmd_run, RunOptions, MANIFEST_FILE};
use ttasv_cli::report::{cmd_report, parse_grid, BASELINE};

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).parent().unwrap().parent().unwrap()
}

fn fixture(name: &str) -> std::path::PathBuf {
    workspace_root().join("fixtures").join(name)
}

// Brute-force EER: every distinct score (and +inf) is a threshold, rates are
// counted directly, and the crossing is linearly interpolated.
fn oracle_eer(tar: &[f64], non: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = tar.iter().chain(non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates = |t: f64| {
        let far = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
        let frr = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
        (far, frr)
    };
    let mut prev: Option<(f64, f64)> = None;
    for &t in &thresholds {
        let (far, frr) = rates(t);
        if far - frr <= 0.0 {
            return match prev {
                Some((pf, pr)) if far != frr => {
                    let (di, dj) = (pf - pr, far - frr);
                    100.0 * (pf + di / (di - dj) * (far - pf))
                }
                _ => 100.0 * far,
            };
        }
        prev = Some((far, frr));
    }
    unreachable!("FAR reaches 0 at the infinite threshold")
}

fn eer_oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let nt = rng.random_range(1..60);
        let nn = rng.random_range(1..200);
        let grid = rng.random_bool(0.3);
        let mut draw = |shift: f64| {
            let x: f64 = rng.random_range(-1.0..1.0) + shift;
            if grid {
                (x * 8.0).round() / 8.0
            } else {
                x
            }
        };
        let tar: Vec<f64> = (0..nt).map(|_| draw(0.4)).collect();
        let non: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
        let recs: Vec<ScoreRecord> = tar
            .iter()
            .map(|&s| (Label::Target, s))
            .chain(non.iter().map(|&s| (Label::Nontarget, s)))
            .map(|(l, s)| ScoreRecord {
                trial: Trial::new(l, "e", "t"),
                score: s,
            })
            .collect();
        let got = compute_eer(&recs).map_err(|e| e.to_string())?.eer;
        let want = oracle_eer(&tar, &non);
        ensure((got - want).abs() <= 1e-9, || format!("case {case}: {got} vs oracle {want}"))?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize, id: &str) -> Embedding {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    Embedding::new(id, CONDITION_ORIG, v.iter().map(|x| x / n).collect()).unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

fn fusion_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 192;
    let half = GateNetwork::zeros(d, 16);
    let err = |e: ttasv::fusion::FusionError| e.to_string();
    for i in 0..100 {
        let b = random_unit(&mut rng, d, "a");
        let g = random_unit(&mut rng, d, "a");
        let b2 = random_unit(&mut rng, d, "b");
        let g2 = random_unit(&mut rng, d, "b");
        let w: f64 = rng.random_range(0.0..1.0);

        let at1 = fuse_weighted(&b, &g, 1.0, true).map_err(err)?;
        let at0 = fuse_weighted(&b, &g, 0.0, true).map_err(err)?;
        ensure(max_diff(&at1.values, &b.values) <= 1e-6, || format!("pair {i}: w=1 is not e_b"))?;
        ensure(max_diff(&at0.values, &g.values) <= 1e-6, || format!("pair {i}: w=0 is not e_g"))?;

        let fw = fuse_weighted(&b, &g, w, true).map_err(err)?;
        let sw = fuse_weighted(&g, &b, 1.0 - w, true).map_err(err)?;
        ensure(max_diff(&fw.values, &sw.values) <= 1e-6, || format!("pair {i}: exchange symmetry"))?;

        let add = cosine(
            &fuse_addition(&b, &g, true).map_err(err)?.values,
            &fuse_addition(&b2, &g2, true).map_err(err)?.values,
        )
        .map_err(|e| e.to_string())?;
        let mean = cosine(
            &fuse_weighted(&b, &g, 0.5, true).map_err(err)?.values,
            &fuse_weighted(&b2, &g2, 0.5, true).map_err(err)?.values,
        )
        .map_err(|e| e.to_string())?;
        ensure((add - mean).abs() <= 1e-6, || format!("pair {i}: addition {add} vs mean {mean}"))?;

        let (z, gated) = gate_forward(&half, &b, &g, true).map_err(err)?;
        ensure(z.iter().all(|&v| v == 0.5), || format!("pair {i}: zero gate is not 0.5"))?;
        let m = fuse_weighted(&b, &g, 0.5, true).map_err(err)?;
        ensure(max_diff(&gated.values, &m.values) <= 1e-6, || format!("pair {i}: gate 0.5 vs weighted 0.5"))?;
    }
    Ok(())
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (d, h) = (8, 4);
        let k = rng.random_range(2..7);
        let mut net = GateNetwork::random(d, h, &mut rng);
        net.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        net.b2.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let margin = rng.random_range(0.1..0.4);
        let scale = rng.random_range(5.0..30.0);
        let clf = AamClassifier::from_rows(&rows, margin, scale).map_err(|e| e.to_string())?;
        let sample = TrainSample {
            e_b: unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
            e_g: unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
            label: rng.random_range(0..k),
        };
        let err = grad_check(&net, &clf, &sample).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        ensure(err <= 1e-4, || format!("config {seed}: relative error {err:e}"))?;
    }
    let took = start.elapsed();
    println!("  worst relative error {worst:e}");
    ensure(took < Duration::from_secs(30), || format!("took {took:?}"))
}

fn simulator_structure() -> Check {
    let start = Instant::now();
    for seed in 0..3 {
        let cfg = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let rows = run_sim_experiment(&cfg).map_err(|e| e.to_string())?;
        let base: Vec<f64> = cfg
            .durations
            .iter()
            .map(|&d| best_eer(&rows, d, "baseline").unwrap())
            .collect();
        ensure(base.windows(2).all(|w| w[1] < w[0]), || {
            format!("seed {seed}: baseline not strictly decreasing: {base:?}")
        })?;
        for (d, b) in [(0.5, base[0]), (1.0, base[1])] {
            let wm = best_eer(&rows, d, "weighted_mean").unwrap();
            ensure(wm < b, || format!("seed {seed}, {d} s: weighted mean {wm} vs baseline {b}"))?;
        }
        println!("  seed {seed}: baseline {base:.2?}");
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(120), || format!("took {took:?}"))
}

fn relative_reduction_values() -> Check {
    for (base, sys, want) in [(12.82, 10.77, 16.0), (5.39, 4.49, 16.7)] {
        let got = relative_reduction(base, sys).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 0.1, || format!("({base}, {sys}) gave {got}, expected {want}"))?;
    }
    Ok(())
}

fn phoneme_protocol() -> Check {
    let dict = PronDict::load(&fixture("cmudict-mini.dict")).map_err(|e| e.to_string())?;
    let corpus: Vec<String> = std::fs::read_to_string(fixture("phoneme-corpus.txt"))
        .map_err(|e| e.to_string())?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    let full = dict.inventory().len();
    let targets = [7, 16, 26, full];
    let picked = select_texts(&corpus, &dict, &targets, 15..=20).map_err(|e| e.to_string())?;
    for t in targets {
        let text = picked.get(&t).ok_or_else(|| format!("no text for target {t}"))?;
        let n = phoneme_set(text, &dict).distinct_count;
        ensure(n == t, || format!("target {t}: selected text has {n} phonemes"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inventory = |s: &str| -> BTreeSet<String> { phoneme_set(s, &dict).per_phoneme_counts.into_keys().collect() };
    for i in 0..1000 {
        let a = &corpus[rng.random_range(0..corpus.len())];
        let b = &corpus[rng.random_range(0..corpus.len())];
        let cut = |s: &str, rng: &mut ChaCha8Rng| {
            let words: Vec<&str> = s.split_whitespace().collect();
            let lo = rng.random_range(0..words.len());
            let hi = rng.random_range(lo..=words.len());
            words[lo..hi].join(" ")
        };
        let (a, b) = (cut(a, &mut rng), cut(b, &mut rng));
        let joined = format!("{a} {b}");
        let (sa, sb, sj) = (inventory(&a), inventory(&b), inventory(&joined));
        ensure(sa.is_subset(&sj) && sb.is_subset(&sj), || format!("concatenation {i} lost phonemes"))?;
        ensure(sj.len() >= sa.len().max(sb.len()), || format!("concatenation {i} shrank"))?;
    }

    // Coverage of each selected text sets the simulator's TTS fidelity.
    let mut fused = Vec::new();
    let mut tts = Vec::new();
    for t in targets {
        let cov = phoneme_set(&picked[&t], &dict).coverage;
        let cfg = SimConfig {
            alpha: fidelity_from_coverage(cov, 0.9),
            durations: vec![1.0],
            backends: vec!["cosyvoice".into()],
            ..SimConfig::default()
        };
        let rows = run_sim_experiment(&cfg).map_err(|e| e.to_string())?;
        tts.push(best_eer(&rows, 1.0, "tts_only").unwrap());
        let wm = best_eer(&rows, 1.0, "weighted_mean").unwrap();
        fused.push(wm.min(best_eer(&rows, 1.0, "baseline").unwrap()));
    }
    println!("  tts-only EER by coverage {tts:.2?}; best fused {fused:.2?}");
    ensure(tts.windows(2).all(|w| w[1] < w[0]), || format!("tts-only EER not decreasing: {tts:?}"))?;
    ensure(fused.windows(2).all(|w| w[1] <= w[0]), || format!("fused EER not monotone: {fused:?}"))?;
    ensure(fused[3] < fused[0], || format!("no coverage gain: {fused:?}"))
}

fn relabel_rounds(store: &EmbeddingStore) -> EmbeddingStore {
    let mut out = EmbeddingStore::default();
    for e in store.iter() {
        let mut e = e.clone();
        if e.condition != CONDITION_ORIG {
            e.condition = format!("{}/r0", e.condition);
        }
        out.put(e).unwrap();
    }
    out
}

fn reproduction_path() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sim = SimConfig {
        num_speakers: 20,
        utts_per_speaker: 8,
        ..SimConfig::default()
    };
    let centroids = gen_speakers(&sim);
    let trials = gen_trials(&sim);
    let stores = dir.path().join("stores");
    std::fs::create_dir_all(&stores).unwrap();
    std::fs::write(dir.path().join("trials.txt"), format_trials(&trials)).unwrap();
    let durations = [
        (SegmentDuration::Seconds(0.5), 0.5),
        (SegmentDuration::Seconds(1.0), 1.0),
        (SegmentDuration::Seconds(2.0), 2.0),
        (SegmentDuration::Full, 8.0),
    ];
    let mut expected = Vec::new();
    for (d, secs) in durations {
        let store = relabel_rounds(&gen_store(&sim, &centroids, secs));
        std::fs::write(stores.join(format!("{}.emb", d.label())), store.to_binary()).unwrap();
        expected.push((d.label(), store));
    }
    let cfg_text = r#"
[dataset]
trials = "trials.txt"
stores_dir = "stores"

[fusion]
methods = ["weighted_mean", "two_stage"]
weights = [0.5, 0.8, 1.0]
"#;
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, cfg_text).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let out = dir.path().join("results");
    cmd_run(
        &cfg,
        &RunOptions {
            out: Some(out.clone()),
            ..RunOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    cmd_report(&out, None).map_err(|e| e.to_string())?;
    let grid_text = std::fs::read_to_string(out.join("grid.csv")).map_err(|e| e.to_string())?;
    let grid = parse_grid(&grid_text).map_err(|e| e.to_string())?;
    let header = grid_text.lines().find(|l| !l.starts_with('#')).unwrap();
    ensure(header == "system,0.5,1,2,full", || format!("grid header {header:?}"))?;
    let b1 = tts_condition(&sim.backends[0], Some(0));
    for (label, store) in &expected {
        let independent: Vec<ScoreRecord> = trials
            .iter()
            .map(|t| ScoreRecord {
                trial: t.clone(),
                score: cosine(
                    &store.get(&t.enroll_id, CONDITION_ORIG).unwrap().values,
                    &store.get(&t.test_id, CONDITION_ORIG).unwrap().values,
                )
                .unwrap(),
            })
            .collect();
        let want = compute_eer(&independent).unwrap().eer;
        let got = grid[BASELINE][label];
        ensure(got.to_bits() == want.to_bits(), || format!("{label}: grid {got} vs independent {want}"))?;
        let tts_only = compute_eer(&score_condition(&trials, store, &b1).unwrap()).unwrap().eer;
        let row = format!("tts_only-{}", sim.backends[0]);
        ensure(grid[&row][label].to_bits() == tts_only.to_bits(), || format!("{label}: {row} {} vs {tts_only}", grid[&row][label]))?;
    }
    ensure(grid.contains_key("two_stage-w0.8"), || "no two-stage row".into())
}

fn write_noise_wav(path: &Path, seconds: f64, rng: &mut ChaCha8Rng) {
    let sr = 16_000;
    let n = (seconds * sr as f64) as usize;
    let samples = (0..n).map(|_| rng.random_range(-0.3f32..0.3)).collect();
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, encode_wav(&AudioBuffer::new(sr, samples), SampleFormat::Pcm16)).unwrap();
}

fn end_to_end_smoke() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut utts = Vec::new();
    for s in 0..5 {
        for u in 0..4 {
            let id = format!("spk{s}/utt{u}.wav");
            write_noise_wav(&dir.path().join("wav").join(&id), rng.random_range(2.5..4.0), &mut rng);
            utts.push((s, id));
        }
    }
    let mut trials = Vec::new();
    for (i, (sa, a)) in utts.iter().enumerate() {
        for (sb, b) in &utts[i + 1..] {
            let l = if sa == sb { Label::Target } else { Label::Nontarget };
            trials.push(Trial::new(l, a.as_str(), b.as_str()));
        }
    }
    std::fs::write(dir.path().join("trials.txt"), format_trials(&trials)).unwrap();
    let cfg_text = r#"
[dataset]
root = "wav"
trials = "trials.txt"
durations = [0.5, 1, 2, "full"]

[[backend]]
name = "enc"
kind = "embed"
transport = "mock"
dim = 192

[[backend]]
name = "mock-a"
kind = "tts"
transport = "mock"

[[backend]]
name = "mock-b"
kind = "tts"
transport = "mock"
"#;
    std::fs::write(dir.path().join("exp.toml"), cfg_text).unwrap();
    let cfg = ExperimentConfig::load(&dir.path().join("exp.toml")).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        out: Some(dir.path().join("out")),
        ..RunOptions::default()
    };
    let first = cmd_run(&cfg, &opts).map_err(|e| e.to_string())?;
    ensure(first.failures.is_empty(), || format!("{} failures", first.failures.len()))?;

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out").join(MANIFEST_FILE)).unwrap())
            .map_err(|e| e.to_string())?;
    let covered: BTreeSet<(String, String, String)> = manifest["embeddings"]
        .as_array()
        .ok_or("manifest has no embeddings")?
        .iter()
        .map(|e| {
            (
                e["duration"].as_str().unwrap().to_string(),
                e["utt_id"].as_str().unwrap().to_string(),
                e["condition"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    let mut conditions = vec![CONDITION_ORIG.to_string()];
    for b in ["mock-a", "mock-b"] {
        for r in 0..3 {
            conditions.push(tts_condition(b, Some(r)));
        }
    }
    for d in ["0.5", "1", "2", "full"] {
        for (_, u) in &utts {
            for c in &conditions {
                ensure(covered.contains(&(d.into(), u.clone(), c.clone())), || {
                    format!("manifest misses ({d}, {u}, {c})")
                })?;
            }
        }
    }
    ensure(first.cache_misses == 4 * 20 * 2 * 3, || format!("{} TTS generations", first.cache_misses))?;

    let summary = std::fs::read(dir.path().join("out").join("summary.csv")).unwrap();
    let second = cmd_run(&cfg, &opts).map_err(|e| e.to_string())?;
    ensure(second.cache_misses == 0, || format!("rerun regenerated {} files", second.cache_misses))?;
    ensure(first.reports == second.reports, || "rerun reports differ".into())?;
    ensure(summary == std::fs::read(dir.path().join("out").join("summary.csv")).unwrap(), || {
        "rerun summary differs".into()
    })?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))
}

fn golden(name: &str) -> Vec<u8> {
    std::fs::read(fixture("golden").join(name)).unwrap()
}

fn same(name: &str, got: &[u8]) -> Check {
    ensure(got == golden(name).as_slice(), || format!("{name} did not round-trip"))
}

fn json_roundtrip<T: serde::Serialize + serde::de::DeserializeOwned>(name: &str) -> Check {
    let text = String::from_utf8(golden(name)).map_err(|e| e.to_string())?;
    let v: T = serde_json::from_str(&text).map_err(|e| format!("{name}: {e}"))?;
    same(name, (serde_json::to_string(&v).unwrap() + "\n").as_bytes())
}

fn format_roundtrips() -> Check {
    let text = String::from_utf8(golden("store.txt")).unwrap();
    let s = EmbeddingStore::from_text(&text).map_err(|e| e.to_string())?;
    same("store.txt", s.to_text().as_bytes())?;
    let b = EmbeddingStore::from_binary(&golden("store.emb")).map_err(|e| e.to_string())?;
    same("store.emb", &b.to_binary())?;
    ensure(s.to_text() == b.to_text(), || "text and binary golden stores disagree".into())?;

    let g = GateNetwork::from_bytes(&golden("gate.bin")).map_err(|e| e.to_string())?;
    same("gate.bin", &g.to_bytes())?;
    let (g2, clf) = parse_checkpoint(&golden("checkpoint.bin")).map_err(|e| e.to_string())?;
    same("checkpoint.bin", &checkpoint_bytes(&g2, &clf))?;

    let t = parse_trials(std::str::from_utf8(&golden("trials.txt")).unwrap()).map_err(|e| e.to_string())?;
    same("trials.txt", format_trials(&t).as_bytes())?;

    json_roundtrip::<EmbedRequest>("embed_request.json")?;
    json_roundtrip::<EmbedResponse>("embed_response.json")?;
    json_roundtrip::<TtsRequest>("tts_request.json")?;
    json_roundtrip::<TtsResponse>("tts_response.json")
}

// Bypasses libtest's capture so the verdicts show without --nocapture.
fn status(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("1 EER oracle equivalence", eer_oracle_equivalence),
        ("2 fusion identities", fusion_identities),
        ("3 gradient correctness", gradient_correctness),
        ("4 simulator duration structure", simulator_structure),
        ("5 relative-reduction arithmetic", relative_reduction_values),
        ("6 phoneme protocol", phoneme_protocol),
        ("7 reproduction path from stores", reproduction_path),
        ("8 end-to-end mock run", end_to_end_smoke),
        ("9 format round-trips", format_roundtrips),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => status(&format!("PASS  {name} ({secs:.1} s)")),
            Err(why) => {
                status(&format!("FAIL  {name} ({secs:.1} s): {why}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
