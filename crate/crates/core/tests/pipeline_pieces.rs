use std::path::Path;

use proptest::prelude::*;
use ttasv::audio::{decode_wav, encode_wav, truncate_midpoint, AudioBuffer, SampleFormat, SegmentSpec};
use ttasv::backends::{mock_embedding, request_embedding, request_tts, BackendEndpoint, BackendKind, TtsCache};
use ttasv::phoneme::{phoneme_set, PronDict};
use ttasv::sim::{gen_store, gen_speakers, gen_trials, run_sim_experiment, SimConfig};
use ttasv::trial::Label;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn dict() -> PronDict {
    PronDict::load(&fixture("cmudict-mini.dict")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn midpoint_segment_is_centered(len in 100usize..5000, secs in 0.001f64..0.5) {
        let sr = 8000;
        let a = AudioBuffer::new(sr, (0..len).map(|i| i as f32 / len as f32).collect());
        let seg = truncate_midpoint(&a, &SegmentSpec::seconds(secs)).unwrap();
        let want = ((secs * sr as f64).round() as usize).clamp(1, len);
        prop_assert_eq!(seg.audio.len(), want);
        prop_assert_eq!(seg.short_input, want == len && (secs * sr as f64).round() as usize > len);
        let start = (seg.audio.samples[0] * len as f32).round() as usize;
        let left = start;
        let right = len - start - seg.audio.len();
        prop_assert!(left.abs_diff(right) <= 1);
    }

    #[test]
    fn pcm16_wav_round_trips(samples in prop::collection::vec(-32768i32..32768, 1..400)) {
        let a = AudioBuffer::new(16000, samples.iter().map(|&s| s as f32 / 32768.0).collect());
        let bytes = encode_wav(&a, SampleFormat::Pcm16);
        let (b, fmt) = decode_wav(&bytes).unwrap();
        prop_assert_eq!(fmt, SampleFormat::Pcm16);
        prop_assert_eq!(encode_wav(&b, SampleFormat::Pcm16), bytes);
    }

    #[test]
    fn adding_words_never_removes_phonemes(words in prop::collection::vec(prop::sample::select(vec![
        "the", "cat", "dog", "river", "night", "zoo", "yes", "thinking", "chair", "blue", "unknownword",
    ]), 1..12), extra in prop::sample::select(vec!["fox", "pleasure", "boy", "hat"])) {
        let d = dict();
        let text = words.join(" ");
        let a = phoneme_set(&text, &d);
        let b = phoneme_set(&format!("{text} {extra}"), &d);
        prop_assert!(b.distinct_count >= a.distinct_count);
        prop_assert!(b.coverage >= a.coverage);
        for p in a.per_phoneme_counts.keys() {
            prop_assert!(b.per_phoneme_counts.contains_key(p));
        }
    }

    #[test]
    fn mock_embedding_is_unit_and_deterministic(bytes in prop::collection::vec(any::<u8>(), 0..64), dim in 1usize..64) {
        let a = mock_embedding(&bytes, dim);
        prop_assert_eq!(a.len(), dim);
        prop_assert_eq!(&a, &mock_embedding(&bytes, dim));
        let n: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn dictionary_serialization_round_trips() {
    let d = dict();
    let text = d.serialize();
    let back = PronDict::parse(&text).unwrap();
    assert_eq!(back.serialize(), text);
    assert_eq!(back.len(), d.len());
    assert_eq!(d.inventory().len(), 39);
}

#[test]
fn mock_backends_through_cache() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = dir.path().join("p.wav");
    let a = AudioBuffer::new(16000, (0..8000).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect());
    std::fs::write(&prompt, encode_wav(&a, SampleFormat::Pcm16)).unwrap();
    let tts_a = BackendEndpoint::mock("a", BackendKind::Tts);
    let tts_b = BackendEndpoint::mock("b", BackendKind::Tts);
    let cache = TtsCache::new(dir.path().join("cache"));
    let (pa, hit) = cache.get_or_generate(&tts_a, &prompt, "one two three", 0).unwrap();
    assert!(!hit);
    let (pa2, hit) = cache.get_or_generate(&tts_a, &prompt, "one two three", 0).unwrap();
    assert!(hit);
    assert_eq!(pa, pa2);
    let (pb, _) = cache.get_or_generate(&tts_b, &prompt, "one two three", 0).unwrap();
    assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    let emb = BackendEndpoint::mock("enc", BackendKind::Embed);
    let va = request_embedding(&emb, &pa).unwrap();
    assert_eq!(va, request_embedding(&emb, &pa).unwrap());
    assert_ne!(va, request_embedding(&emb, &pb).unwrap());

    let out = dir.path().join("direct.wav");
    let r = request_tts(&tts_a, &prompt, "one two three", &out).unwrap();
    assert!((r.duration_s - 1.2).abs() < 1e-3);
    assert!(request_tts(&tts_a, &prompt, "   ", &out).is_err());
}

#[test]
fn simulated_trials_are_balanced_and_reproducible() {
    let cfg = SimConfig {
        num_speakers: 6,
        utts_per_speaker: 4,
        durations: vec![1.0],
        ..SimConfig::default()
    };
    let trials = gen_trials(&cfg);
    let targets = trials.iter().filter(|t| t.label == Label::Target).count();
    assert_eq!(targets, 6 * 4 * 3 / 2);
    assert_eq!(trials.len(), 2 * targets);
    assert_eq!(trials, gen_trials(&cfg));
    let c = gen_speakers(&cfg);
    assert_eq!(gen_store(&cfg, &c, 1.0).to_binary(), gen_store(&cfg, &c, 1.0).to_binary());
    assert_eq!(run_sim_experiment(&cfg).unwrap(), run_sim_experiment(&cfg).unwrap());
}
