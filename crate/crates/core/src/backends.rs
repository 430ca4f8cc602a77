//! Clients for external embedding extractors and zero-shot TTS engines.
//!
//! Both speak line-delimited JSON, either over HTTP (`POST /v1/embed`,
//! `POST /v1/tts`) or through a subprocess that reads one request per stdin
//! line and answers with one response per stdout line. The `mock` transport
//! runs in-process and is deterministic.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError, SampleFormat};
use crate::embedding::{l2_normalize, DEFAULT_DIM};
use crate::fsutil::{sha256_file, sha256_hex};

/// Overrides every endpoint's `timeout_s` when set.
pub const TIMEOUT_ENV: &str = "TTA_BACKEND_TIMEOUT_S";

/// Seconds of mock speech generated per word of text.
pub const MOCK_SECONDS_PER_WORD: f64 = 0.4;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("backend {name}: timed out after {seconds} s")]
    Timeout { name: String, seconds: f64 },
    #[error("backend {name}: transport failure: {reason}")]
    Transport { name: String, reason: String },
    #[error("backend {name}: {diagnostics}")]
    Backend { name: String, diagnostics: String },
    #[error("backend {name}: protocol error: {reason}")]
    Protocol { name: String, reason: String },
    #[error("backend {name}: generation failed: {reason}")]
    GenerationFailed { name: String, reason: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Failures that may succeed on an identical retry.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout { .. } | BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Embed,
    Tts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Http,
    Subprocess,
    Mock,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub name: String,
    pub kind: BackendKind,
    pub transport: Transport,
    /// Base URL for `http`, command line for `subprocess`, ignored for `mock`.
    #[serde(default)]
    pub address: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Expected embedding dimension; embed backends only.
    #[serde(default)]
    pub dim: Option<usize>,
}

impl BackendEndpoint {
    pub fn mock(name: &str, kind: BackendKind) -> Self {
        BackendEndpoint {
            name: name.to_string(),
            kind,
            transport: Transport::Mock,
            address: String::new(),
            timeout_s: default_timeout(),
            retries: default_retries(),
            dim: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.name.trim().is_empty() {
            return Err(BackendError::Precondition("backend name is empty".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(BackendError::Precondition(format!(
                "backend {}: timeout_s must be positive",
                self.name
            )));
        }
        if self.transport != Transport::Mock && self.address.trim().is_empty() {
            return Err(BackendError::Precondition(format!(
                "backend {}: address is empty",
                self.name
            )));
        }
        Ok(())
    }

    pub fn expected_dim(&self) -> usize {
        self.dim.unwrap_or(DEFAULT_DIM)
    }

    /// `timeout_s`, unless `TTA_BACKEND_TIMEOUT_S` holds a positive number.
    pub fn effective_timeout(&self) -> f64 {
        std::env::var(TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|t| *t > 0.0 && t.is_finite())
            .unwrap_or(self.timeout_s)
    }

    fn require(&self, kind: BackendKind) -> Result<(), BackendError> {
        self.validate()?;
        if self.kind != kind {
            return Err(BackendError::Precondition(format!(
                "backend {} is a {:?} backend",
                self.name, self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub audio_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub utt_id: String,
    pub dim: usize,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsRequest {
    pub prompt_path: String,
    pub text: String,
    pub out_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsResponse {
    pub out_path: String,
    pub duration_s: f64,
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn with_retries<T>(
    ep: &BackendEndpoint,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match call() {
            Err(e) if e.is_transient() && attempt < ep.retries => attempt += 1,
            other => return other,
        }
    }
}

fn call_http<Req: Serialize, Resp: DeserializeOwned>(
    ep: &BackendEndpoint,
    route: &str,
    req: &Req,
) -> Result<Resp, BackendError> {
    let timeout = ep.effective_timeout();
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs_f64(timeout))
        .build();
    let url = format!("{}{route}", ep.address.trim_end_matches('/'));
    match agent.post(&url).send_json(req) {
        Ok(resp) => resp.into_json::<Resp>().map_err(|e| BackendError::Protocol {
            name: ep.name.clone(),
            reason: e.to_string(),
        }),
        Err(ureq::Error::Status(code, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            Err(BackendError::Backend {
                name: ep.name.clone(),
                diagnostics: format!("HTTP {code}: {}", body.trim()),
            })
        }
        Err(ureq::Error::Transport(t)) => {
            let reason = t.to_string();
            if reason.contains("timed out") {
                Err(BackendError::Timeout {
                    name: ep.name.clone(),
                    seconds: timeout,
                })
            } else {
                Err(BackendError::Transport {
                    name: ep.name.clone(),
                    reason,
                })
            }
        }
    }
}

fn call_subprocess<Req: Serialize, Resp: DeserializeOwned>(
    ep: &BackendEndpoint,
    req: &Req,
) -> Result<Resp, BackendError> {
    let timeout = ep.effective_timeout();
    let mut argv = ep.address.split_whitespace();
    let program = argv.next().unwrap_or_default();
    let mut child = Command::new(program)
        .args(argv)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| BackendError::Transport {
            name: ep.name.clone(),
            reason: format!("cannot start {program:?}: {e}"),
        })?;

    let mut line = serde_json::to_string(req).expect("request serializes");
    line.push('\n');
    let mut stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut first = String::new();
        let _ = BufReader::new(stdout).read_line(&mut first);
        first
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });
    let _ = stdin.write_all(line.as_bytes());
    drop(stdin);

    let deadline = Instant::now() + Duration::from_secs_f64(timeout);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(BackendError::Timeout {
                name: ep.name.clone(),
                seconds: timeout,
            });
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let first = out_reader.join().unwrap_or_default();
    let diag = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(BackendError::Backend {
            name: ep.name.clone(),
            diagnostics: format!("exit status {status}: {}", diag.trim()),
        });
    }
    serde_json::from_str(first.trim()).map_err(|e| BackendError::Protocol {
        name: ep.name.clone(),
        reason: format!("bad response line {:?}: {e}", first.trim()),
    })
}

fn call<Req: Serialize, Resp: DeserializeOwned>(
    ep: &BackendEndpoint,
    route: &str,
    req: &Req,
) -> Result<Resp, BackendError> {
    with_retries(ep, || match ep.transport {
        Transport::Http => call_http(ep, route, req),
        Transport::Subprocess => call_subprocess(ep, req),
        Transport::Mock => unreachable!("mock transport is handled in-process"),
    })
}

fn sha256_seed(bytes: &[u8]) -> [u8; 32] {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&Sha256::digest(bytes));
    seed
}

/// Unit vector drawn from a Gaussian seeded by the SHA-256 of `bytes`.
pub fn mock_embedding(bytes: &[u8], dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::from_seed(sha256_seed(bytes));
    let v: Vec<f32> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    l2_normalize(&v).unwrap_or(v)
}

pub fn request_embedding(ep: &BackendEndpoint, audio_path: &Path) -> Result<Vec<f32>, BackendError> {
    ep.require(BackendKind::Embed)?;
    if !audio_path.is_file() {
        return Err(BackendError::Precondition(format!(
            "audio file {} does not exist",
            audio_path.display()
        )));
    }
    let dim = ep.expected_dim();
    let resp = match ep.transport {
        Transport::Mock => {
            let embedding = mock_embedding(&std::fs::read(audio_path)?, dim);
            EmbedResponse {
                utt_id: path_string(audio_path),
                dim,
                embedding,
            }
        }
        _ => call::<_, EmbedResponse>(
            ep,
            "/v1/embed",
            &EmbedRequest {
                audio_path: path_string(audio_path),
            },
        )?,
    };
    if resp.dim != resp.embedding.len() || resp.dim != dim {
        return Err(BackendError::Protocol {
            name: ep.name.clone(),
            reason: format!(
                "expected dim {dim}, got dim {} with {} values",
                resp.dim,
                resp.embedding.len()
            ),
        });
    }
    if let Some(i) = resp.embedding.iter().position(|x| !x.is_finite()) {
        return Err(BackendError::Protocol {
            name: ep.name.clone(),
            reason: format!("non-finite value at index {i}"),
        });
    }
    Ok(resp.embedding)
}

fn mock_tts(name: &str, prompt: &AudioBuffer, prompt_bytes: &[u8], text: &str) -> Result<AudioBuffer, AudioError> {
    let words = text.split_whitespace().count();
    let target = MOCK_SECONDS_PER_WORD * words as f64;
    let mut out = audio::repeat_to_duration(prompt, target)?;
    let mut seed_src = name.as_bytes().to_vec();
    seed_src.push(0);
    seed_src.extend_from_slice(prompt_bytes);
    seed_src.extend_from_slice(text.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(sha256_seed(&seed_src));
    let block = prompt.len().max(1);
    let mut gain = 1.0f32;
    for (i, s) in out.samples.iter_mut().enumerate() {
        if i % block == 0 {
            gain = rng.random_range(0.7..1.0);
        }
        *s = (*s * gain).clamp(-1.0, 1.0);
    }
    Ok(out)
}

fn check_generated(ep: &BackendEndpoint, out_path: &Path) -> Result<f64, BackendError> {
    let fail = |reason: String| BackendError::GenerationFailed {
        name: ep.name.clone(),
        reason,
    };
    let buf = audio::load_wav(out_path).map_err(|e| fail(format!("{}: {e}", out_path.display())))?;
    if buf.is_empty() {
        return Err(fail("zero-length output".into()));
    }
    Ok(buf.duration_s())
}

pub fn request_tts(
    ep: &BackendEndpoint,
    prompt_path: &Path,
    text: &str,
    out_path: &Path,
) -> Result<TtsResponse, BackendError> {
    ep.require(BackendKind::Tts)?;
    if text.trim().is_empty() {
        return Err(BackendError::Precondition("TTS text is empty".into()));
    }
    if !prompt_path.is_file() {
        return Err(BackendError::Precondition(format!(
            "prompt file {} does not exist",
            prompt_path.display()
        )));
    }
    if ep.transport == Transport::Mock {
        let bytes = std::fs::read(prompt_path)?;
        let (prompt, _) = audio::decode_wav(&bytes)?;
        if prompt.is_empty() {
            return Err(BackendError::GenerationFailed {
                name: ep.name.clone(),
                reason: "empty prompt".into(),
            });
        }
        let out = mock_tts(&ep.name, &prompt, &bytes, text)?;
        audio::write_wav(out_path, &out, SampleFormat::Pcm16)?;
    } else {
        let req = TtsRequest {
            prompt_path: path_string(prompt_path),
            text: text.to_string(),
            out_path: path_string(out_path),
        };
        let resp: TtsResponse = call(ep, "/v1/tts", &req)?;
        if Path::new(&resp.out_path) != out_path {
            return Err(BackendError::Protocol {
                name: ep.name.clone(),
                reason: format!("wrote {:?}, asked for {:?}", resp.out_path, req.out_path),
            });
        }
    }
    let duration_s = check_generated(ep, out_path)?;
    Ok(TtsResponse {
        out_path: path_string(out_path),
        duration_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextStrategy {
    /// The same three texts for every utterance, one per round.
    Fixed([String; 3]),
    /// Each utterance's own transcript.
    Original(BTreeMap<String, String>),
}

impl TextStrategy {
    pub fn fixed(texts: Vec<String>) -> Result<Self, BackendError> {
        let arr: [String; 3] = texts.try_into().map_err(|v: Vec<String>| {
            BackendError::Precondition(format!("fixed mode needs exactly 3 texts, got {}", v.len()))
        })?;
        if let Some(i) = arr.iter().position(|t| t.trim().is_empty()) {
            return Err(BackendError::Precondition(format!("fixed text {i} is empty")));
        }
        Ok(TextStrategy::Fixed(arr))
    }

    /// Parses `<utt_id> <transcript...>` lines.
    pub fn parse_transcripts(text: &str) -> Result<Self, BackendError> {
        let mut table = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, t) = line.split_once(char::is_whitespace).ok_or_else(|| {
                BackendError::Precondition(format!("transcript line {}: missing text", i + 1))
            })?;
            table.insert(id.to_string(), t.trim().to_string());
        }
        Ok(TextStrategy::Original(table))
    }

    pub fn rounds(&self) -> usize {
        match self {
            TextStrategy::Fixed(_) => 3,
            TextStrategy::Original(_) => 1,
        }
    }

    pub fn resolve_text(&self, utt_id: &str, round: usize) -> Result<&str, BackendError> {
        match self {
            TextStrategy::Fixed(texts) => texts.get(round).map(String::as_str).ok_or_else(|| {
                BackendError::Precondition(format!("round {round} out of range 0..3"))
            }),
            TextStrategy::Original(table) => table
                .get(utt_id)
                .map(String::as_str)
                .ok_or_else(|| BackendError::Precondition(format!("no transcript for {utt_id}"))),
        }
    }
}

/// On-disk cache of generated speech, laid out as
/// `<root>/<backend>/<prompt-hash>/<text-hash>-<round>.wav`.
#[derive(Debug, Clone)]
pub struct TtsCache {
    root: PathBuf,
}

/// Hex digits of SHA-256 kept in cache paths.
const CACHE_HASH_LEN: usize = 16;

impl TtsCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        TtsCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, backend: &str, prompt_hash: &str, text_hash: &str, round: usize) -> PathBuf {
        self.root
            .join(backend)
            .join(&prompt_hash[..CACHE_HASH_LEN.min(prompt_hash.len())])
            .join(format!("{}-{round}.wav", &text_hash[..CACHE_HASH_LEN.min(text_hash.len())]))
    }

    /// Returns the cached file for this request, generating it on a miss.
    /// The flag is `true` on a cache hit.
    pub fn get_or_generate(
        &self,
        ep: &BackendEndpoint,
        prompt_path: &Path,
        text: &str,
        round: usize,
    ) -> Result<(PathBuf, bool), BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Precondition("TTS text is empty".into()));
        }
        let prompt_hash = sha256_file(prompt_path).map_err(|e| {
            BackendError::Precondition(format!("prompt {}: {e}", prompt_path.display()))
        })?;
        let path = self.entry_path(&ep.name, &prompt_hash, &sha256_hex(text.as_bytes()), round);
        if path.is_file() {
            return Ok((path, true));
        }
        let dir = path.parent().expect("cache entry has a parent");
        std::fs::create_dir_all(dir)?;
        let tmp = tempfile::Builder::new()
            .prefix(".gen-")
            .suffix(".wav")
            .tempfile_in(dir)?
            .into_temp_path();
        request_tts(ep, prompt_path, text, &tmp)?;
        tmp.persist(&path).map_err(|e| BackendError::Io(e.error))?;
        Ok((path, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(secs: f64) -> AudioBuffer {
        let n = audio::samples_for(secs, 16000);
        AudioBuffer::new(16000, (0..n).map(|i| (i as f32 * 0.05).sin() * 0.5).collect())
    }

    #[test]
    fn mock_embed_is_idempotent_and_unit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        audio::write_wav(&p, &tone(0.5), SampleFormat::Pcm16).unwrap();
        let ep = BackendEndpoint::mock("m", BackendKind::Embed);
        let a = request_embedding(&ep, &p).unwrap();
        let b = request_embedding(&ep, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), DEFAULT_DIM);
        assert!((crate::embedding::norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kind_and_dim_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        audio::write_wav(&p, &tone(0.5), SampleFormat::Pcm16).unwrap();
        let tts = BackendEndpoint::mock("t", BackendKind::Tts);
        assert!(matches!(request_embedding(&tts, &p), Err(BackendError::Precondition(_))));
        let missing = dir.path().join("nope.wav");
        let emb = BackendEndpoint::mock("m", BackendKind::Embed);
        assert!(matches!(request_embedding(&emb, &missing), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn mock_tts_length_follows_words() {
        let dir = tempfile::tempdir().unwrap();
        let prompt = dir.path().join("p.wav");
        audio::write_wav(&prompt, &tone(0.5), SampleFormat::Pcm16).unwrap();
        let ep = BackendEndpoint::mock("t", BackendKind::Tts);
        let out = dir.path().join("o.wav");
        let r = request_tts(&ep, &prompt, "one two three four five six seven eight", &out).unwrap();
        assert!(r.duration_s > 0.5);
        assert!((r.duration_s - 3.2).abs() < 1e-3);
        assert!(matches!(
            request_tts(&ep, &prompt, "  ", &out),
            Err(BackendError::Precondition(_))
        ));
    }

    #[test]
    fn text_strategy_modes() {
        let f = TextStrategy::fixed(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(f.resolve_text("x", 1).unwrap(), "b");
        assert!(TextStrategy::fixed(vec!["a".into()]).is_err());
        let o = TextStrategy::parse_transcripts("u1 hello there\n").unwrap();
        assert_eq!(o.resolve_text("u1", 0).unwrap(), "hello there");
        let err = o.resolve_text("u2", 0).unwrap_err();
        assert!(err.to_string().contains("u2"));
    }

    #[test]
    fn cache_hits_after_first_call() {
        let dir = tempfile::tempdir().unwrap();
        let prompt = dir.path().join("p.wav");
        audio::write_wav(&prompt, &tone(1.0), SampleFormat::Pcm16).unwrap();
        let cache = TtsCache::new(dir.path().join("cache"));
        let ep = BackendEndpoint::mock("mock", BackendKind::Tts);
        let (p1, hit1) = cache.get_or_generate(&ep, &prompt, "hello world", 0).unwrap();
        let (p2, hit2) = cache.get_or_generate(&ep, &prompt, "hello world", 0).unwrap();
        assert!(!hit1 && hit2);
        assert_eq!(p1, p2);
        assert!(p1.starts_with(dir.path().join("cache").join("mock")));
        assert!(p1.file_name().unwrap().to_str().unwrap().ends_with("-0.wav"));
    }

    #[test]
    fn endpoint_validation() {
        let mut ep = BackendEndpoint::mock("", BackendKind::Embed);
        assert!(ep.validate().is_err());
        ep.name = "x".into();
        ep.timeout_s = 0.0;
        assert!(ep.validate().is_err());
        ep.timeout_s = 1.0;
        ep.transport = Transport::Http;
        assert!(ep.validate().is_err());
    }
}
