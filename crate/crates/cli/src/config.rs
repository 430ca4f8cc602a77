//! Experiment configuration (TOML).
//!
//! ```toml
//! [dataset]
//! root = "wav"
//! trials = "trials.txt"
//! durations = [0.5, 1, 2, "full"]
//!
//! [[backend]]
//! name = "ecapa"
//! kind = "embed"
//! transport = "http"
//! address = "http://127.0.0.1:8001"
//!
//! [[backend]]
//! name = "cosyvoice"
//! kind = "tts"
//! transport = "subprocess"
//! address = "python serve_cosyvoice.py"
//!
//! [text]
//! mode = "fixed"
//! texts = ["...", "...", "..."]
//!
//! [fusion]
//! methods = ["weighted_mean", "two_stage"]
//! weights = [0.0, 0.5, 0.6, 1.0]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttasv::audio::{Anchor, SegmentDuration};
use ttasv::backends::{BackendEndpoint, BackendKind, TextStrategy};
use ttasv::fsutil::sha256_hex;
use ttasv::sim::SimConfig;

use crate::error::{config, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DurationValue {
    Seconds(f64),
    Label(String),
}

impl DurationValue {
    pub fn parse(&self) -> Result<SegmentDuration> {
        match self {
            DurationValue::Seconds(s) => format!("{s}").parse(),
            DurationValue::Label(l) => l.parse(),
        }
        .map_err(config)
    }
}

fn default_durations() -> Vec<DurationValue> {
    vec![
        DurationValue::Seconds(0.5),
        DurationValue::Seconds(1.0),
        DurationValue::Seconds(2.0),
        DurationValue::Label("full".into()),
    ]
}

fn default_anchor() -> String {
    "centered".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory the trial-list utterance ids are relative to.
    pub root: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    #[serde(default = "default_durations")]
    pub durations: Vec<DurationValue>,
    #[serde(default = "default_anchor")]
    pub anchor: String,
    /// Precomputed stores, one `<duration>.emb` per duration. When set, the
    /// segment, synthesize and embed stages are skipped.
    pub stores_dir: Option<PathBuf>,
    /// Also embed each segment tiled to 15 s (condition `rep15`).
    #[serde(default)]
    pub repeat_control: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: None,
            trials: None,
            durations: default_durations(),
            anchor: default_anchor(),
            stores_dir: None,
            repeat_control: false,
        }
    }
}

pub const DEFAULT_TEXTS: [&str; 3] = [
    "The quick brown fox jumps over the lazy dog; yes, she took my usual boy's chair and thinking hat.",
    "The girl went down the road with her bag to see the deep blue river at night with a fox.",
    "The cat ran to the red mat, and the man sat with his tan hat in the sun.",
];

fn default_mode() -> String {
    "fixed".into()
}

fn default_texts() -> Vec<String> {
    DEFAULT_TEXTS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_texts")]
    pub texts: Vec<String>,
    /// `<utt_id> <transcript>` lines, for `mode = "original"`.
    pub transcripts: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            mode: default_mode(),
            texts: default_texts(),
            transcripts: None,
        }
    }
}

pub const METHODS: [&str; 6] = [
    "weighted_mean",
    "addition",
    "concatenation",
    "attention_gate",
    "two_stage",
    "multi_text",
];

fn default_methods() -> Vec<String> {
    ["weighted_mean", "addition", "concatenation", "two_stage", "multi_text"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_weights() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_true() -> bool {
    true
}

fn default_inner() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionGrid {
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Weights on the bona-fide embedding for weighted-mean, two-stage and
    /// multi-text fusion.
    #[serde(default = "default_weights")]
    pub weights: Vec<f64>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Gate checkpoint, required by `attention_gate`.
    pub gate: Option<PathBuf>,
    /// Weight on the first TTS backend inside two-stage fusion.
    #[serde(default = "default_inner")]
    pub two_stage_inner: f64,
}

impl Default for FusionGrid {
    fn default() -> Self {
        FusionGrid {
            methods: default_methods(),
            weights: default_weights(),
            normalize: true,
            gate: None,
            two_stage_inner: default_inner(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default, rename = "backend")]
    pub backends: Vec<BackendEndpoint>,
    #[serde(default)]
    pub text: TextConfig,
    #[serde(default)]
    pub fusion: FusionGrid,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub run: RunConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config)
    }

    /// Reads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.root);
        resolve(base, &mut self.dataset.trials);
        resolve(base, &mut self.dataset.stores_dir);
        resolve(base, &mut self.text.transcripts);
        resolve(base, &mut self.fusion.gate);
        resolve(base, &mut self.run.output);
    }

    /// SHA-256 of the settings that determine results. Output location and
    /// parallelism are excluded.
    pub fn hash(&self) -> String {
        let value = serde_json::json!({
            "dataset": self.dataset,
            "backends": self.backends,
            "text": self.text,
            "fusion": self.fusion,
            "seed": self.run.seed,
        });
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn durations(&self) -> Result<Vec<SegmentDuration>> {
        if self.dataset.durations.is_empty() {
            return Err(CliError::Config("dataset.durations is empty".into()));
        }
        self.dataset.durations.iter().map(DurationValue::parse).collect()
    }

    pub fn anchor(&self) -> Result<Anchor> {
        self.dataset.anchor.parse().map_err(config)
    }

    pub fn embed_backend(&self) -> Result<&BackendEndpoint> {
        let mut it = self.backends.iter().filter(|b| b.kind == BackendKind::Embed);
        let first = it
            .next()
            .ok_or_else(|| CliError::Config("no [[backend]] with kind = \"embed\"".into()))?;
        if it.next().is_some() {
            return Err(CliError::Config("exactly one embed backend is supported".into()));
        }
        Ok(first)
    }

    pub fn tts_backends(&self) -> Vec<&BackendEndpoint> {
        self.backends.iter().filter(|b| b.kind == BackendKind::Tts).collect()
    }

    pub fn backend(&self, name: &str) -> Result<&BackendEndpoint> {
        self.backends
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| CliError::Config(format!("no backend named {name:?}")))
    }

    pub fn text_strategy(&self) -> Result<TextStrategy> {
        match self.text.mode.as_str() {
            "fixed" => TextStrategy::fixed(self.text.texts.clone()).map_err(config),
            "original" => {
                let path = self.text.transcripts.as_ref().ok_or_else(|| {
                    CliError::Config("text.mode = \"original\" needs text.transcripts".into())
                })?;
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                TextStrategy::parse_transcripts(&text).map_err(config)
            }
            other => Err(CliError::Config(format!("unknown text mode {other:?}"))),
        }
    }

    /// Checks everything `run` needs before any work starts.
    pub fn validate_for_run(&self) -> Result<()> {
        self.durations()?;
        self.anchor()?;
        for b in &self.backends {
            b.validate().map_err(config)?;
        }
        let mut names: Vec<&str> = self.backends.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("backend names must be unique".into()));
        }
        for m in &self.fusion.methods {
            if !METHODS.contains(&m.as_str()) {
                return Err(CliError::Config(format!("unknown fusion method {m:?}")));
            }
        }
        if self.fusion.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(CliError::Config("fusion weights must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.fusion.two_stage_inner) {
            return Err(CliError::Config("fusion.two_stage_inner must lie in [0, 1]".into()));
        }
        if self.fusion.methods.iter().any(|m| m == "attention_gate") {
            match &self.fusion.gate {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(CliError::Config(format!("gate {} not found", p.display()))),
                None => return Err(CliError::Config("attention_gate needs fusion.gate".into())),
            }
        }
        let trials = self
            .dataset
            .trials
            .as_ref()
            .ok_or_else(|| CliError::Config("dataset.trials is not set".into()))?;
        if !trials.is_file() {
            return Err(CliError::Config(format!("trial list {} not found", trials.display())));
        }
        if let Some(dir) = &self.dataset.stores_dir {
            if !dir.is_dir() {
                return Err(CliError::Config(format!("stores_dir {} not found", dir.display())));
            }
            return Ok(());
        }
        match &self.dataset.root {
            Some(r) if r.is_dir() => {}
            Some(r) => return Err(CliError::Config(format!("dataset root {} not found", r.display()))),
            None => return Err(CliError::Config("dataset.root is not set".into())),
        }
        self.embed_backend()?;
        self.text_strategy()?;
        Ok(())
    }
}
