//! Embedding-level fusion of a bona-fide embedding `e_b` with one or more
//! TTS-generated embeddings `e_g`.
//!
//! | method          | fused embedding                          |
//! |-----------------|------------------------------------------|
//! | addition        | `e_b + e_g`                              |
//! | concatenation   | `[e_b, e_g]` (dimension `2d`)            |
//! | weighted mean   | `w * e_b + (1 - w) * e_g`                |
//! | attention gate  | `z ⊙ e_b + (1 - z) ⊙ e_g`, `z = σ(ATT)`  |
//!
//! With `normalize_inputs` (the default) every input is scaled to unit norm
//! first, so `w` means the same thing whatever the backend's output scale.
//! Fused vectors are not renormalized afterwards; cosine scoring does not care.

use crate::embedding::{
    check_same_dim, l2_normalize, norm, Embedding, VectorError, CONDITION_FUSED_PREFIX,
};
use crate::fsutil::atomic_write;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Outer weight on the bona-fide embedding found to be the most stable choice
/// across durations for two-stage fusion.
pub const DEFAULT_TWO_STAGE_WEIGHT: f64 = 0.6;
pub const DEFAULT_GATE_HIDDEN: usize = 256;
pub const GATE_MAGIC: &[u8; 5] = b"GATE1";

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("utterance mismatch: {0} vs {1}")]
    UttMismatch(String, String),
    #[error("fusion weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("gate network expects dim {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("no generated embeddings to fuse")]
    EmptyList,
    #[error("attention-gate fusion needs a gate network")]
    MissingGate,
    #[error("corrupt gate checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Addition,
    Concatenation,
    WeightedMean,
    AttentionGate,
}

impl FusionMethod {
    pub fn tag(self) -> &'static str {
        match self {
            FusionMethod::Addition => "add",
            FusionMethod::Concatenation => "concat",
            FusionMethod::WeightedMean => "wmean",
            FusionMethod::AttentionGate => "gate",
        }
    }

    pub fn condition(self) -> String {
        format!("{CONDITION_FUSED_PREFIX}{}", self.tag())
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Addition => "addition",
            FusionMethod::Concatenation => "concatenation",
            FusionMethod::WeightedMean => "weighted_mean",
            FusionMethod::AttentionGate => "attention_gate",
        })
    }
}

impl FromStr for FusionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "addition" | "add" => Ok(FusionMethod::Addition),
            "concatenation" | "concat" => Ok(FusionMethod::Concatenation),
            "weighted_mean" | "wmean" | "weighted" => Ok(FusionMethod::WeightedMean),
            "attention_gate" | "attention" | "gate" => Ok(FusionMethod::AttentionGate),
            other => Err(format!("unknown fusion method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Weight on the bona-fide embedding (weighted mean only).
    pub w: f64,
    pub normalize_inputs: bool,
}

impl FusionConfig {
    pub fn new(method: FusionMethod) -> Self {
        FusionConfig {
            method,
            w: 0.5,
            normalize_inputs: true,
        }
    }

    pub fn weighted(w: f64) -> Self {
        FusionConfig {
            method: FusionMethod::WeightedMean,
            w,
            normalize_inputs: true,
        }
    }
}

fn check_weight(w: f64) -> Result<(), FusionError> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(FusionError::WeightOutOfRange(w))
    }
}

fn check_pair(a: &Embedding, b: &Embedding) -> Result<(), FusionError> {
    if a.utt_id != b.utt_id {
        return Err(FusionError::UttMismatch(a.utt_id.clone(), b.utt_id.clone()));
    }
    check_same_dim(&a.values, &b.values)?;
    Ok(())
}

fn prepare(v: &[f32], normalize: bool) -> Result<Vec<f32>, VectorError> {
    if normalize {
        l2_normalize(v)
    } else {
        crate::embedding::check_finite(v)?;
        Ok(v.to_vec())
    }
}

fn fused(utt_id: &str, condition: String, values: Vec<f32>) -> Embedding {
    Embedding {
        utt_id: utt_id.to_string(),
        condition,
        values,
    }
}

/// `e_b + e_g`. A cancelling pair yields the zero vector; scoring rejects it.
pub fn fuse_addition(e_b: &Embedding, e_g: &Embedding, normalize: bool) -> Result<Embedding, FusionError> {
    check_pair(e_b, e_g)?;
    let b = prepare(&e_b.values, normalize)?;
    let g = prepare(&e_g.values, normalize)?;
    let values = b
        .iter()
        .zip(&g)
        .map(|(&x, &y)| (x as f64 + y as f64) as f32)
        .collect();
    Ok(fused(&e_b.utt_id, FusionMethod::Addition.condition(), values))
}

/// `[e_b, e_g]`, each half normalized independently when `normalize`.
pub fn fuse_concat(e_b: &Embedding, e_g: &Embedding, normalize: bool) -> Result<Embedding, FusionError> {
    check_pair(e_b, e_g)?;
    let mut values = prepare(&e_b.values, normalize)?;
    values.extend(prepare(&e_g.values, normalize)?);
    Ok(fused(&e_b.utt_id, FusionMethod::Concatenation.condition(), values))
}

/// `w * e_b + (1 - w) * e_g`.
///
/// At the vertices the selected input is passed through untouched (`w = 1`
/// returns `e_b`'s values, `w = 0` returns `e_g`'s), so boundary sweeps score
/// bit-identically to the unfused conditions.
pub fn fuse_weighted(
    e_b: &Embedding,
    e_g: &Embedding,
    w: f64,
    normalize: bool,
) -> Result<Embedding, FusionError> {
    check_weight(w)?;
    check_pair(e_b, e_g)?;
    let cond = FusionMethod::WeightedMean.condition();
    if w == 1.0 {
        crate::embedding::check_finite(&e_b.values)?;
        return Ok(fused(&e_b.utt_id, cond, e_b.values.clone()));
    }
    if w == 0.0 {
        crate::embedding::check_finite(&e_g.values)?;
        return Ok(fused(&e_b.utt_id, cond, e_g.values.clone()));
    }
    let b = prepare(&e_b.values, normalize)?;
    let g = prepare(&e_g.values, normalize)?;
    let values: Vec<f32> = b
        .iter()
        .zip(&g)
        .map(|(&x, &y)| (w * x as f64 + (1.0 - w) * y as f64) as f32)
        .collect();
    if norm(&values) == 0.0 {
        return Err(VectorError::ZeroVector.into());
    }
    Ok(fused(&e_b.utt_id, cond, values))
}

/// Fuses two TTS embeddings with `w_inner` (weight on `e_g1`), then fuses the
/// result with the bona-fide embedding using `w_outer` (weight on `e_b`).
pub fn two_stage_fuse(
    e_g1: &Embedding,
    e_g2: &Embedding,
    e_b: &Embedding,
    w_inner: f64,
    w_outer: f64,
    normalize: bool,
) -> Result<Embedding, FusionError> {
    check_weight(w_inner)?;
    check_weight(w_outer)?;
    let inner = fuse_weighted(e_g1, e_g2, w_inner, normalize)?;
    let mut out = fuse_weighted(e_b, &inner, w_outer, normalize)?;
    out.condition = format!("{CONDITION_FUSED_PREFIX}two_stage");
    Ok(out)
}

/// Averages several TTS embeddings of the same prompt (different texts),
/// normalizes the mean, then fuses it with `e_b` by weighted mean.
pub fn fuse_multi_text(
    e_b: &Embedding,
    gens: &[Embedding],
    w: f64,
    normalize: bool,
) -> Result<Embedding, FusionError> {
    check_weight(w)?;
    let first = gens.first().ok_or(FusionError::EmptyList)?;
    let d = first.dim();
    let mut acc = vec![0.0f64; d];
    for g in gens {
        check_pair(e_b, g)?;
        let v = prepare(&g.values, normalize)?;
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += *x as f64;
        }
    }
    let mean: Vec<f32> = acc.iter().map(|a| (a / gens.len() as f64) as f32).collect();
    let mean = Embedding {
        utt_id: e_b.utt_id.clone(),
        condition: first.condition.clone(),
        values: l2_normalize(&mean)?,
    };
    let mut out = fuse_weighted(e_b, &mean, w, normalize)?;
    out.condition = format!("{CONDITION_FUSED_PREFIX}multi_text");
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attention gate

/// Two-layer gate network: `z = σ(W2 · tanh(W1 · [e_b; e_g] + b1) + b2)`.
///
/// Matrices are row-major: `w1` is `hidden × 2d`, `w2` is `d × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate activations of one gate forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct GateActivations {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub z: Vec<f64>,
    pub fused: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GateNetwork {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        GateNetwork {
            dim,
            hidden,
            w1: vec![0.0; hidden * 2 * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; dim * hidden],
            b2: vec![0.0; dim],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut net = GateNetwork::zeros(dim, hidden);
        let a1 = 1.0 / ((2 * dim) as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        net.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        net.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        net
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn check_shapes(&self) -> Result<(), FusionError> {
        let ok = self.w1.len() == self.hidden * 2 * self.dim
            && self.b1.len() == self.hidden
            && self.w2.len() == self.dim * self.hidden
            && self.b2.len() == self.dim;
        if ok {
            Ok(())
        } else {
            Err(FusionError::Corrupt {
                offset: 0,
                reason: "tensor sizes inconsistent with dim/hidden".into(),
            })
        }
    }

    /// Forward pass on raw f64 vectors.
    pub fn activations(&self, e_b: &[f64], e_g: &[f64]) -> Result<GateActivations, FusionError> {
        for v in [e_b, e_g] {
            if v.len() != self.dim {
                return Err(FusionError::ShapeMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
        }
        let d2 = 2 * self.dim;
        let mut input = Vec::with_capacity(d2);
        input.extend_from_slice(e_b);
        input.extend_from_slice(e_g);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * d2..(j + 1) * d2];
                let a: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum();
                (a + self.b1[j]).tanh()
            })
            .collect();
        let z: Vec<f64> = (0..self.dim)
            .map(|i| {
                let row = &self.w2[i * self.hidden..(i + 1) * self.hidden];
                let a: f64 = row.iter().zip(&hidden).map(|(w, h)| w * h).sum();
                sigmoid(a + self.b2[i])
            })
            .collect();
        let fused = z
            .iter()
            .zip(e_b.iter().zip(e_g))
            .map(|(&zi, (&b, &g))| zi * b + (1.0 - zi) * g)
            .collect();
        Ok(GateActivations {
            input,
            hidden,
            z,
            fused,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = GATE_MAGIC.to_vec();
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for &x in t.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a `GATE1` block and returns the network plus the number of
    /// bytes consumed, so checkpoints can append further blocks.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize), FusionError> {
        let corrupt = |offset: usize, reason: &str| FusionError::Corrupt {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 13 || &bytes[..5] != GATE_MAGIC {
            return Err(corrupt(0, "missing GATE1 header"));
        }
        let u32_at = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        let dim = u32_at(5) as usize;
        let hidden = u32_at(9) as usize;
        let n = hidden
            .checked_mul(2 * dim)
            .and_then(|a| a.checked_add(hidden + dim * hidden + dim))
            .ok_or_else(|| corrupt(5, "shape overflow"))?;
        let end = 13 + 4 * n;
        if bytes.len() < end + 4 {
            return Err(corrupt(bytes.len(), "truncated gate tensors"));
        }
        if crc32fast::hash(&bytes[..end]) != u32_at(end) {
            return Err(corrupt(end, "checksum mismatch"));
        }
        let mut vals = bytes[13..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut take = |k: usize| -> Vec<f64> { (&mut vals).take(k).collect() };
        let net = GateNetwork {
            dim,
            hidden,
            w1: take(hidden * 2 * dim),
            b1: take(hidden),
            w2: take(dim * hidden),
            b2: take(dim),
        };
        net.check_shapes()?;
        Ok((net, end + 4))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FusionError> {
        let (net, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(FusionError::Corrupt {
                offset: used,
                reason: "trailing bytes after gate network".into(),
            });
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        Ok(atomic_write(path, &self.to_bytes())?)
    }

    /// Loads a bare gate file or the gate block at the start of a training
    /// checkpoint.
    pub fn load(path: &Path) -> Result<Self, FusionError> {
        Ok(Self::from_bytes_prefix(&std::fs::read(path)?)?.0)
    }
}

/// Gated fusion: returns the gate vector `z` and `z ⊙ e_b + (1 - z) ⊙ e_g`.
pub fn gate_forward(
    net: &GateNetwork,
    e_b: &Embedding,
    e_g: &Embedding,
    normalize: bool,
) -> Result<(Vec<f64>, Embedding), FusionError> {
    check_pair(e_b, e_g)?;
    let b: Vec<f64> = prepare(&e_b.values, normalize)?.iter().map(|&x| x as f64).collect();
    let g: Vec<f64> = prepare(&e_g.values, normalize)?.iter().map(|&x| x as f64).collect();
    let act = net.activations(&b, &g)?;
    let values = act.fused.iter().map(|&x| x as f32).collect();
    Ok((
        act.z,
        fused(&e_b.utt_id, FusionMethod::AttentionGate.condition(), values),
    ))
}

/// Applies `cfg` to one pair. `gate` is required for attention-gate fusion.
pub fn fuse(
    cfg: &FusionConfig,
    e_b: &Embedding,
    e_g: &Embedding,
    gate: Option<&GateNetwork>,
) -> Result<Embedding, FusionError> {
    match cfg.method {
        FusionMethod::Addition => fuse_addition(e_b, e_g, cfg.normalize_inputs),
        FusionMethod::Concatenation => fuse_concat(e_b, e_g, cfg.normalize_inputs),
        FusionMethod::WeightedMean => fuse_weighted(e_b, e_g, cfg.w, cfg.normalize_inputs),
        FusionMethod::AttentionGate => {
            let net = gate.ok_or(FusionError::MissingGate)?;
            Ok(gate_forward(net, e_b, e_g, cfg.normalize_inputs)?.1)
        }
    }
}
