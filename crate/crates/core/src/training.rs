//! Training of the attention-gate fusion network.
//!
//! The fused embedding `e_s = z ⊙ e_b + (1 - z) ⊙ e_g` is classified by an
//! additive-angular-margin softmax head, the standard ECAPA-TDNN speaker
//! classifier:
//!
//! ```text
//! cos θ_j = <e_s / |e_s|, w_j / |w_j|>
//! logit_y = s · cos(θ_y + m),   logit_j = s · cos θ_j  (j ≠ y)
//! loss    = -log softmax(logits)_y
//! ```
//!
//! All gradients are derived by hand; [`grad_check`] compares them with
//! central finite differences over every parameter tensor.

use crate::embedding::{l2_normalize_f64, Embedding, VectorError};
use crate::fusion::{GateNetwork, FusionError, GATE_MAGIC};
use crate::fsutil::atomic_write;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_SCALE: f64 = 30.0;
pub const CLASSIFIER_MAGIC: &[u8; 4] = b"AAM1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("label {label} out of range for {num_speakers} speakers")]
    LabelOutOfRange { label: usize, num_speakers: usize },
    #[error("training needs at least two speakers, found {0}")]
    TooFewSpeakers(usize),
    #[error("inconsistent dimensions: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Additive-angular-margin softmax classifier. Rows of `weights` are kept at
/// unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AamClassifier {
    pub num_speakers: usize,
    pub dim: usize,
    /// Row-major `num_speakers × dim`.
    pub weights: Vec<f64>,
    pub margin: f64,
    pub scale: f64,
}

impl AamClassifier {
    /// Builds a classifier from raw rows, normalizing each.
    pub fn from_rows(rows: &[Vec<f64>], margin: f64, scale: f64) -> Result<Self, TrainError> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.is_empty() || dim == 0 {
            return Err(TrainError::Shape("classifier needs at least one row".into()));
        }
        let mut weights = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(TrainError::Shape(format!("row of dim {} vs {dim}", r.len())));
            }
            weights.extend(l2_normalize_f64(r)?);
        }
        Ok(AamClassifier {
            num_speakers: rows.len(),
            dim,
            weights,
            margin,
            scale,
        })
    }

    /// Rows from an embedding file: one record per speaker, in file order.
    pub fn from_embeddings<'a>(
        rows: impl IntoIterator<Item = &'a Embedding>,
        margin: f64,
        scale: f64,
    ) -> Result<Self, TrainError> {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|e| e.values.iter().map(|&x| x as f64).collect())
            .collect();
        Self::from_rows(&rows, margin, scale)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn renormalize_rows(&mut self) {
        for j in 0..self.num_speakers {
            let row = &mut self.weights[j * self.dim..(j + 1) * self.dim];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CLASSIFIER_MAGIC.to_vec();
        out.extend_from_slice(&(self.num_speakers as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.margin as f32).to_le_bytes());
        out.extend_from_slice(&(self.scale as f32).to_le_bytes());
        for &w in &self.weights {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |offset: usize, reason: &str| TrainError::Corrupt {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..4] != CLASSIFIER_MAGIC {
            return Err(corrupt(0, "missing AAM1 header"));
        }
        let u32_at = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        let f32_at = |at: usize| f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        let n = u32_at(4) as usize;
        let dim = u32_at(8) as usize;
        let count = n.checked_mul(dim).ok_or_else(|| corrupt(4, "shape overflow"))?;
        let end = 20 + 4 * count;
        if bytes.len() != end + 4 {
            return Err(corrupt(bytes.len().min(end), "classifier block has wrong length"));
        }
        if crc32fast::hash(&bytes[..end]) != u32_at(end) {
            return Err(corrupt(end, "checksum mismatch"));
        }
        Ok(AamClassifier {
            num_speakers: n,
            dim,
            margin: f32_at(12) as f64,
            scale: f32_at(16) as f64,
            weights: (0..count).map(|i| f32_at(20 + 4 * i) as f64).collect(),
        })
    }
}

/// Loss and gradients of the AAM softmax for one embedding.
#[derive(Debug, Clone)]
pub struct AamOutput {
    pub loss: f64,
    /// d loss / d e_s (un-normalized input).
    pub grad_embedding: Vec<f64>,
    /// d loss / d weights (row-major, w.r.t. the raw rows).
    pub grad_weights: Vec<f64>,
    /// Predicted class (argmax of margin-free cosine).
    pub predicted: usize,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Additive-angular-margin softmax loss with analytic gradients.
pub fn aam_loss(e_s: &[f64], label: usize, clf: &AamClassifier) -> Result<AamOutput, TrainError> {
    if label >= clf.num_speakers {
        return Err(TrainError::LabelOutOfRange {
            label,
            num_speakers: clf.num_speakers,
        });
    }
    if e_s.len() != clf.dim {
        return Err(TrainError::Shape(format!(
            "embedding dim {} vs classifier dim {}",
            e_s.len(),
            clf.dim
        )));
    }
    let x_norm = e_s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if x_norm == 0.0 || !x_norm.is_finite() {
        return Err(VectorError::ZeroVector.into());
    }
    let xn: Vec<f64> = e_s.iter().map(|x| x / x_norm).collect();
    let (s, m) = (clf.scale, clf.margin);
    let (cos_m, sin_m) = (m.cos(), m.sin());

    let mut w_norms = Vec::with_capacity(clf.num_speakers);
    let mut cosines = Vec::with_capacity(clf.num_speakers);
    for j in 0..clf.num_speakers {
        let row = clf.row(j);
        let wn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return Err(VectorError::ZeroVector.into());
        }
        w_norms.push(wn);
        cosines.push(row.iter().zip(&xn).map(|(w, x)| w * x).sum::<f64>() / wn);
    }
    let c_y = cosines[label];
    let sin_y = (1.0 - c_y * c_y).max(0.0).sqrt();
    let mut logits: Vec<f64> = cosines.iter().map(|c| s * c).collect();
    logits[label] = s * (c_y * cos_m - sin_y * sin_m);
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[label];

    // d loss / d cos_j
    let mut d_cos: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    d_cos[label] -= 1.0;
    for (j, d) in d_cos.iter_mut().enumerate() {
        *d *= if j == label {
            s * (cos_m + sin_m * c_y / sin_y.max(1e-12))
        } else {
            s
        };
    }

    let mut grad_embedding = vec![0.0; clf.dim];
    let mut grad_weights = vec![0.0; clf.weights.len()];
    for j in 0..clf.num_speakers {
        let row = clf.row(j);
        let wn = w_norms[j];
        let c = cosines[j];
        let g = d_cos[j];
        if g == 0.0 {
            continue;
        }
        for k in 0..clf.dim {
            let w_unit = row[k] / wn;
            grad_embedding[k] += g * (w_unit - c * xn[k]) / x_norm;
            grad_weights[j * clf.dim + k] = g * (xn[k] - c * w_unit) / wn;
        }
    }
    let predicted = cosines
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, &c)| if c > best.1 { (j, c) } else { best })
        .0;
    Ok(AamOutput {
        loss,
        grad_embedding,
        grad_weights,
        predicted,
    })
}

// ---------------------------------------------------------------------------
// End-to-end gradients

/// One training example: bona-fide and generated embeddings of the same
/// utterance and the speaker index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub e_b: Vec<f64>,
    pub e_g: Vec<f64>,
    pub label: usize,
}

/// Gradients for every trainable tensor, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub classifier: Vec<f64>,
}

impl Gradients {
    pub fn zeros(net: &GateNetwork, clf: &AamClassifier) -> Self {
        Gradients {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
            classifier: vec![0.0; clf.weights.len()],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Vec<f64>); 5] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("classifier", &self.classifier),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.classifier,
        ]
    }

    fn add_scaled(&mut self, other: &Gradients, k: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.1).for_each(|(x, y)| *x += k * y);
        }
    }
}

/// Loss of one sample through gate and classifier.
pub fn sample_loss(net: &GateNetwork, clf: &AamClassifier, sample: &TrainSample) -> Result<f64, TrainError> {
    let act = net.activations(&sample.e_b, &sample.e_g)?;
    Ok(aam_loss(&act.fused, sample.label, clf)?.loss)
}

/// Loss and analytic gradients of one sample.
pub fn analytic_gradients(
    net: &GateNetwork,
    clf: &AamClassifier,
    sample: &TrainSample,
) -> Result<(AamOutput, Gradients), TrainError> {
    let act = net.activations(&sample.e_b, &sample.e_g)?;
    let out = aam_loss(&act.fused, sample.label, clf)?;
    let (d, h) = (net.dim, net.hidden);
    let mut g = Gradients::zeros(net, clf);
    // e_s = z*b + (1-z)*g  ->  dL/dz = dL/de_s * (b - g);  z = σ(a2)
    let d_a2: Vec<f64> = (0..d)
        .map(|i| {
            let z = act.z[i];
            out.grad_embedding[i] * (sample.e_b[i] - sample.e_g[i]) * z * (1.0 - z)
        })
        .collect();
    let mut d_hidden = vec![0.0; h];
    for i in 0..d {
        g.b2[i] = d_a2[i];
        for j in 0..h {
            g.w2[i * h + j] = d_a2[i] * act.hidden[j];
            d_hidden[j] += net.w2[i * h + j] * d_a2[i];
        }
    }
    let d2 = 2 * d;
    for j in 0..h {
        let d_a1 = d_hidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
        g.b1[j] = d_a1;
        for k in 0..d2 {
            g.w1[j * d2 + k] = d_a1 * act.input[k];
        }
    }
    g.classifier.copy_from_slice(&out.grad_weights);
    Ok((out, g))
}

/// Central finite-difference gradients with step `h` for every parameter.
pub fn numeric_gradients(
    net: &GateNetwork,
    clf: &AamClassifier,
    sample: &TrainSample,
    h: f64,
) -> Result<Gradients, TrainError> {
    let mut g = Gradients::zeros(net, clf);
    let mut net = net.clone();
    let mut clf = clf.clone();
    macro_rules! probe {
        ($param:expr, $grad:expr) => {
            for i in 0..$param.len() {
                let orig = $param[i];
                $param[i] = orig + h;
                let up = sample_loss(&net, &clf, sample)?;
                $param[i] = orig - h;
                let down = sample_loss(&net, &clf, sample)?;
                $param[i] = orig;
                $grad[i] = (up - down) / (2.0 * h);
            }
        };
    }
    probe!(net.w1, g.w1);
    probe!(net.b1, g.b1);
    probe!(net.w2, g.w2);
    probe!(net.b2, g.b2);
    probe!(clf.weights, g.classifier);
    Ok(g)
}

/// Floor on the relative-error denominator. Central differences at
/// `h = 1e-4` carry roundoff of order `1e-12`, so entries smaller than this
/// are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Largest elementwise `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)` over
/// all tensors.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst = 0.0f64;
    for ((_, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (&x, &y) in a.iter().zip(n.iter()) {
            let scale = x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR);
            let e = (x - y).abs() / scale;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
    }
    worst
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares end-to-end analytic gradients with central finite differences.
pub fn grad_check(net: &GateNetwork, clf: &AamClassifier, sample: &TrainSample) -> Result<f64, TrainError> {
    let (_, analytic) = analytic_gradients(net, clf, sample)?;
    let numeric = numeric_gradients(net, clf, sample, GRAD_CHECK_STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub validation_fraction: f64,
    pub hidden: usize,
    pub normalize_inputs: bool,
    pub train_classifier: bool,
    pub margin: f64,
    pub scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 128,
            seed: 0,
            momentum: 0.9,
            validation_fraction: 0.1,
            hidden: crate::fusion::DEFAULT_GATE_HIDDEN,
            normalize_inputs: true,
            train_classifier: true,
            margin: DEFAULT_MARGIN,
            scale: DEFAULT_SCALE,
        }
    }
}

/// One row of the training log (`epoch,split,loss,accuracy`).
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn format_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.accuracy));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub gate: GateNetwork,
    pub classifier: AamClassifier,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

/// Mean loss and accuracy over `idx`.
pub fn evaluate(
    net: &GateNetwork,
    clf: &AamClassifier,
    samples: &[TrainSample],
    idx: &[usize],
) -> Result<(f64, f64), TrainError> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in idx {
        let act = net.activations(&samples[i].e_b, &samples[i].e_g)?;
        let out = aam_loss(&act.fused, samples[i].label, clf)?;
        loss += out.loss;
        correct += (out.predicted == samples[i].label) as usize;
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// Converts `(e_b, e_g, speaker)` triples to training samples, normalizing
/// inputs when configured.
pub fn make_samples(
    pairs: &[(Embedding, Embedding, usize)],
    normalize: bool,
) -> Result<Vec<TrainSample>, TrainError> {
    let conv = |e: &Embedding| -> Result<Vec<f64>, TrainError> {
        let v: Vec<f64> = e.values.iter().map(|&x| x as f64).collect();
        Ok(if normalize { l2_normalize_f64(&v)? } else { v })
    };
    pairs
        .iter()
        .map(|(b, g, label)| {
            if b.dim() != g.dim() {
                return Err(TrainError::Shape(format!(
                    "{}: e_b dim {} vs e_g dim {}",
                    b.utt_id,
                    b.dim(),
                    g.dim()
                )));
            }
            Ok(TrainSample {
                e_b: conv(b)?,
                e_g: conv(g)?,
                label: *label,
            })
        })
        .collect()
}

/// Classifier rows set to the normalized mean bona-fide embedding per class.
pub fn class_mean_classifier(
    samples: &[TrainSample],
    num_speakers: usize,
    margin: f64,
    scale: f64,
) -> Result<AamClassifier, TrainError> {
    let dim = samples[0].e_b.len();
    let mut rows = vec![vec![0.0; dim]; num_speakers];
    for s in samples {
        rows[s.label].iter_mut().zip(&s.e_b).for_each(|(r, x)| *r += x);
    }
    for (j, r) in rows.iter_mut().enumerate() {
        if r.iter().all(|&x| x == 0.0) {
            // no examples for this class; any fixed unit direction will do
            r[j % dim] = 1.0;
        }
    }
    AamClassifier::from_rows(&rows, margin, scale)
}

/// Trains the gate (and, optionally, the classifier) by minibatch SGD with
/// momentum. Deterministic for a fixed seed. Returns the parameters with the
/// lowest held-out loss seen, including the initial ones.
pub fn train_gate(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    init_classifier: Option<AamClassifier>,
) -> Result<TrainOutcome, TrainError> {
    if !(cfg.learning_rate >= 0.0) || cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(TrainError::Config(format!(
            "learning_rate {} epochs {} batch_size {} hidden {}",
            cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.hidden
        )));
    }
    let mut labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(TrainError::TooFewSpeakers(labels.len()));
    }
    let dim = samples[0].e_b.len();
    if let Some(bad) = samples.iter().find(|s| s.e_b.len() != dim || s.e_g.len() != dim) {
        return Err(TrainError::Shape(format!(
            "sample with dims {}/{} vs {dim}",
            bad.e_b.len(),
            bad.e_g.len()
        )));
    }
    let num_speakers = labels.last().copied().unwrap_or(0) + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = GateNetwork::random(dim, cfg.hidden, &mut rng);
    let mut clf = match init_classifier {
        Some(c) => {
            if c.dim != dim || c.num_speakers < num_speakers {
                return Err(TrainError::Shape(format!(
                    "initial classifier is {}x{}, data needs {num_speakers}x{dim}",
                    c.num_speakers, c.dim
                )));
            }
            c
        }
        None => class_mean_classifier(samples, num_speakers, cfg.margin, cfg.scale)?,
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.validation_fraction).round() as usize)
        .max(1)
        .min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut log = Vec::new();
    let (tl, ta) = evaluate(&net, &clf, samples, &train_idx)?;
    let (vl, va) = evaluate(&net, &clf, samples, &val_idx)?;
    log.push(LogRow { epoch: 0, split: "train", loss: tl, accuracy: ta });
    log.push(LogRow { epoch: 0, split: "val", loss: vl, accuracy: va });
    let mut best = (vl, 0usize, net.clone(), clf.clone());

    let mut velocity = Gradients::zeros(&net, &clf);
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            let mut grad = Gradients::zeros(&net, &clf);
            for &i in batch {
                let (_, g) = analytic_gradients(&net, &clf, &samples[i])?;
                grad.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            let mut v_tensors = velocity.tensors_mut();
            let g_tensors = grad.tensors();
            let params: [&mut Vec<f64>; 5] = [
                &mut net.w1,
                &mut net.b1,
                &mut net.w2,
                &mut net.b2,
                &mut clf.weights,
            ];
            for (k, p) in params.into_iter().enumerate() {
                if k == 4 && !cfg.train_classifier {
                    continue;
                }
                let v = &mut v_tensors[k];
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g_tensors[k].1) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
            if cfg.train_classifier && cfg.learning_rate > 0.0 {
                clf.renormalize_rows();
            }
        }
        let (tl, ta) = evaluate(&net, &clf, samples, &train_idx)?;
        let (vl, va) = evaluate(&net, &clf, samples, &val_idx)?;
        log.push(LogRow { epoch, split: "train", loss: tl, accuracy: ta });
        log.push(LogRow { epoch, split: "val", loss: vl, accuracy: va });
        if vl < best.0 {
            best = (vl, epoch, net.clone(), clf.clone());
        }
    }
    Ok(TrainOutcome {
        gate: best.2,
        classifier: best.3,
        best_epoch: best.1,
        log,
    })
}

/// Checkpoint: the `GATE1` block followed by the `AAM1` classifier block.
pub fn checkpoint_bytes(gate: &GateNetwork, clf: &AamClassifier) -> Vec<u8> {
    let mut out = gate.to_bytes();
    out.extend(clf.to_bytes());
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(GateNetwork, AamClassifier), TrainError> {
    if !bytes.starts_with(GATE_MAGIC) {
        return Err(TrainError::Corrupt {
            offset: 0,
            reason: "missing GATE1 header".into(),
        });
    }
    let (gate, used) = GateNetwork::from_bytes_prefix(bytes)?;
    let clf = AamClassifier::from_bytes(&bytes[used..]).map_err(|e| match e {
        TrainError::Corrupt { offset, reason } => TrainError::Corrupt {
            offset: offset + used,
            reason,
        },
        other => other,
    })?;
    Ok((gate, clf))
}

pub fn save_checkpoint(path: &Path, gate: &GateNetwork, clf: &AamClassifier) -> Result<(), TrainError> {
    Ok(atomic_write(path, &checkpoint_bytes(gate, clf))?)
}

pub fn load_checkpoint(path: &Path) -> Result<(GateNetwork, AamClassifier), TrainError> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize_f64(v).unwrap()
    }

    #[test]
    fn closed_form_aligned_orthogonal() {
        // label 0 aligned with e_s, two orthogonal classes, m = 0, s = 1
        let clf = AamClassifier::from_rows(
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            0.0,
            1.0,
        )
        .unwrap();
        let out = aam_loss(&[2.0, 0.0, 0.0], 0, &clf).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.5514).abs() < 1e-4);
        assert_eq!(out.predicted, 0);
    }

    #[test]
    fn closed_form_equidistant_others() {
        // others at cosine c = 0.5 from the embedding
        let c: f64 = 0.5;
        let s3 = (1.0 - c * c).sqrt();
        let clf = AamClassifier::from_rows(
            &[vec![1.0, 0.0, 0.0], vec![c, s3, 0.0], vec![c, 0.0, s3]],
            0.0,
            1.0,
        )
        .unwrap();
        let out = aam_loss(&[1.0, 0.0, 0.0], 0, &clf).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0 * c.exp())).ln();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn margin_increases_loss() {
        let rows = vec![vec![0.8, 0.6, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let x = [1.0, 0.2, 0.1];
        let mut prev = f64::NEG_INFINITY;
        for m in [0.0, 0.1, 0.2, 0.3, 0.5] {
            let clf = AamClassifier::from_rows(&rows, m, 30.0).unwrap();
            let l = aam_loss(&x, 0, &clf).unwrap().loss;
            assert!(l > prev, "m={m}: {l} <= {prev}");
            prev = l;
        }
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let clf = AamClassifier::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.2, 30.0).unwrap();
        assert!(matches!(
            aam_loss(&[0.0, 0.0], 0, &clf),
            Err(TrainError::Vector(VectorError::ZeroVector))
        ));
        assert!(matches!(
            aam_loss(&[1.0, 0.0], 2, &clf),
            Err(TrainError::LabelOutOfRange { .. })
        ));
    }

    fn random_setup(seed: u64) -> (GateNetwork, AamClassifier, TrainSample) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, k) = (8, 4, 5);
        let mut net = GateNetwork::random(d, h, &mut rng);
        net.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        net.b2.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let clf = AamClassifier::from_rows(&rows, DEFAULT_MARGIN, DEFAULT_SCALE).unwrap();
        let sample = TrainSample {
            e_b: unit(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()),
            e_g: unit(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()),
            label: rng.random_range(0..k),
        };
        (net, clf, sample)
    }

    #[test]
    fn aam_embedding_gradient_matches_finite_differences() {
        let (_, clf, sample) = random_setup(5);
        let out = aam_loss(&sample.e_b, sample.label, &clf).unwrap();
        let h = 1e-5;
        for k in 0..sample.e_b.len() {
            let mut up = sample.e_b.clone();
            up[k] += h;
            let mut dn = sample.e_b.clone();
            dn[k] -= h;
            let num = (aam_loss(&up, sample.label, &clf).unwrap().loss
                - aam_loss(&dn, sample.label, &clf).unwrap().loss)
                / (2.0 * h);
            let a = out.grad_embedding[k];
            assert!((a - num).abs() <= 1e-5 * a.abs().max(num.abs()).max(1.0), "k={k}: {a} vs {num}");
        }
    }

    #[test]
    fn grad_check_passes_on_random_net() {
        for seed in 0..10 {
            let (net, clf, sample) = random_setup(seed);
            let err = grad_check(&net, &clf, &sample).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn grad_check_detects_sign_flip() {
        let (net, clf, sample) = random_setup(1);
        let (_, mut a) = analytic_gradients(&net, &clf, &sample).unwrap();
        a.w2.iter_mut().for_each(|g| *g = -*g);
        let n = numeric_gradients(&net, &clf, &sample, GRAD_CHECK_STEP).unwrap();
        assert!(max_relative_error(&a, &n) > 0.1);
    }

    #[test]
    fn grad_check_zero_net_is_finite() {
        let (_, clf, sample) = random_setup(2);
        let net = GateNetwork::zeros(8, 4);
        let err = grad_check(&net, &clf, &sample).unwrap();
        assert!(err.is_finite());
        assert!(err < 1e-4);
    }

    #[test]
    fn classifier_bytes_round_trip() {
        let (net, clf, _) = random_setup(3);
        let bytes = checkpoint_bytes(&net, &clf);
        let (g2, c2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&g2, &c2), bytes);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    fn two_speaker_samples() -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let centers = [unit(&[1.0, 0.2, 0.0, 0.0]), unit(&[0.0, 0.1, 1.0, 0.3])];
        (0..40)
            .map(|i| {
                let c = &centers[i % 2];
                let noisy = |rng: &mut ChaCha8Rng| {
                    unit(&c.iter().map(|x| x + rng.random_range(-0.4..0.4)).collect::<Vec<_>>())
                };
                TrainSample {
                    e_b: noisy(&mut rng),
                    e_g: noisy(&mut rng),
                    label: i % 2,
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_gate_unchanged() {
        let samples = two_speaker_samples();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 8,
            hidden: 4,
            ..TrainConfig::default()
        };
        let out = train_gate(&samples, &cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = GateNetwork::random(4, 4, &mut rng);
        assert_eq!(out.gate, init);
    }

    #[test]
    fn single_speaker_is_rejected() {
        let mut samples = two_speaker_samples();
        samples.iter_mut().for_each(|s| s.label = 0);
        assert!(matches!(
            train_gate(&samples, &TrainConfig::default(), None),
            Err(TrainError::TooFewSpeakers(1))
        ));
    }

    #[test]
    fn log_csv_shape() {
        let rows = [LogRow { epoch: 1, split: "train", loss: 0.5, accuracy: 1.0 }];
        assert_eq!(format_log_csv(&rows), "epoch,split,loss,accuracy\n1,train,0.5,1\n");
    }
}
