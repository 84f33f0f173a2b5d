//! Audio-sequence fusion kernels over precomputed embeddings: an avg-pool
//! late-fusion baseline and an attention fusion where the CLS embedding
//! anchors a scaled softmax over the audio rows. Includes the softmax
//! classification head, analytic gradients, a central-difference gradient
//! checker, and a deterministic mini-batch toy trainer.
//!
//! Avg-pool fuses as `concat(h_cls, mean(audio))`; attention fuses as
//! `concat(softmax(audio . a / sqrt(d_A)) . audio, h_cls)` with
//! `a = P . h_cls`. The anchor projection `P` makes the kernel usable when
//! the CLS and audio widths differ; left out, the identity is used and the
//! widths must match. All arithmetic is f64.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, EvalReport, MetricError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("audio sequence is empty")]
    EmptyAudio,
    #[error("{what}: expected {want}, got {got}")]
    DimMismatch { what: &'static str, want: usize, got: usize },
    #[error("anchor projection absent but d_cls {d_cls} != d_audio {d_audio}")]
    MissingAnchor { d_cls: usize, d_audio: usize },
    #[error("non-finite value in forward pass of sample {id:?}")]
    NonFinite { id: String },
    #[error("label {label} outside [0, {}]", classes - 1)]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged (loss not finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Fusion mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    AvgPool,
    Attention,
}

/// One affine layer, weight laid out `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(out: usize, input: usize) -> Self {
        Affine { weight: vec![vec![0.0; input]; out], bias: vec![0.0; out] }
    }

    fn seeded(out: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / input as f64).sqrt();
        Affine {
            weight: (0..out)
                .map(|_| (0..input).map(|_| rng.random_range(-scale..scale)).collect())
                .collect(),
            bias: vec![0.0; out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Parameters of the fusion classifier: optional anchor projection
/// (`d_audio x d_cls`) and the MLP head mapping the fused vector to class
/// logits. Serializes to JSON with explicit shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub d_cls: usize,
    pub d_audio: usize,
    pub classes: usize,
    /// `None` means the fixed identity; only valid when `d_cls == d_audio`.
    pub anchor: Option<Vec<Vec<f64>>>,
    pub layers: Vec<Affine>,
}

impl FusionParams {
    /// Seeded head with the default 3-layer shape (hidden widths: fused
    /// length, then 4 * classes) and a learned anchor initialized to the
    /// identity when square, seeded-random otherwise.
    pub fn seeded(d_cls: usize, d_audio: usize, classes: usize, seed: u64) -> Self {
        let fused = d_cls + d_audio;
        Self::seeded_with_hidden(d_cls, d_audio, classes, &[fused, 4 * classes], true, seed)
    }

    /// Seeded parameters with explicit hidden widths; `learned_anchor`
    /// false keeps the fixed identity (square dims only).
    pub fn seeded_with_hidden(
        d_cls: usize,
        d_audio: usize,
        classes: usize,
        hidden: &[usize],
        learned_anchor: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor = if learned_anchor {
            Some(if d_cls == d_audio {
                (0..d_audio)
                    .map(|i| (0..d_cls).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect()
            } else {
                let scale = (1.0 / d_cls as f64).sqrt();
                (0..d_audio)
                    .map(|_| (0..d_cls).map(|_| rng.random_range(-scale..scale)).collect())
                    .collect()
            })
        } else {
            None
        };
        let mut widths = vec![d_cls + d_audio];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let layers = widths
            .windows(2)
            .map(|w| Affine::seeded(w[1], w[0], &mut rng))
            .collect();
        FusionParams { d_cls, d_audio, classes, anchor, layers }
    }

    /// All-zero head of the same shape (uniform output), for tests and
    /// reference points.
    pub fn zeroed_like(&self) -> Self {
        FusionParams {
            d_cls: self.d_cls,
            d_audio: self.d_audio,
            classes: self.classes,
            anchor: self.anchor.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Affine::zeros(l.bias.len(), l.weight[0].len()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One fusion training/eval item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSample {
    pub id: String,
    pub audio: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
    pub label: usize,
}

fn check_audio(audio: &[Vec<f64>], d_audio: usize) -> Result<(), FusionError> {
    if audio.is_empty() {
        return Err(FusionError::EmptyAudio);
    }
    for row in audio {
        if row.len() != d_audio {
            return Err(FusionError::DimMismatch {
                what: "audio row",
                want: d_audio,
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// Late-fusion baseline: `concat(h_cls, mean(audio rows))`.
pub fn avg_pool_fuse(audio: &[Vec<f64>], h_cls: &[f64]) -> Result<Vec<f64>, FusionError> {
    if audio.is_empty() {
        return Err(FusionError::EmptyAudio);
    }
    let d_audio = audio[0].len();
    check_audio(audio, d_audio)?;
    let mut fused = h_cls.to_vec();
    let t = audio.len() as f64;
    for j in 0..d_audio {
        fused.push(audio.iter().map(|row| row[j]).sum::<f64>() / t);
    }
    Ok(fused)
}

/// Max-subtracted softmax.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn anchor_apply(params: &FusionParams, h_cls: &[f64]) -> Result<Vec<f64>, FusionError> {
    match &params.anchor {
        Some(p) => {
            if p[0].len() != h_cls.len() {
                return Err(FusionError::DimMismatch {
                    what: "anchor input",
                    want: p[0].len(),
                    got: h_cls.len(),
                });
            }
            Ok(p.iter().map(|row| row.iter().zip(h_cls).map(|(w, v)| w * v).sum()).collect())
        }
        None => {
            if params.d_cls != params.d_audio {
                return Err(FusionError::MissingAnchor {
                    d_cls: params.d_cls,
                    d_audio: params.d_audio,
                });
            }
            Ok(h_cls.to_vec())
        }
    }
}

/// Attention fusion: weights `softmax(audio . (P h_cls) / sqrt(d_A))` pool
/// the audio rows; the result is `concat(pooled, h_cls)`. Weights are
/// returned for inspection.
pub fn attention_fuse(
    params: &FusionParams,
    audio: &[Vec<f64>],
    h_cls: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), FusionError> {
    check_audio(audio, params.d_audio)?;
    if h_cls.len() != params.d_cls {
        return Err(FusionError::DimMismatch {
            what: "h_cls",
            want: params.d_cls,
            got: h_cls.len(),
        });
    }
    if h_cls.iter().any(|v| !v.is_finite())
        || audio.iter().any(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(FusionError::NonFinite { id: String::new() });
    }
    let a = anchor_apply(params, h_cls)?;
    let scale = (params.d_audio as f64).sqrt();
    let logits: Vec<f64> = audio
        .iter()
        .map(|row| row.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() / scale)
        .collect();
    let weights = softmax(&logits);
    let mut pooled = vec![0.0; params.d_audio];
    for (w, row) in weights.iter().zip(audio) {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += w * v;
        }
    }
    let mut fused = pooled;
    fused.extend_from_slice(h_cls);
    Ok((fused, weights))
}

/// Head forward: affine layers with tanh between them, softmax on the final
/// logits.
pub fn classify(params: &FusionParams, fused: &[f64]) -> Result<Vec<f64>, FusionError> {
    let expected = params.layers[0].weight[0].len();
    if fused.len() != expected {
        return Err(FusionError::DimMismatch { what: "fused input", want: expected, got: fused.len() });
    }
    let mut x = fused.to_vec();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        x = layer.apply(&x);
        if l < last {
            for v in x.iter_mut() {
                *v = v.tanh();
            }
        }
    }
    Ok(softmax(&x))
}

/// Fuse one sample under `mode` and classify it.
pub fn fuse_and_classify(
    params: &FusionParams,
    sample: &FusionSample,
    mode: FusionMode,
) -> Result<Vec<f64>, FusionError> {
    let fused = match mode {
        FusionMode::AvgPool => avg_pool_fuse(&sample.audio, &sample.embedding)?,
        FusionMode::Attention => attention_fuse(params, &sample.audio, &sample.embedding)?.0,
    };
    classify(params, &fused)
}

/// Gradients for every trainable parameter; `anchor` is `None` in avg-pool
/// mode (nothing flows through it) or when the anchor is the fixed identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub anchor: Option<Vec<Vec<f64>>>,
    pub layers: Vec<Affine>,
}

/// Mean cross-entropy over the batch plus analytic gradients. Audio rows and
/// embeddings are inputs, not parameters.
pub fn loss_and_grads(
    params: &FusionParams,
    batch: &[FusionSample],
    mode: FusionMode,
) -> Result<(f64, FusionGrads), FusionError> {
    if batch.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    let train_anchor = mode == FusionMode::Attention && params.anchor.is_some();
    let mut grads = FusionGrads {
        anchor: train_anchor.then(|| vec![vec![0.0; params.d_cls]; params.d_audio]),
        layers: params
            .layers
            .iter()
            .map(|l| Affine::zeros(l.bias.len(), l.weight[0].len()))
            .collect(),
    };
    let mut total_loss = 0.0;
    let scale = (params.d_audio as f64).sqrt();
    for sample in batch {
        if sample.label >= params.classes {
            return Err(FusionError::LabelOutOfRange {
                label: sample.label,
                classes: params.classes,
            });
        }
        // Forward, keeping what backward needs.
        let (fused, weights) = match mode {
            FusionMode::AvgPool => (avg_pool_fuse(&sample.audio, &sample.embedding)?, Vec::new()),
            FusionMode::Attention => attention_fuse(params, &sample.audio, &sample.embedding)
                .map_err(|e| match e {
                    FusionError::NonFinite { .. } => {
                        FusionError::NonFinite { id: sample.id.clone() }
                    }
                    other => other,
                })?,
        };
        let mut activations: Vec<Vec<f64>> = vec![fused.clone()];
        let last = params.layers.len() - 1;
        for (l, layer) in params.layers.iter().enumerate() {
            let mut x = layer.apply(activations.last().unwrap());
            if l < last {
                for v in x.iter_mut() {
                    *v = v.tanh();
                }
            }
            activations.push(x);
        }
        let probs = softmax(activations.last().unwrap());
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(FusionError::NonFinite { id: sample.id.clone() });
        }
        let p_label = probs[sample.label];
        let loss = -p_label.max(f64::MIN_POSITIVE).ln();
        total_loss += loss;

        // Backward through the head.
        let mut delta: Vec<f64> = probs;
        delta[sample.label] -= 1.0;
        for l in (0..params.layers.len()).rev() {
            let input = &activations[l];
            let grad_layer = &mut grads.layers[l];
            for (row, (g_row, g_bias)) in
                grad_layer.weight.iter_mut().zip(&mut grad_layer.bias).enumerate()
            {
                for (g, v) in g_row.iter_mut().zip(input) {
                    *g += delta[row] * v;
                }
                *g_bias += delta[row];
            }
            if l == 0 {
                // Gradient w.r.t. the fused vector.
                let mut dfused = vec![0.0; input.len()];
                for (row, d) in params.layers[l].weight.iter().zip(&delta) {
                    for (g, w) in dfused.iter_mut().zip(row) {
                        *g += d * w;
                    }
                }
                if train_anchor {
                    // Only the pooled half depends on the anchor.
                    let dpooled = &dfused[..params.d_audio];
                    let dweights: Vec<f64> = sample
                        .audio
                        .iter()
                        .map(|row| row.iter().zip(dpooled).map(|(v, g)| v * g).sum())
                        .collect();
                    let weighted_sum: f64 =
                        weights.iter().zip(&dweights).map(|(w, d)| w * d).sum();
                    let dlogits: Vec<f64> = weights
                        .iter()
                        .zip(&dweights)
                        .map(|(w, d)| w * (d - weighted_sum))
                        .collect();
                    let mut da = vec![0.0; params.d_audio];
                    for (dz, row) in dlogits.iter().zip(&sample.audio) {
                        for (g, v) in da.iter_mut().zip(row) {
                            *g += dz * v / scale;
                        }
                    }
                    let anchor_grad = grads.anchor.as_mut().unwrap();
                    for (g_row, d) in anchor_grad.iter_mut().zip(&da) {
                        for (g, h) in g_row.iter_mut().zip(&sample.embedding) {
                            *g += d * h;
                        }
                    }
                }
            } else {
                let mut dx = vec![0.0; input.len()];
                for (row, d) in params.layers[l].weight.iter().zip(&delta) {
                    for (g, w) in dx.iter_mut().zip(row) {
                        *g += d * w;
                    }
                }
                // tanh' through the stored post-activation.
                delta = dx.iter().zip(input).map(|(g, x)| g * (1.0 - x * x)).collect();
            }
        }
    }
    let b = batch.len() as f64;
    total_loss /= b;
    for layer in &mut grads.layers {
        for row in &mut layer.weight {
            for g in row {
                *g /= b;
            }
        }
        for g in &mut layer.bias {
            *g /= b;
        }
    }
    if let Some(anchor) = &mut grads.anchor {
        for row in anchor {
            for g in row {
                *g /= b;
            }
        }
    }
    Ok((total_loss, grads))
}

fn flatten_layout(params: &FusionParams, mode: FusionMode) -> Vec<(&'static str, usize)> {
    let mut layout = Vec::new();
    if mode == FusionMode::Attention && params.anchor.is_some() {
        layout.push(("anchor", params.d_audio * params.d_cls));
    }
    for layer in &params.layers {
        layout.push(("weight", layer.bias.len() * layer.weight[0].len()));
        layout.push(("bias", layer.bias.len()));
    }
    layout
}

fn flatten_params(params: &FusionParams, mode: FusionMode) -> Vec<f64> {
    let mut flat = Vec::new();
    if mode == FusionMode::Attention {
        if let Some(anchor) = &params.anchor {
            flat.extend(anchor.iter().flatten());
        }
    }
    for layer in &params.layers {
        flat.extend(layer.weight.iter().flatten());
        flat.extend(&layer.bias);
    }
    flat
}

fn unflatten_params(template: &FusionParams, mode: FusionMode, flat: &[f64]) -> FusionParams {
    let mut params = template.clone();
    let mut i = 0;
    let mut take = |n: usize| {
        let s = &flat[i..i + n];
        i += n;
        s.to_vec()
    };
    if mode == FusionMode::Attention {
        if let Some(anchor) = &mut params.anchor {
            for row in anchor.iter_mut() {
                let vals = take(row.len());
                row.copy_from_slice(&vals);
            }
        }
    }
    for layer in &mut params.layers {
        for row in &mut layer.weight {
            let vals = take(row.len());
            row.copy_from_slice(&vals);
        }
        let vals = take(layer.bias.len());
        layer.bias.copy_from_slice(&vals);
    }
    params
}

fn flatten_grads(params: &FusionParams, grads: &FusionGrads, mode: FusionMode) -> Vec<f64> {
    let mut flat = Vec::new();
    if mode == FusionMode::Attention && params.anchor.is_some() {
        flat.extend(grads.anchor.as_ref().expect("anchor grads present").iter().flatten());
    }
    for layer in &grads.layers {
        flat.extend(layer.weight.iter().flatten());
        flat.extend(&layer.bias);
    }
    flat
}

/// Result of a gradient check: the worst relative error and where it was.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: String,
    pub checked: usize,
    pub total_params: usize,
}

/// Denominator floor for the relative error: coordinates with tiny gradients
/// are compared semi-absolutely instead of amplifying finite-difference
/// noise.
const REL_ERROR_FLOOR: f64 = 1e-2;

/// Above this many parameters, check a seeded random subset instead of every
/// coordinate.
const FULL_CHECK_LIMIT: usize = 10_000;

fn coordinate_name(params: &FusionParams, mode: FusionMode, index: usize) -> String {
    let mut remaining = index;
    for (name, len) in flatten_layout(params, mode) {
        if remaining < len {
            return format!("{name}[{remaining}]");
        }
        remaining -= len;
    }
    format!("param[{index}]")
}

/// Central-difference check of `loss_and_grads` over every parameter (or a
/// seeded subset of 10k+ models). Relative error uses a small denominator
/// floor so near-zero gradients do not amplify rounding noise.
pub fn grad_check(
    params: &FusionParams,
    batch: &[FusionSample],
    mode: FusionMode,
    step: f64,
) -> Result<GradCheckReport, FusionError> {
    let (_, grads) = loss_and_grads(params, batch, mode)?;
    let analytic = flatten_grads(params, &grads, mode);
    let flat = flatten_params(params, mode);
    let total = flat.len();
    let indices: Vec<usize> = if total > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
        (0..FULL_CHECK_LIMIT).map(|_| rng.random_range(0..total)).collect()
    } else {
        (0..total).collect()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: String::new(),
        checked: indices.len(),
        total_params: total,
    };
    let mut probe = flat.clone();
    for &i in &indices {
        let original = probe[i];
        probe[i] = original + step;
        let (loss_plus, _) =
            loss_and_grads(&unflatten_params(params, mode, &probe), batch, mode)?;
        probe[i] = original - step;
        let (loss_minus, _) =
            loss_and_grads(&unflatten_params(params, mode, &probe), batch, mode)?;
        probe[i] = original;
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = coordinate_name(params, mode, i);
        }
    }
    Ok(report)
}

/// Same check against an externally supplied (possibly corrupted) gradient
/// vector, for fault-injection tests.
pub fn grad_check_against(
    params: &FusionParams,
    batch: &[FusionSample],
    mode: FusionMode,
    step: f64,
    candidate: &[f64],
) -> Result<GradCheckReport, FusionError> {
    let flat = flatten_params(params, mode);
    let total = flat.len();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: String::new(),
        checked: total,
        total_params: total,
    };
    let mut probe = flat.clone();
    for i in 0..total {
        let original = probe[i];
        probe[i] = original + step;
        let (loss_plus, _) =
            loss_and_grads(&unflatten_params(params, mode, &probe), batch, mode)?;
        probe[i] = original - step;
        let (loss_minus, _) =
            loss_and_grads(&unflatten_params(params, mode, &probe), batch, mode)?;
        probe[i] = original;
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let denom = candidate[i].abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (candidate[i] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = coordinate_name(params, mode, i);
        }
    }
    Ok(report)
}

/// Flat analytic gradient in checker order, for fault injection.
pub fn flat_gradient(
    params: &FusionParams,
    batch: &[FusionSample],
    mode: FusionMode,
) -> Result<Vec<f64>, FusionError> {
    let (_, grads) = loss_and_grads(params, batch, mode)?;
    Ok(flatten_grads(params, &grads, mode))
}

/// Toy trainer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig { learning_rate: 0.5, epochs: 30, batch_size: 32, seed: 0 }
    }
}

/// Trained parameters with the held-out report (binarized on label > 0) and
/// argmax test accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyOutcome {
    pub params: FusionParams,
    pub report: EvalReport,
    pub test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

fn apply_update(params: &mut FusionParams, grads: &FusionGrads, lr: f64) {
    if let (Some(anchor), Some(grad)) = (&mut params.anchor, &grads.anchor) {
        for (row, g_row) in anchor.iter_mut().zip(grad) {
            for (w, g) in row.iter_mut().zip(g_row) {
                *w -= lr * g;
            }
        }
    }
    for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
        for (row, g_row) in layer.weight.iter_mut().zip(&grad.weight) {
            for (w, g) in row.iter_mut().zip(g_row) {
                *w -= lr * g;
            }
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

/// Evaluate trained params on a labeled sample slice: binary report on
/// label > 0 with score `sum of p_c for c > 0`, plus argmax accuracy.
pub fn evaluate_fusion(
    params: &FusionParams,
    samples: &[FusionSample],
    mode: FusionMode,
) -> Result<(EvalReport, f64), FusionError> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    for sample in samples {
        let probs = fuse_and_classify(params, sample, mode)?;
        scores.push(probs.iter().skip(1).sum());
        labels.push(sample.label > 0);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == sample.label {
            correct += 1;
        }
    }
    let mut report =
        metrics::evaluate_binary(&scores, &labels, 0.5, &metrics::DEFAULT_PRECISION_TARGETS)?;
    let accuracy = correct as f64 / samples.len() as f64;
    report.accuracy = Some(accuracy);
    Ok((report, accuracy))
}

/// Deterministic mini-batch training from seeded initial parameters.
pub fn train_toy(
    train: &[FusionSample],
    test: &[FusionSample],
    initial: FusionParams,
    config: &ToyTrainConfig,
    mode: FusionMode,
) -> Result<ToyOutcome, FusionError> {
    if train.is_empty() || test.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    // Bad input data is a data error; a NaN forward pass during training,
    // with inputs known finite, is divergence.
    for sample in train.iter().chain(test) {
        let finite = sample.embedding.iter().all(|v| v.is_finite())
            && sample.audio.iter().all(|row| row.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(FusionError::NonFinite { id: sample.id.clone() });
        }
    }
    let mut params = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<FusionSample> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = match loss_and_grads(&params, &batch, mode) {
                Ok(out) => out,
                // A NaN forward pass mid-training means the step size blew
                // the parameters up.
                Err(FusionError::NonFinite { .. }) => {
                    return Err(FusionError::Diverged { epoch })
                }
                Err(other) => return Err(other),
            };
            if !loss.is_finite() {
                return Err(FusionError::Diverged { epoch });
            }
            apply_update(&mut params, &grads, config.learning_rate);
            epoch_loss += loss;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);
    }
    let (report, test_accuracy) = evaluate_fusion(&params, test, mode)?;
    Ok(ToyOutcome { params, report, test_accuracy, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_hand_cases() {
        let h = vec![9.0, 8.0];
        // Single row: concat(h, the row).
        let fused = avg_pool_fuse(&[vec![1.0, 2.0]], &h).unwrap();
        assert_eq!(fused, vec![9.0, 8.0, 1.0, 2.0]);
        // Identical rows collapse to that row.
        let fused = avg_pool_fuse(&[vec![5.0, 6.0], vec![5.0, 6.0]], &h).unwrap();
        assert_eq!(fused, vec![9.0, 8.0, 5.0, 6.0]);
        // Mean arithmetic.
        let fused = avg_pool_fuse(&[vec![1.0, 3.0], vec![3.0, 5.0]], &h).unwrap();
        assert_eq!(fused, vec![9.0, 8.0, 2.0, 4.0]);
        assert!(matches!(avg_pool_fuse(&[], &h), Err(FusionError::EmptyAudio)));
    }

    fn identity_params(d: usize, classes: usize) -> FusionParams {
        // Fixed identity anchor, single linear layer head of zeros.
        FusionParams {
            d_cls: d,
            d_audio: d,
            classes,
            anchor: None,
            layers: vec![Affine::zeros(classes, 2 * d)],
        }
    }

    #[test]
    fn attention_singleton_and_uniform() {
        let params = identity_params(2, 2);
        let h = vec![1.0, 0.0];
        let (fused, weights) = attention_fuse(&params, &[vec![3.0, 4.0]], &h).unwrap();
        assert_eq!(weights, vec![1.0]);
        assert_eq!(fused, vec![3.0, 4.0, 1.0, 0.0]);

        let rows = vec![vec![2.0, 2.0]; 4];
        let (fused, weights) = attention_fuse(&params, &rows, &h).unwrap();
        for w in &weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert!((fused[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_scalar_hand_value() {
        // d_A = 1, rows [0] and [1], anchor output a = [1]: logits [0, 1].
        let params = identity_params(1, 2);
        let (fused, weights) =
            attention_fuse(&params, &[vec![0.0], vec![1.0]], &[1.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((weights[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((weights[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((fused[0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((weights[0] - 0.2689414).abs() < 1e-6);
    }

    #[test]
    fn zero_head_is_uniform_and_probs_normalize() {
        let params = identity_params(2, 4);
        let probs = classify(&params, &[0.3, -0.7, 0.2, 0.9]).unwrap();
        for p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let seeded = FusionParams::seeded(3, 5, 4, 11);
        let probs = classify(&seeded, &[0.25; 8]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classify_matches_hand_rolled_forward() {
        // 1-layer head, independently recomputed with scalar arithmetic.
        let params = FusionParams {
            d_cls: 1,
            d_audio: 1,
            classes: 2,
            anchor: None,
            layers: vec![Affine { weight: vec![vec![0.5, -1.0], vec![0.25, 0.75]], bias: vec![0.1, -0.2] }],
        };
        let fused = [2.0, 1.0];
        let probs = classify(&params, &fused).unwrap();
        let z0: f64 = 0.5 * 2.0 - 1.0 * 1.0 + 0.1;
        let z1: f64 = 0.25 * 2.0 + 0.75 * 1.0 - 0.2;
        let m = z0.max(z1);
        let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
        assert!((probs[0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((probs[1] - e1 / (e0 + e1)).abs() < 1e-15);
    }

    fn toy_batch(seed: u64, t: usize, d_audio: usize, d_cls: usize, n: usize, classes: usize) -> Vec<FusionSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| FusionSample {
                id: format!("s{i}"),
                audio: (0..t)
                    .map(|_| (0..d_audio).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
                embedding: (0..d_cls).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: rng.random_range(0..classes),
            })
            .collect()
    }

    #[test]
    fn uniform_prediction_loss_is_ln_c() {
        let params = FusionParams::seeded(3, 4, 4, 5).zeroed_like();
        let batch = toy_batch(1, 3, 4, 3, 6, 4);
        let (loss, _) = loss_and_grads(&params, &batch, FusionMode::Attention).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_sample_keeps_gradient() {
        let params = FusionParams::seeded(3, 4, 4, 7);
        let batch = toy_batch(2, 3, 4, 3, 1, 4);
        let doubled = vec![batch[0].clone(), batch[0].clone()];
        let (l1, g1) = loss_and_grads(&params, &batch, FusionMode::Attention).unwrap();
        let (l2, g2) = loss_and_grads(&params, &doubled, FusionMode::Attention).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in flatten_grads(&params, &g1, FusionMode::Attention)
            .iter()
            .zip(flatten_grads(&params, &g2, FusionMode::Attention).iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_full_attention_model() {
        let params = FusionParams::seeded(6, 8, 4, 41);
        let batch = toy_batch(42, 5, 8, 6, 4, 4);
        let report = grad_check(&params, &batch, FusionMode::Attention, 1e-4).unwrap();
        assert!(
            report.max_rel_error <= 1e-5,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst_coordinate
        );
        assert_eq!(report.checked, report.total_params);
    }

    #[test]
    fn grad_check_avg_pool_model() {
        let params = FusionParams::seeded(6, 8, 4, 43);
        let batch = toy_batch(44, 5, 8, 6, 4, 4);
        let report = grad_check(&params, &batch, FusionMode::AvgPool, 1e-4).unwrap();
        assert!(report.max_rel_error <= 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn grad_check_linear_head_near_exact() {
        // Linear (single-layer) head, 2 classes: the near-exact FD regime.
        let mut params = FusionParams::seeded_with_hidden(2, 2, 2, &[], false, 3);
        for row in &mut params.layers[0].weight {
            for w in row.iter_mut() {
                *w *= 0.5;
            }
        }
        let batch = toy_batch(4, 3, 2, 2, 8, 2);
        let report = grad_check(&params, &batch, FusionMode::Attention, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let params = FusionParams::seeded(6, 8, 4, 45);
        let batch = toy_batch(46, 5, 8, 6, 4, 4);
        let mut grad = flat_gradient(&params, &batch, FusionMode::Attention).unwrap();
        let worst = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap();
        grad[worst] *= 2.0;
        let report =
            grad_check_against(&params, &batch, FusionMode::Attention, 1e-4, &grad).unwrap();
        assert!(report.max_rel_error > 0.3, "{}", report.max_rel_error);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let initial = FusionParams::seeded(3, 4, 2, 10);
        let data = toy_batch(11, 3, 4, 3, 12, 2);
        let cfg = ToyTrainConfig { epochs: 0, ..Default::default() };
        let out = train_toy(&data, &data, initial.clone(), &cfg, FusionMode::AvgPool).unwrap();
        assert_eq!(out.params, initial);
    }

    #[test]
    fn permutation_of_audio_rows() {
        let params = FusionParams::seeded(4, 4, 3, 21);
        let batch = toy_batch(22, 6, 4, 4, 1, 3);
        let sample = &batch[0];
        let mut permuted = sample.clone();
        permuted.audio.rotate_left(2);

        let mean_a = avg_pool_fuse(&sample.audio, &sample.embedding).unwrap();
        let mean_b = avg_pool_fuse(&permuted.audio, &permuted.embedding).unwrap();
        for (a, b) in mean_a.iter().zip(&mean_b) {
            assert!((a - b).abs() < 1e-12);
        }

        let (fused_a, weights_a) =
            attention_fuse(&params, &sample.audio, &sample.embedding).unwrap();
        let (fused_b, weights_b) =
            attention_fuse(&params, &permuted.audio, &permuted.embedding).unwrap();
        let mut rotated = weights_a.clone();
        rotated.rotate_left(2);
        for (a, b) in rotated.iter().zip(&weights_b) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fused_a.iter().zip(&fused_b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn params_json_round_trip() {
        let params = FusionParams::seeded(6, 8, 4, 77);
        let back = FusionParams::from_json(&params.to_json()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn nan_input_reports_the_sample_id() {
        let params = FusionParams::seeded(3, 4, 2, 8);
        let mut batch = toy_batch(9, 3, 4, 3, 2, 2);
        batch[1].audio[1][2] = f64::NAN;
        let err = loss_and_grads(&params, &batch, FusionMode::Attention).unwrap_err();
        match err {
            FusionError::NonFinite { id } => assert_eq!(id, "s1"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn oversized_model_checks_a_seeded_subset() {
        // ~12k parameters: the checker samples instead of sweeping.
        let params = FusionParams::seeded_with_hidden(40, 40, 4, &[120], true, 5);
        let batch = toy_batch(6, 3, 40, 40, 2, 4);
        let report = grad_check(&params, &batch, FusionMode::Attention, 1e-4).unwrap();
        assert!(report.total_params > 10_000, "{} params", report.total_params);
        assert_eq!(report.checked, 10_000);
        assert!(report.max_rel_error <= 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn null_task_auc_hovers_at_chance() {
        // Labels independent of inputs: held-out AUC must sit near 0.5.
        for seed in 0..5u64 {
            let train = toy_batch(100 + seed, 4, 6, 5, 400, 2);
            let test = toy_batch(200 + seed, 4, 6, 5, 600, 2);
            let init = FusionParams::seeded(5, 6, 2, seed);
            let cfg = ToyTrainConfig { epochs: 8, ..Default::default() };
            let out = train_toy(&train, &test, init, &cfg, FusionMode::Attention).unwrap();
            assert!(
                (0.4..=0.6).contains(&out.report.auc),
                "seed {seed}: null-task AUC {}",
                out.report.auc
            );
        }
    }

    #[test]
    fn poisoned_parameters_report_divergence_with_epoch() {
        let train = toy_batch(31, 4, 6, 5, 64, 2);
        let mut init = FusionParams::seeded(5, 6, 2, 1);
        init.anchor.as_mut().unwrap()[0][0] = f64::NAN;
        let cfg = ToyTrainConfig { epochs: 3, ..Default::default() };
        match train_toy(&train, &train, init, &cfg, FusionMode::Attention) {
            Err(FusionError::Diverged { epoch }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_training_input_names_the_sample() {
        let mut train = toy_batch(32, 4, 6, 5, 8, 2);
        train[3].embedding[0] = f64::INFINITY;
        let init = FusionParams::seeded(5, 6, 2, 1);
        match train_toy(&train, &train, init, &ToyTrainConfig::default(), FusionMode::Attention) {
            Err(FusionError::NonFinite { id }) => assert_eq!(id, "s3"),
            other => panic!("expected a data error, got {other:?}"),
        }
    }
}
