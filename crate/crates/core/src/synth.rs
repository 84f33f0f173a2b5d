//! Synthetic corpora with planted structure: well-separated class clusters,
//! boundary clusters where the scorer is genuinely uncertain, and planted
//! hard clusters whose generative label disagrees with the cluster-implied
//! prediction at high confidence. Also the needle-in-audio task for the
//! fusion trainers.
//!
//! Everything is a pure function of the config seed.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{DataError, SampleRecord, SampleSet};
use crate::fusion::FusionSample;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("embedding dim {dim} must be at least the class count {classes}")]
    DimTooSmall { dim: usize, classes: usize },
    #[error("fractions must lie in [0, 1]: {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Needle-in-audio layout attached to generated records: one carrier row
/// holds the binarized label payload among pure-noise distractor rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioTaskSpec {
    /// Distractor rows; the sequence length is `distractors + 1`.
    pub distractors: usize,
    pub d_audio: usize,
    /// Scale of the fixed carrier direction in the needle row.
    pub carrier_strength: f64,
    /// Scale of the signed label payload in the needle row.
    pub needle_strength: f64,
    /// Per-coordinate noise scale of distractor rows.
    pub distractor_noise: f64,
}

impl Default for AudioTaskSpec {
    fn default() -> Self {
        AudioTaskSpec {
            distractors: 16,
            d_audio: 8,
            carrier_strength: 2.5,
            needle_strength: 2.5,
            distractor_noise: 0.7,
        }
    }
}

/// Synthetic corpus configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub seed: u64,
    pub embedding_dim: usize,
    pub classes: usize,
    /// Tight clusters per class centered near the class prototype.
    pub clusters_per_class: usize,
    /// Per-coordinate spread of samples around their cluster center.
    pub cluster_spread: f64,
    /// Distance of each class prototype from the origin.
    pub prototype_scale: f64,
    pub labeled_count: usize,
    pub pool_count: usize,
    pub heldout_count: usize,
    /// Fraction of samples landing in planted hard clusters (confident-wrong
    /// pattern).
    pub hard_fraction: f64,
    /// Number of planted hard clusters.
    pub hard_clusters: usize,
    /// Distance from each hard cluster to its correctly-predicted twin core
    /// cluster. Small enough that k-NN from a hard seed mixes both, large
    /// enough that a linear model can tell them apart.
    pub twin_offset: f64,
    /// Fraction of samples landing in boundary clusters (genuinely uncertain
    /// scorer output).
    pub boundary_fraction: f64,
    /// Sharpness of the generative scorer's distance-to-prototype softmax.
    pub scorer_sharpness: f64,
    pub audio: Option<AudioTaskSpec>,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            seed: 0,
            embedding_dim: 16,
            classes: 4,
            clusters_per_class: 3,
            cluster_spread: 0.35,
            prototype_scale: 4.0,
            labeled_count: 600,
            pool_count: 3000,
            heldout_count: 600,
            hard_fraction: 0.10,
            hard_clusters: 3,
            twin_offset: 0.9,
            boundary_fraction: 0.15,
            scorer_sharpness: 0.15,
            audio: None,
        }
    }
}

/// Generated corpus: a labeled snapshot, an unlabeled candidate pool with
/// its labels withheld under `oracle`, and a labeled held-out split.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub labeled: SampleSet,
    pub pool: SampleSet,
    pub heldout: SampleSet,
    pub oracle: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClusterKind {
    Core,
    Boundary,
    Hard,
}

struct Cluster {
    center: Vec<f64>,
    kind: ClusterKind,
    /// Oracle labels: core samples take `primary`; boundary samples flip
    /// between `primary` and `secondary`; hard samples take `primary` while
    /// the scorer confidently says otherwise.
    primary: usize,
    secondary: usize,
    weight: f64,
}

fn prototype(class: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    p[class] = scale;
    p
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn jittered(center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    center.iter().map(|c| c + spread * gaussian(rng)).collect()
}

/// The fixed generative scorer: softmax over classes of the negative scaled
/// squared distance to each class prototype.
fn score_embedding(embedding: &[f64], prototypes: &[Vec<f64>], sharpness: f64) -> Vec<f64> {
    let logits: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            let d2: f64 = embedding.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            -sharpness * d2
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn build_clusters(cfg: &SyntheticCorpusConfig, rng: &mut ChaCha8Rng) -> Vec<Cluster> {
    let prototypes: Vec<Vec<f64>> =
        (0..cfg.classes).map(|c| prototype(c, cfg.embedding_dim, cfg.prototype_scale)).collect();
    let mut clusters = Vec::new();
    let core_weight = (1.0 - cfg.hard_fraction - cfg.boundary_fraction)
        / (cfg.classes * cfg.clusters_per_class) as f64;
    let mut core_centers: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.classes);
    for (class, proto) in prototypes.iter().enumerate() {
        let mut centers = Vec::with_capacity(cfg.clusters_per_class);
        for _ in 0..cfg.clusters_per_class {
            let center = jittered(proto, 0.5, rng);
            clusters.push(Cluster {
                center: center.clone(),
                kind: ClusterKind::Core,
                primary: class,
                secondary: class,
                weight: core_weight,
            });
            centers.push(center);
        }
        core_centers.push(centers);
    }
    // One boundary cluster per class pair (c, c+1 mod C): centered midway,
    // scorer splits between the two, oracle labels flip between them.
    let boundary_weight = cfg.boundary_fraction / cfg.classes as f64;
    for class in 0..cfg.classes {
        let other = (class + 1) % cfg.classes;
        let center: Vec<f64> = prototypes[class]
            .iter()
            .zip(&prototypes[other])
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        clusters.push(Cluster {
            center: jittered(&center, 0.2, rng),
            kind: ClusterKind::Boundary,
            primary: class,
            secondary: other,
            weight: boundary_weight,
        });
    }
    // Planted hard clusters: each sits next to a correctly-predicted twin
    // core cluster of its apparent class, so the scorer is confidently wrong
    // about the oracle label and k-NN from a hard seed picks up both twins.
    let hard_weight = if cfg.hard_clusters > 0 {
        cfg.hard_fraction / cfg.hard_clusters as f64
    } else {
        0.0
    };
    // All hard clusters share one offset direction, making the planted
    // pattern coherent in latent space (a single linear probe can carry it).
    let mut direction: Vec<f64> = (0..cfg.embedding_dim).map(|_| gaussian(rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in direction.iter_mut() {
        *v /= norm;
    }
    for j in 0..cfg.hard_clusters {
        let apparent = (cfg.classes - 1 + j) % cfg.classes;
        let mut truth = (apparent + 2 + j) % cfg.classes;
        if truth == apparent {
            truth = (truth + 1) % cfg.classes;
        }
        let twin = &core_centers[apparent][j % cfg.clusters_per_class];
        let center: Vec<f64> = twin
            .iter()
            .zip(&direction)
            .map(|(c, d)| c + cfg.twin_offset * d)
            .collect();
        clusters.push(Cluster {
            center,
            kind: ClusterKind::Hard,
            primary: truth,
            secondary: truth,
            weight: hard_weight,
        });
    }
    clusters
}

fn pick_cluster<'a>(clusters: &'a [Cluster], rng: &mut ChaCha8Rng) -> &'a Cluster {
    let total: f64 = clusters.iter().map(|c| c.weight).sum();
    let mut draw = rng.random_range(0.0..total);
    for cluster in clusters {
        if draw < cluster.weight {
            return cluster;
        }
        draw -= cluster.weight;
    }
    clusters.last().expect("at least one cluster")
}

fn needle_audio(
    spec: &AudioTaskSpec,
    binary_label: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let rows = spec.distractors + 1;
    let needle_at = rng.random_range(0..rows);
    let sign = if binary_label { 1.0 } else { -1.0 };
    (0..rows)
        .map(|r| {
            if r == needle_at {
                (0..spec.d_audio)
                    .map(|j| {
                        let carrier = if j == 0 { spec.carrier_strength } else { 0.0 };
                        let payload = if j == 1 { sign * spec.needle_strength } else { 0.0 };
                        carrier + payload + 0.1 * gaussian(rng)
                    })
                    .collect()
            } else {
                (0..spec.d_audio).map(|_| spec.distractor_noise * gaussian(rng)).collect()
            }
        })
        .collect()
}

/// Generate a corpus. Identical configs produce byte-identical corpora.
pub fn generate_synthetic_corpus(
    cfg: &SyntheticCorpusConfig,
) -> Result<SyntheticCorpus, SynthError> {
    if cfg.classes < 2 {
        return Err(SynthError::TooFewClasses(cfg.classes));
    }
    if cfg.embedding_dim < cfg.classes {
        return Err(SynthError::DimTooSmall { dim: cfg.embedding_dim, classes: cfg.classes });
    }
    for fraction in [cfg.hard_fraction, cfg.boundary_fraction] {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(SynthError::BadFraction(fraction));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<f64>> =
        (0..cfg.classes).map(|c| prototype(c, cfg.embedding_dim, cfg.prototype_scale)).collect();
    let clusters = build_clusters(cfg, &mut rng);

    let draw_record = |id: String, rng: &mut ChaCha8Rng| -> (SampleRecord, usize) {
        let cluster = pick_cluster(&clusters, rng);
        let embedding = jittered(&cluster.center, cfg.cluster_spread, rng);
        let probs = score_embedding(&embedding, &prototypes, cfg.scorer_sharpness);
        let label = match cluster.kind {
            ClusterKind::Boundary => {
                if rng.random_range(0.0..1.0) < 0.5 {
                    cluster.primary
                } else {
                    cluster.secondary
                }
            }
            _ => cluster.primary,
        };
        let mut record = SampleRecord::new(id, embedding, probs);
        if let Some(spec) = &cfg.audio {
            record.audio = Some(needle_audio(spec, label > 0, rng));
        }
        (record, label)
    };

    let mut labeled = Vec::with_capacity(cfg.labeled_count);
    for i in 0..cfg.labeled_count {
        let (record, label) = draw_record(format!("L{i:05}"), &mut rng);
        labeled.push(record.with_label(label));
    }
    let mut pool = Vec::with_capacity(cfg.pool_count);
    let mut oracle = BTreeMap::new();
    for i in 0..cfg.pool_count {
        let (record, label) = draw_record(format!("P{i:05}"), &mut rng);
        oracle.insert(record.id.clone(), label);
        pool.push(record);
    }
    let mut heldout = Vec::with_capacity(cfg.heldout_count);
    for i in 0..cfg.heldout_count {
        let (record, label) = draw_record(format!("H{i:05}"), &mut rng);
        heldout.push(record.with_label(label));
    }
    Ok(SyntheticCorpus {
        labeled: SampleSet::new(labeled)?,
        pool: SampleSet::new(pool)?,
        heldout: SampleSet::new(heldout)?,
        oracle,
    })
}

/// Needle-in-audio task configuration for the fusion trainers. Embeddings
/// carry no label signal (a constant coordinate plus noise); only the needle
/// audio row does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeedleTaskConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub d_cls: usize,
    pub cls_noise: f64,
    pub audio: AudioTaskSpec,
}

impl Default for NeedleTaskConfig {
    fn default() -> Self {
        NeedleTaskConfig {
            seed: 0,
            train_count: 1500,
            test_count: 600,
            d_cls: 8,
            cls_noise: 0.3,
            audio: AudioTaskSpec::default(),
        }
    }
}

/// Unstructured random fusion samples, for gradient checks and smoke runs.
pub fn random_fusion_batch(
    seed: u64,
    count: usize,
    rows: usize,
    d_audio: usize,
    d_cls: usize,
    classes: usize,
) -> Vec<FusionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| FusionSample {
            id: format!("g{i}"),
            audio: (0..rows)
                .map(|_| (0..d_audio).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            embedding: (0..d_cls).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: rng.random_range(0..classes),
        })
        .collect()
}

/// Generate the needle task: binary labels carried by one audio row among
/// noise distractors.
pub fn generate_needle_task(cfg: &NeedleTaskConfig) -> (Vec<FusionSample>, Vec<FusionSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let make = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<FusionSample> {
        (0..count)
            .map(|i| {
                let label = rng.random_range(0..2usize);
                let embedding: Vec<f64> = (0..cfg.d_cls)
                    .map(|j| if j == 0 { 1.0 } else { cfg.cls_noise * gaussian(rng) })
                    .collect();
                FusionSample {
                    id: format!("{prefix}{i:05}"),
                    audio: needle_audio(&cfg.audio, label > 0, rng),
                    embedding,
                    label,
                }
            })
            .collect()
    };
    let train = make("T", cfg.train_count, &mut rng);
    let test = make("E", cfg.test_count, &mut rng);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::multiclass_loss;

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SyntheticCorpusConfig { labeled_count: 50, pool_count: 100, heldout_count: 20, ..Default::default() };
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.labeled.records(), b.labeled.records());
        assert_eq!(a.pool.records(), b.pool.records());
        assert_eq!(a.heldout.records(), b.heldout.records());
        assert_eq!(a.oracle, b.oracle);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = SyntheticCorpusConfig { labeled_count: 50, pool_count: 50, heldout_count: 10, ..Default::default() };
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&SyntheticCorpusConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.labeled.records(), b.labeled.records());
    }

    fn pool_mean_loss(corpus: &SyntheticCorpus) -> f64 {
        let mut total = 0.0;
        for record in corpus.pool.records() {
            let label = corpus.oracle[&record.id];
            total += multiclass_loss(&record.probs, label).unwrap();
        }
        total / corpus.pool.len() as f64
    }

    #[test]
    fn no_hard_cases_means_low_pool_loss() {
        let cfg = SyntheticCorpusConfig {
            hard_fraction: 0.0,
            hard_clusters: 0,
            labeled_count: 10,
            pool_count: 2000,
            heldout_count: 10,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        let mean = pool_mean_loss(&corpus);
        assert!(mean < 0.3, "pool mean loss {mean}");
    }

    #[test]
    fn planted_members_carry_much_higher_loss() {
        let cfg = SyntheticCorpusConfig {
            hard_fraction: 0.2,
            labeled_count: 10,
            pool_count: 3000,
            heldout_count: 10,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        // Planted members are recognizable by construction: the scorer's
        // argmax disagrees with the oracle label at high confidence.
        let mut planted = (0.0, 0usize);
        let mut rest = (0.0, 0usize);
        for record in corpus.pool.records() {
            let label = corpus.oracle[&record.id];
            let loss = multiclass_loss(&record.probs, label).unwrap();
            let max = record.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let argmax = record.probs.iter().position(|&p| p == max).unwrap();
            if argmax != label && max > 0.9 {
                planted.0 += loss;
                planted.1 += 1;
            } else {
                rest.0 += loss;
                rest.1 += 1;
            }
        }
        let planted_mean = planted.0 / planted.1 as f64;
        let rest_mean = rest.0 / rest.1 as f64;
        assert!(
            planted_mean >= 3.0 * rest_mean,
            "planted {planted_mean} vs rest {rest_mean}"
        );
    }

    #[test]
    fn audio_attachment_has_declared_shape() {
        let cfg = SyntheticCorpusConfig {
            labeled_count: 20,
            pool_count: 20,
            heldout_count: 5,
            audio: Some(AudioTaskSpec { distractors: 4, d_audio: 6, ..Default::default() }),
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(corpus.labeled.dims().audio, Some(6));
        for record in corpus.labeled.records() {
            assert_eq!(record.audio.as_ref().unwrap().len(), 5);
        }
    }

    #[test]
    fn needle_task_is_deterministic_and_balancedish() {
        let cfg = NeedleTaskConfig { train_count: 400, test_count: 100, ..Default::default() };
        let (train_a, test_a) = generate_needle_task(&cfg);
        let (train_b, _) = generate_needle_task(&cfg);
        assert_eq!(train_a, train_b);
        assert_eq!(test_a.len(), 100);
        let positives = train_a.iter().filter(|s| s.label == 1).count();
        assert!(positives > 120 && positives < 280, "positives {positives}");
        assert_eq!(train_a[0].audio.len(), cfg.audio.distractors + 1);
    }
}
