use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EprError, TrainingPair};
use crate::knn::{dot, norm};
use crate::providers::EmbeddingVector;

const MAGIC: &[u8; 8] = b"ADAPTR01";
const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 8;
/// Guards the cosine derivative against projections collapsing to zero.
const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Use the other pairs' positives in a batch as extra negatives.
    pub in_batch_negatives: bool,
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            seed: 13,
            in_batch_negatives: true,
            temperature: 0.1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), EprError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EprError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(EprError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(EprError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub temperature: f64,
    pub in_batch_negatives: bool,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub pair_count: usize,
}

/// Square linear map applied to frozen embeddings, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterModel {
    dim: usize,
    weights: Vec<f64>,
    pub meta: TrainMeta,
}

impl AdapterModel {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weights,
            meta: TrainMeta::default(),
        }
    }

    pub fn from_weights(dim: usize, weights: Vec<f64>) -> Result<Self, EprError> {
        if dim == 0 || weights.len() != dim * dim {
            return Err(EprError::InvalidConfig(format!(
                "{} weights for dim {dim}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(EprError::InvalidConfig("non-finite adapter weight".into()));
        }
        Ok(Self {
            dim,
            weights,
            meta: TrainMeta::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        project(&self.weights, self.dim, x)
    }

    /// Header (`ADAPTR01`, `dim: u32`, `seed: u64`, `epochs: u32`, `lr: f64`)
    /// then `dim * dim` row-major f64, all little-endian. Training metadata
    /// goes to `path` + `.meta.json`.
    pub fn save(&self, path: &Path) -> Result<(), EprError> {
        let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * self.weights.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        bytes.extend_from_slice(&self.meta.seed.to_le_bytes());
        bytes.extend_from_slice(&(self.meta.epochs as u32).to_le_bytes());
        bytes.extend_from_slice(&self.meta.lr.to_le_bytes());
        for w in &self.weights {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        write(path, &bytes)?;
        let meta = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
        write(&meta_path(path), &meta)
    }

    pub fn load(path: &Path) -> Result<Self, EprError> {
        let bytes = fs::read(path).map_err(|source| EprError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |message: String| EprError::Format {
            path: path.display().to_string(),
            message,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not an adapter file".into()));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let epochs = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let lr = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if dim == 0 || payload.len() != dim * dim * 8 {
            return Err(bad(format!(
                "payload is {} bytes; dim {dim} needs {}",
                payload.len(),
                dim * dim * 8
            )));
        }
        let weights = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut model = Self::from_weights(dim, weights)?;
        model.meta = match fs::read(meta_path(path)) {
            Ok(m) => serde_json::from_slice(&m).map_err(|e| bad(format!("meta: {e}")))?,
            Err(_) => TrainMeta {
                epochs,
                lr,
                seed,
                ..TrainMeta::default()
            },
        };
        Ok(model)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    p.into()
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), EprError> {
    fs::write(path, bytes).map_err(|source| EprError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn project(w: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
    w.chunks_exact(dim).map(|row| dot(row, x)).collect()
}

/// `logsumexp(logits) - logits[0]`: InfoNCE with the positive at index 0.
pub fn info_nce(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// One training pair with its vectors resolved.
#[derive(Clone, Debug)]
pub struct PairExample<'a> {
    pub anchor_id: &'a str,
    pub anchor: &'a [f64],
    pub positive_id: &'a str,
    pub positive: &'a [f64],
    pub negatives: Vec<(&'a str, &'a [f64])>,
}

/// Candidate list for pair `i`: its positive, its negatives, then (optionally)
/// the other pairs' positives that are not already among them.
fn candidates<'a>(batch: &[PairExample<'a>], i: usize, in_batch: bool) -> Vec<&'a [f64]> {
    let pair = &batch[i];
    let mut out = Vec::with_capacity(1 + pair.negatives.len() + batch.len());
    out.push(pair.positive);
    out.extend(pair.negatives.iter().map(|(_, v)| *v));
    if in_batch {
        let mut seen: HashSet<&str> = HashSet::new();
        seen.insert(pair.anchor_id);
        seen.insert(pair.positive_id);
        seen.extend(pair.negatives.iter().map(|(id, _)| *id));
        for (j, other) in batch.iter().enumerate() {
            if j != i && seen.insert(other.positive_id) {
                out.push(other.positive);
            }
        }
    }
    out
}

/// Mean InfoNCE loss of `batch` under weights `w`.
pub fn batch_loss(w: &[f64], dim: usize, batch: &[PairExample<'_>], temperature: f64, in_batch: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let u = project(w, dim, batch[i].anchor);
        let nu = norm(&u).max(MIN_NORM);
        let logits: Vec<f64> = candidates(batch, i, in_batch)
            .into_iter()
            .map(|c| {
                let v = project(w, dim, c);
                dot(&u, &v) / (nu * norm(&v).max(MIN_NORM)) / temperature
            })
            .collect();
        total += info_nce(&logits);
    }
    total / batch.len() as f64
}

/// Mean InfoNCE loss of `batch` and its gradient with respect to `w`.
pub fn batch_loss_and_grad(
    w: &[f64],
    dim: usize,
    batch: &[PairExample<'_>],
    temperature: f64,
    in_batch: bool,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; dim * dim];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let outer = |g: &[f64], x: &[f64], grad: &mut [f64]| {
        for (row, gi) in grad.chunks_exact_mut(dim).zip(g) {
            if *gi != 0.0 {
                for (r, xj) in row.iter_mut().zip(x) {
                    *r += gi * xj;
                }
            }
        }
    };
    for i in 0..batch.len() {
        let a = batch[i].anchor;
        let u = project(w, dim, a);
        let nu = norm(&u).max(MIN_NORM);
        let cands = candidates(batch, i, in_batch);
        let projected: Vec<(Vec<f64>, f64)> = cands
            .iter()
            .map(|c| {
                let v = project(w, dim, c);
                let nv = norm(&v).max(MIN_NORM);
                (v, nv)
            })
            .collect();
        let cos: Vec<f64> = projected.iter().map(|(v, nv)| dot(&u, v) / (nu * nv)).collect();
        let logits: Vec<f64> = cos.iter().map(|s| s / temperature).collect();
        total += info_nce(&logits);

        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();

        let mut g_u = vec![0.0; dim];
        for (j, ((v, nv), s)) in projected.iter().zip(&cos).enumerate() {
            let target = if j == 0 { 1.0 } else { 0.0 };
            let coef = (exps[j] / z - target) / temperature * scale;
            // d cos / d u = v / (|u||v|) - cos * u / |u|^2, and symmetrically for v.
            let g_v: Vec<f64> = v
                .iter()
                .zip(&u)
                .map(|(vk, uk)| coef * (uk / (nu * nv) - s * vk / (nv * nv)))
                .collect();
            for ((gk, vk), uk) in g_u.iter_mut().zip(v).zip(&u) {
                *gk += coef * (vk / (nu * nv) - s * uk / (nu * nu));
            }
            outer(&g_v, cands[j], &mut grad);
        }
        outer(&g_u, a, &mut grad);
    }
    (total * scale, grad)
}

/// Trains the adapter with minibatch SGD from the identity.
///
/// Pair order is shuffled each epoch by a ChaCha RNG seeded from
/// `cfg.seed`, and all reductions run in a fixed order, so identical inputs
/// give bit-identical weights.
pub fn train_adapter(
    pairs: &[TrainingPair],
    embeddings: &HashMap<String, EmbeddingVector>,
    cfg: &TrainConfig,
) -> Result<AdapterModel, EprError> {
    cfg.validate()?;
    let lookup = |id: &str| -> Result<&[f64], EprError> {
        embeddings
            .get(id)
            .map(EmbeddingVector::values)
            .ok_or_else(|| EprError::MissingEmbedding(id.to_string()))
    };
    let mut examples = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.negative_ids.is_empty() {
            return Err(EprError::InvalidConfig(format!(
                "pair ({}, {}) has no negatives",
                p.anchor_id, p.positive_id
            )));
        }
        examples.push(PairExample {
            anchor_id: &p.anchor_id,
            anchor: lookup(&p.anchor_id)?,
            positive_id: &p.positive_id,
            positive: lookup(&p.positive_id)?,
            negatives: p
                .negative_ids
                .iter()
                .map(|id| lookup(id).map(|v| (id.as_str(), v)))
                .collect::<Result<_, _>>()?,
        });
    }

    let dim = match examples.first() {
        Some(e) => e.anchor.len(),
        None if cfg.epochs == 0 => embeddings.values().next().map_or(0, EmbeddingVector::dim),
        None => return Err(EprError::NoTrainingPairs),
    };
    for e in &examples {
        for v in std::iter::once(e.positive).chain(e.negatives.iter().map(|(_, v)| *v)) {
            if v.len() != dim {
                return Err(EprError::DimensionMismatch { expected: dim, got: v.len() });
            }
        }
        if e.anchor.len() != dim {
            return Err(EprError::DimensionMismatch { expected: dim, got: e.anchor.len() });
        }
    }
    if dim == 0 {
        return Err(EprError::NoTrainingPairs);
    }

    let mut model = AdapterModel::identity(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<PairExample<'_>> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) =
                batch_loss_and_grad(&model.weights, dim, &batch, cfg.temperature, cfg.in_batch_negatives);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                tracing::error!(epoch, batch = b, lr = cfg.lr, "non-finite loss");
                return Err(EprError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    lr: cfg.lr,
                });
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= cfg.lr * g;
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        let mean = epoch_loss / examples.len() as f64;
        tracing::debug!(epoch, loss = mean, "adapter epoch");
        loss_curve.push(mean);
    }
    model.meta = TrainMeta {
        epochs: cfg.epochs,
        lr: cfg.lr,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        temperature: cfg.temperature,
        in_batch_negatives: cfg.in_batch_negatives,
        loss_curve,
        pair_count: pairs.len(),
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::new(v, "t").unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut emb = HashMap::new();
        emb.insert("a".to_string(), ev(vec![1.0, 0.0, 0.0]));
        emb.insert("p".to_string(), ev(vec![0.0, 1.0, 0.0]));
        emb.insert("n".to_string(), ev(vec![0.0, 0.0, 1.0]));
        let pairs = vec![TrainingPair {
            anchor_id: "a".into(),
            positive_id: "p".into(),
            negative_ids: vec!["n".into()],
        }];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = train_adapter(&pairs, &emb, &cfg).unwrap();
        assert_eq!(m, {
            let mut id = AdapterModel::identity(3);
            id.meta = m.meta.clone();
            id
        });
        assert!(m.meta.loss_curve.is_empty());
    }

    #[test]
    fn missing_embedding_and_bad_config() {
        let emb = HashMap::new();
        let pairs = vec![TrainingPair {
            anchor_id: "a".into(),
            positive_id: "p".into(),
            negative_ids: vec!["n".into()],
        }];
        assert!(matches!(
            train_adapter(&pairs, &emb, &TrainConfig::default()),
            Err(EprError::MissingEmbedding(_))
        ));
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train_adapter(&pairs, &emb, &cfg), Err(EprError::InvalidConfig(_))));
    }

    #[test]
    fn exploding_lr_aborts_with_diagnostics() {
        let mut emb = HashMap::new();
        emb.insert("a".to_string(), ev(vec![1.0, 0.2]));
        emb.insert("p".to_string(), ev(vec![0.1, 1.0]));
        emb.insert("n".to_string(), ev(vec![1.0, 0.0]));
        let pairs = vec![TrainingPair {
            anchor_id: "a".into(),
            positive_id: "p".into(),
            negative_ids: vec!["n".into()],
        }];
        let cfg = TrainConfig {
            lr: 1e300,
            epochs: 50,
            ..TrainConfig::default()
        };
        match train_adapter(&pairs, &emb, &cfg) {
            Err(EprError::NonFiniteLoss { lr, .. }) => assert_eq!(lr, 1e300),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn info_nce_limits() {
        let mut logits = vec![0.0; 11];
        for big in [10.0, 50.0] {
            logits[0] = big;
            assert!(info_nce(&logits) < 1e-3);
            logits[0] = 0.0;
            logits[1] = big;
            assert!(info_nce(&logits) > 5.0);
            logits[1] = 0.0;
        }
        assert!((info_nce(&[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        let mut m = AdapterModel::from_weights(2, vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        m.meta.seed = 9;
        m.meta.loss_curve = vec![0.7, 0.5];
        m.save(&path).unwrap();
        assert_eq!(AdapterModel::load(&path).unwrap(), m);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(AdapterModel::load(&path), Err(EprError::Format { .. })));
    }
}
