//! Seeded benchmark for the adapter: labeled clusters whose query-side
//! embeddings pass through a fixed random rotation.
//!
//! Raw cosine similarity between a rotated query and the unrotated
//! candidates carries little label information, so an identity adapter
//! retrieves near chance. A trained adapter has to learn a projection under
//! which both views of a cluster line up.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{label_pairs, AdapterModel, EprError, ProjectedIndex, ScoredCandidate, TrainingPair};
use crate::knn::{norm, VectorIndex};
use crate::providers::EmbeddingVector;

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub dim: usize,
    pub clusters: usize,
    pub candidates_per_cluster: usize,
    pub anchors: usize,
    pub queries: usize,
    /// Standard deviation of the isotropic noise added to cluster centers.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 13,
            dim: 16,
            clusters: 4,
            candidates_per_cluster: 50,
            anchors: 400,
            queries: 200,
            noise: 0.15,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledVector {
    pub id: String,
    pub label: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    /// Unrotated retrieval pool.
    pub candidates: Vec<LabeledVector>,
    /// Rotated training anchors.
    pub anchors: Vec<LabeledVector>,
    /// Rotated held-out queries.
    pub queries: Vec<LabeledVector>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Random orthogonal matrix (rows orthonormal) by Gram-Schmidt.
fn random_rotation(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
        }
        if norm(&v) > 1e-6 {
            rows.push(unit(v));
        }
    }
    rows
}

impl SyntheticTask {
    pub fn generate(spec: SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dim = spec.dim;
        let centers: Vec<Vec<f64>> = (0..spec.clusters)
            .map(|_| unit((0..dim).map(|_| gaussian(&mut rng)).collect()))
            .collect();
        let rotation = random_rotation(&mut rng, dim);

        let sample = |label: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            unit(
                centers[label]
                    .iter()
                    .map(|c| c + spec.noise * gaussian(rng))
                    .collect(),
            )
        };
        let rotate = |v: Vec<f64>| -> Vec<f64> {
            rotation.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect()
        };

        let mut candidates = Vec::new();
        for label in 0..spec.clusters {
            for i in 0..spec.candidates_per_cluster {
                candidates.push(LabeledVector {
                    id: format!("c{label}-{i:04}"),
                    label,
                    values: sample(label, &mut rng),
                });
            }
        }
        let rotated = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledVector> {
            (0..n)
                .map(|i| {
                    let label = i % spec.clusters;
                    LabeledVector {
                        id: format!("{prefix}{i:04}"),
                        label,
                        values: rotate(sample(label, rng)),
                    }
                })
                .collect()
        };
        let anchors = rotated("a", spec.anchors, &mut rng);
        let queries = rotated("q", spec.queries, &mut rng);
        Self {
            spec,
            candidates,
            anchors,
            queries,
        }
    }

    /// All vectors keyed by id.
    pub fn embeddings(&self) -> HashMap<String, EmbeddingVector> {
        self.candidates
            .iter()
            .chain(&self.anchors)
            .chain(&self.queries)
            .map(|v| {
                (
                    v.id.clone(),
                    EmbeddingVector::new(v.values.clone(), "synthetic").expect("finite"),
                )
            })
            .collect()
    }

    pub fn candidate_index(&self) -> VectorIndex {
        VectorIndex::from_rows(
            self.spec.dim,
            "synthetic",
            self.candidates.iter().map(|c| (c.id.clone(), c.values.clone())),
        )
        .expect("synthetic candidates are valid")
    }

    /// Labels pairs for every anchor the way the pipeline does: a random
    /// pool of `l` candidates is scored (0 for a matching label, -1
    /// otherwise) and split with [`label_pairs`].
    pub fn training_pairs(&self, l: usize, p: usize, n: usize) -> Result<Vec<TrainingPair>, EprError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed);
        let mut pairs = Vec::new();
        for anchor in &self.anchors {
            let pool: Vec<&LabeledVector> = self.candidates.choose_multiple(&mut rng, l).collect();
            let scored: Vec<ScoredCandidate> = pool
                .iter()
                .map(|c| ScoredCandidate {
                    candidate_id: c.id.clone(),
                    score: if c.label == anchor.label { 0.0 } else { -1.0 },
                })
                .collect();
            pairs.extend(label_pairs(&scored, &anchor.id, p, n)?);
        }
        Ok(pairs)
    }

    /// Mean fraction of same-label candidates among each query's top `k`.
    pub fn recall_at_k(&self, adapter: &AdapterModel, k: usize) -> Result<f64, EprError> {
        let index = ProjectedIndex::new(adapter, &self.candidate_index())?;
        let labels: HashMap<&str, usize> = self.candidates.iter().map(|c| (c.id.as_str(), c.label)).collect();
        let none = HashSet::new();
        let mut hits = 0usize;
        for q in &self.queries {
            let top = index.query(&q.values, k, &none)?;
            hits += top.iter().filter(|n| labels[n.id.as_str()] == q.label).count();
        }
        Ok(hits as f64 / (self.queries.len() * k) as f64)
    }
}
