//! Learned demonstration retrieval.
//!
//! Candidates for each training anchor come from raw-embedding KNN within the
//! anchor's type pair. A scoring provider rates each candidate by the
//! log-probability of the anchor's gold label when the candidate is used as
//! the single demonstration; the best-scored candidates become positives and
//! the worst become negatives. A linear adapter over the frozen embeddings is
//! then trained contrastively, and retrieval ranks candidates by cosine
//! similarity after projection.

mod train;
pub mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, REInstance, Split};
use crate::knn::{IndexError, Neighbor, VectorIndex};
use crate::promptkit::render_instance;
use crate::providers::{EmbeddingVector, ProviderClient, ProviderError};

pub use train::{
    batch_loss, batch_loss_and_grad, info_nce, train_adapter, AdapterModel, PairExample,
    TrainConfig, TrainMeta,
};

#[derive(Debug, thiserror::Error)]
pub enum EprError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("scoring candidate `{candidate_id}`: {source}")]
    Provider {
        candidate_id: String,
        #[source]
        source: ProviderError,
    },
    #[error("anchor `{anchor}` has {available} same-pair candidates; at least 2 are needed")]
    InsufficientCandidates { anchor: String, available: usize },
    #[error("anchor `{0}` is not a training instance")]
    NotTrainAnchor(String),
    #[error("need p >= 1, n >= 1 and p + n <= {len}; got p = {p}, n = {n}")]
    InvalidLabelCounts { p: usize, n: usize, len: usize },
    #[error("no embedding for id `{0}`")]
    MissingEmbedding(String),
    #[error("score for candidate `{0}` is not finite")]
    NonFiniteScore(String),
    #[error("loss is not finite at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training pairs")]
    NoTrainingPairs,
    #[error("embedding dim {got} does not match adapter dim {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Summed log-probability of the target.
    #[default]
    Sum,
    /// Mean log-probability per target token.
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
}

/// Up to `l` nearest same-pair training instances to `anchor`, by raw cosine.
pub fn mine_candidates(
    corpus: &Corpus,
    index: &VectorIndex,
    anchor: &REInstance,
    l: usize,
) -> Result<Vec<String>, EprError> {
    if anchor.split != Split::Train {
        return Err(EprError::NotTrainAnchor(anchor.id.clone()));
    }
    let query = index
        .vector(&anchor.id)
        .ok_or_else(|| EprError::MissingEmbedding(anchor.id.clone()))?;
    let pair = anchor.type_pair();
    let keep = |id: &str| {
        id != anchor.id
            && corpus
                .get(id)
                .is_some_and(|c| c.split == Split::Train && c.type_pair() == pair)
    };
    let hits = index.query_filtered(query, l.max(1), keep)?;
    if hits.len() < 2 {
        return Err(EprError::InsufficientCandidates {
            anchor: anchor.id.clone(),
            available: hits.len(),
        });
    }
    Ok(hits.into_iter().map(|n| n.id).collect())
}

/// Scoring prompt: the candidate as the only demonstration, then the anchor input.
pub fn scoring_prefix(candidate: &REInstance, anchor: &REInstance) -> String {
    format!(
        "{}\n\n{}\nRelation:",
        render_instance(candidate, true),
        render_instance(anchor, false)
    )
}

/// Scores every candidate as a demonstration for `anchor`, preserving order.
pub fn score_candidates(
    scorer: &ProviderClient,
    corpus: &Corpus,
    anchor: &REInstance,
    candidates: &[String],
    mode: ScoringMode,
) -> Result<Vec<ScoredCandidate>, EprError> {
    candidates
        .iter()
        .map(|id| {
            let candidate = corpus.get(id).ok_or_else(|| EprError::MissingEmbedding(id.clone()))?;
            let result = scorer
                .score_output(&scoring_prefix(candidate, anchor), &anchor.relation)
                .map_err(|source| EprError::Provider {
                    candidate_id: id.clone(),
                    source,
                })?;
            let score = match mode {
                ScoringMode::Sum => result.total_logprob,
                ScoringMode::PerToken => result.per_token(),
            };
            if !score.is_finite() {
                return Err(EprError::NonFiniteScore(id.clone()));
            }
            Ok(ScoredCandidate {
                candidate_id: id.clone(),
                score,
            })
        })
        .collect()
}

/// Top-`p` candidates become positives and the bottom `n` negatives; one
/// pair per positive, each carrying all negatives. Ranking is by descending
/// score with ties broken by ascending id.
pub fn label_pairs(
    scored: &[ScoredCandidate],
    anchor_id: &str,
    p: usize,
    n: usize,
) -> Result<Vec<TrainingPair>, EprError> {
    let pool: Vec<&ScoredCandidate> = scored.iter().filter(|c| c.candidate_id != anchor_id).collect();
    if p == 0 || n == 0 || p + n > pool.len() {
        return Err(EprError::InvalidLabelCounts { p, n, len: pool.len() });
    }
    if let Some(bad) = pool.iter().find(|c| !c.score.is_finite()) {
        return Err(EprError::NonFiniteScore(bad.candidate_id.clone()));
    }
    let mut ranked = pool;
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    let negatives: Vec<String> = ranked[ranked.len() - n..]
        .iter()
        .map(|c| c.candidate_id.clone())
        .collect();
    Ok(ranked[..p]
        .iter()
        .map(|pos| TrainingPair {
            anchor_id: anchor_id.to_string(),
            positive_id: pos.candidate_id.clone(),
            negative_ids: negatives.clone(),
        })
        .collect())
}

/// An index whose rows have been projected through an adapter.
#[derive(Clone, Debug)]
pub struct ProjectedIndex {
    adapter: AdapterModel,
    index: VectorIndex,
}

impl ProjectedIndex {
    pub fn new(adapter: &AdapterModel, base: &VectorIndex) -> Result<Self, EprError> {
        if base.dim() != adapter.dim() {
            return Err(EprError::DimensionMismatch {
                expected: adapter.dim(),
                got: base.dim(),
            });
        }
        use rayon::prelude::*;
        let rows: Vec<(String, Vec<f64>)> = base
            .ids()
            .par_iter()
            .map(|id| (id.clone(), adapter.project(base.vector(id).expect("id from index"))))
            .collect();
        let index = VectorIndex::from_rows(base.dim(), base.model_tag(), rows)?;
        Ok(Self {
            adapter: adapter.clone(),
            index,
        })
    }

    pub fn adapter(&self) -> &AdapterModel {
        &self.adapter
    }

    pub fn query_filtered<F>(&self, query: &[f64], k: usize, keep: F) -> Result<Vec<Neighbor>, EprError>
    where
        F: Fn(&str) -> bool + Sync,
    {
        if query.len() != self.adapter.dim() {
            return Err(EprError::DimensionMismatch {
                expected: self.adapter.dim(),
                got: query.len(),
            });
        }
        Ok(self.index.query_filtered(&self.adapter.project(query), k, keep)?)
    }

    pub fn query(&self, query: &[f64], k: usize, exclude: &HashSet<String>) -> Result<Vec<Neighbor>, EprError> {
        self.query_filtered(query, k, |id| !exclude.contains(id))
    }
}

/// Top-`k` entries of `index` by cosine similarity after projecting both
/// sides through `adapter`.
///
/// Projects the whole index on every call; build a [`ProjectedIndex`] once
/// for repeated queries.
pub fn epr_retrieve(
    adapter: &AdapterModel,
    index: &VectorIndex,
    test_embedding: &EmbeddingVector,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Neighbor>, EprError> {
    ProjectedIndex::new(adapter, index)?.query(test_embedding.values(), k, exclude)
}
