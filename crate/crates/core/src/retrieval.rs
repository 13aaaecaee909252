//! Demonstration retrievers used by the runner.

use std::collections::HashMap;

use crate::corpus::{Corpus, REInstance, TypePair};
use crate::epr::{AdapterModel, EprError, ProjectedIndex};
use crate::knn::{IndexError, Neighbor, VectorIndex};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("no embedding for instance `{0}`")]
    MissingQueryEmbedding(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Epr(#[from] EprError),
}

/// Returns up to `k` training neighbors for a test instance, most similar first.
pub trait DemoRetriever: Send + Sync {
    fn name(&self) -> &'static str;
    fn retrieve(&self, test: &REInstance, k: usize) -> Result<Vec<Neighbor>, RetrievalError>;
}

/// Zero-shot / random-only runs.
pub struct NoRetriever;

impl DemoRetriever for NoRetriever {
    fn name(&self) -> &'static str {
        "none"
    }

    fn retrieve(&self, _: &REInstance, _: usize) -> Result<Vec<Neighbor>, RetrievalError> {
        Ok(Vec::new())
    }
}

/// Candidate filter shared by both dense retrievers.
struct Scope {
    /// Type pair per indexed id, when retrieval is restricted to the test's pair.
    pairs: Option<HashMap<String, TypePair>>,
}

impl Scope {
    fn new(train: &Corpus, restrict_to_type_pair: bool) -> Self {
        Self {
            pairs: restrict_to_type_pair.then(|| {
                train
                    .instances()
                    .iter()
                    .map(|i| (i.id.clone(), i.type_pair()))
                    .collect()
            }),
        }
    }

    fn keep<'a>(&'a self, test: &'a REInstance) -> impl Fn(&str) -> bool + Sync + 'a {
        let pair = test.type_pair();
        move |id: &str| {
            id != test.id
                && match &self.pairs {
                    Some(pairs) => pairs.get(id) == Some(&pair),
                    None => true,
                }
        }
    }
}

fn query_vector<'a>(queries: &'a HashMap<String, Vec<f64>>, test: &REInstance) -> Result<&'a [f64], RetrievalError> {
    queries
        .get(&test.id)
        .map(Vec::as_slice)
        .ok_or_else(|| RetrievalError::MissingQueryEmbedding(test.id.clone()))
}

/// Exact cosine KNN over raw embeddings.
pub struct KnnRetriever {
    index: VectorIndex,
    queries: HashMap<String, Vec<f64>>,
    scope: Scope,
}

impl KnnRetriever {
    /// `index` covers the training pool; `queries` maps test ids to embeddings.
    pub fn new(index: VectorIndex, queries: HashMap<String, Vec<f64>>, train: &Corpus, restrict_to_type_pair: bool) -> Self {
        Self {
            index,
            queries,
            scope: Scope::new(train, restrict_to_type_pair),
        }
    }
}

impl DemoRetriever for KnnRetriever {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn retrieve(&self, test: &REInstance, k: usize) -> Result<Vec<Neighbor>, RetrievalError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = query_vector(&self.queries, test)?;
        Ok(self.index.query_filtered(q, k, self.scope.keep(test))?)
    }
}

/// Cosine KNN after projecting through a trained adapter.
pub struct EprRetriever {
    index: ProjectedIndex,
    queries: HashMap<String, Vec<f64>>,
    scope: Scope,
}

impl EprRetriever {
    pub fn new(
        adapter: &AdapterModel,
        index: &VectorIndex,
        queries: HashMap<String, Vec<f64>>,
        train: &Corpus,
        restrict_to_type_pair: bool,
    ) -> Result<Self, RetrievalError> {
        Ok(Self {
            index: ProjectedIndex::new(adapter, index)?,
            queries,
            scope: Scope::new(train, restrict_to_type_pair),
        })
    }
}

impl DemoRetriever for EprRetriever {
    fn name(&self) -> &'static str {
        "epr"
    }

    fn retrieve(&self, test: &REInstance, k: usize) -> Result<Vec<Neighbor>, RetrievalError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = query_vector(&self.queries, test)?;
        Ok(self.index.query_filtered(q, k, self.scope.keep(test))?)
    }
}
