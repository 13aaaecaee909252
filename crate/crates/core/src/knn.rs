//! Exact cosine nearest-neighbor search over a flat vector index.
//!
//! Results are sorted by descending similarity with ties broken by
//! ascending id, so queries are reproducible regardless of insertion order
//! or how the scan is split across threads.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::providers::EmbeddingVector;

const MAGIC: &[u8; 8] = b"KNNVEC01";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got} (id `{id}`)")]
    DimensionMismatch { expected: usize, got: usize, id: String },
    #[error("zero vector for id `{0}`: cosine similarity undefined")]
    ZeroVector(String),
    #[error("duplicate id `{0}` in index")]
    DuplicateId(String),
    #[error("cannot build an index from no vectors")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    /// Cosine similarity.
    pub similarity: f64,
}

/// Flat index with precomputed L2 norms.
#[derive(Clone, Debug)]
pub struct VectorIndex {
    dim: usize,
    model_tag: String,
    ids: Vec<String>,
    data: Vec<f64>,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Descending similarity, then ascending id.
fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.id.cmp(&b.id))
}

impl VectorIndex {
    /// Builds an index over `items`.
    pub fn build<I, S>(items: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (S, EmbeddingVector)>,
        S: Into<String>,
    {
        let mut iter = items.into_iter().peekable();
        let (dim, tag) = match iter.peek() {
            Some((_, v)) => (v.dim(), v.model_tag().to_string()),
            None => return Err(IndexError::Empty),
        };
        Self::from_rows(
            dim,
            tag,
            iter.map(|(id, v)| (id.into(), v.into_values())),
        )
    }

    /// Builds from raw rows; every row must have `dim` components.
    pub fn from_rows(
        dim: usize,
        model_tag: impl Into<String>,
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, IndexError> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut positions = HashMap::new();
        for (id, row) in rows {
            if row.len() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                    id,
                });
            }
            if positions.insert(id.clone(), ids.len()).is_some() {
                return Err(IndexError::DuplicateId(id));
            }
            data.extend_from_slice(&row);
            ids.push(id);
        }
        if ids.is_empty() {
            return Err(IndexError::Empty);
        }
        let norms: Vec<f64> = data.par_chunks(dim).map(norm).collect();
        if let Some(i) = norms.iter().position(|n| !(*n > 0.0)) {
            return Err(IndexError::ZeroVector(ids[i].clone()));
        }
        Ok(Self {
            dim,
            model_tag: model_tag.into(),
            ids,
            data,
            norms,
            positions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// Stored vector for `id`.
    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.positions.get(id).map(|&p| self.row(p))
    }

    pub fn embedding(&self, id: &str) -> Option<EmbeddingVector> {
        self.vector(id)
            .map(|v| EmbeddingVector::new(v.to_vec(), self.model_tag.clone()).expect("stored rows are finite"))
    }

    fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> + '_ {
        self.ids.iter().map(String::as_str).zip(self.data.chunks(self.dim))
    }

    /// Top `k` neighbors of `query`, skipping ids in `exclude`.
    pub fn query(
        &self,
        query: &[f64],
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<Neighbor>, IndexError> {
        self.query_filtered(query, k, |id| !exclude.contains(id))
    }

    /// Top `k` neighbors among entries whose id satisfies `keep`.
    pub fn query_filtered<F>(&self, query: &[f64], k: usize, keep: F) -> Result<Vec<Neighbor>, IndexError>
    where
        F: Fn(&str) -> bool + Sync,
    {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
                id: "<query>".into(),
            });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let qn = norm(query);
        if !(qn > 0.0) {
            return Err(IndexError::ZeroVector("<query>".into()));
        }
        let mut hits: Vec<Neighbor> = (0..self.ids.len())
            .into_par_iter()
            .filter(|&p| keep(&self.ids[p]))
            .map(|p| Neighbor {
                id: self.ids[p].clone(),
                similarity: dot(query, self.row(p)) / (qn * self.norms[p]),
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank);
            hits.truncate(k);
        }
        hits.sort_by(rank);
        Ok(hits)
    }

    /// Writes the header and packed little-endian f32 rows to `path` and the
    /// ids, one per line, to `path` + `.ids`.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        save_vectors(path, self.dim, &self.model_tag, self.rows())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let table = load_vectors(path)?;
        Self::from_rows(table.dim, table.model_tag, table.rows)
    }
}

/// Free-function form of [`VectorIndex::build`].
pub fn build_index<I, S>(items: I) -> Result<VectorIndex, IndexError>
where
    I: IntoIterator<Item = (S, EmbeddingVector)>,
    S: Into<String>,
{
    VectorIndex::build(items)
}

/// Free-function form of [`VectorIndex::query`].
pub fn query(
    index: &VectorIndex,
    q: &EmbeddingVector,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Neighbor>, IndexError> {
    index.query(q.values(), k, exclude)
}

/// Vectors read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTable {
    pub dim: usize,
    pub model_tag: String,
    pub rows: Vec<(String, Vec<f64>)>,
}

fn ids_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".ids");
    PathBuf::from(p)
}

/// Binary layout: magic `KNNVEC01`, `dim: u32`, `count: u64`,
/// `tag_len: u32`, tag bytes, then `count * dim` f32 values, all
/// little-endian. Ids go to the `.ids` sidecar.
pub fn save_vectors<'a>(
    path: &Path,
    dim: usize,
    model_tag: &str,
    rows: impl Iterator<Item = (&'a str, &'a [f64])>,
) -> Result<(), IndexError> {
    let io = |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    };
    let (ids, rows): (Vec<&str>, Vec<&[f64]>) = rows.unzip();
    if let Some(bad) = ids.iter().find(|id| id.contains('\n') || id.is_empty()) {
        return Err(IndexError::Format {
            path: path.to_path_buf(),
            message: format!("id {bad:?} cannot be stored in the sidecar"),
        });
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(rows.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(model_tag.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(model_tag.as_bytes()).map_err(io)?;
    for row in &rows {
        if row.len() != dim {
            return Err(IndexError::DimensionMismatch {
                expected: dim,
                got: row.len(),
                id: String::new(),
            });
        }
        for v in row.iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    let sidecar = ids_path(path);
    let mut s = BufWriter::new(fs::File::create(&sidecar).map_err(|source| IndexError::Io {
        path: sidecar.clone(),
        source,
    })?);
    for id in ids {
        writeln!(s, "{id}").map_err(io)?;
    }
    s.flush().map_err(io)
}

pub fn load_vectors(path: &Path) -> Result<VectorTable, IndexError> {
    let bad = |message: String| IndexError::Format {
        path: path.to_path_buf(),
        message,
    };
    let io = |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    let take = |at: usize, n: usize| -> Result<&[u8], IndexError> {
        bytes.get(at..at + n).ok_or_else(|| bad("truncated header".into()))
    };
    if take(0, 8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let dim = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(12, 8)?.try_into().unwrap()) as usize;
    let tag_len = u32::from_le_bytes(take(20, 4)?.try_into().unwrap()) as usize;
    let model_tag = String::from_utf8(take(24, tag_len)?.to_vec()).map_err(|_| bad("tag is not UTF-8".into()))?;
    let start = 24 + tag_len;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("count x dim overflows".into()))?;
    if bytes.len() - start != expected {
        return Err(bad(format!(
            "payload is {} bytes, header promises {count} x {dim} f32 = {expected}",
            bytes.len() - start
        )));
    }
    if dim == 0 {
        return Err(bad("dim is zero".into()));
    }

    let sidecar = ids_path(path);
    let file = fs::File::open(&sidecar).map_err(|source| IndexError::Io {
        path: sidecar.clone(),
        source,
    })?;
    let ids: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|source| IndexError::Io {
            path: sidecar.clone(),
            source,
        })?;
    if ids.len() != count {
        return Err(bad(format!("{} ids in sidecar, header says {count}", ids.len())));
    }

    let values: Vec<f64> = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let rows = ids
        .into_iter()
        .zip(values.chunks(dim).map(<[f64]>::to_vec))
        .collect();
    Ok(VectorTable { dim, model_tag, rows })
}
