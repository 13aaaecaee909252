//! Relation-extraction datasets: instances, the entity-type-pair schema and
//! per-class sampling.
//!
//! A [`Corpus`] is immutable once loaded. Instances keep file order; the
//! schema maps each ordered `(e1_type, e2_type)` pair to the set of relations
//! observed for it, with [`NO_RELATION`] always present.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::{derive_seed, json_digest};

/// Label asserting that no predefined relation holds.
pub const NO_RELATION: &str = "no_relation";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: field `{field}`: {message}")]
    Malformed {
        record: usize,
        field: String,
        message: String,
    },
    #[error("record {record}: not valid JSON: {message}")]
    Json { record: usize, message: String },
    #[error("instance `{id}`: span {which} [{start},{end}) invalid for {len} tokens")]
    SpanOutOfBounds {
        id: String,
        which: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("instance `{id}`: e1 and e2 cover the same span [{start},{end})")]
    IdenticalSpans { id: String, start: usize, end: usize },
    #[error("instance `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("unknown entity type pair ({0}, {1})")]
    UnknownTypePair(String, String),
    #[error("schema override does not cover relation `{relation}` observed for ({head}, {tail})")]
    SchemaOverrideIncomplete {
        head: String,
        tail: String,
        relation: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

/// Half-open token range `[start, end)` with the entity's type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }
}

/// Ordered entity-type pair. `(ORG, PERSON)` and `(PERSON, ORG)` are distinct.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypePair {
    pub head: String,
    pub tail: String,
}

impl TypePair {
    pub fn new(head: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for TypePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.head, self.tail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct REInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub e1: EntitySpan,
    pub e2: EntitySpan,
    pub relation: String,
    pub split: Split,
}

impl REInstance {
    /// Builds a validated instance.
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        e1: EntitySpan,
        e2: EntitySpan,
        relation: impl Into<String>,
        split: Split,
    ) -> Result<Self, CorpusError> {
        let inst = Self {
            id: id.into(),
            tokens,
            e1,
            e2,
            relation: relation.into(),
            split,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::Invalid {
                id: self.id.clone(),
                message: "empty id".into(),
            });
        }
        let len = self.tokens.len();
        for (which, span) in [("e1", &self.e1), ("e2", &self.e2)] {
            if span.start >= span.end || span.end > len {
                return Err(CorpusError::SpanOutOfBounds {
                    id: self.id.clone(),
                    which,
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
            if span.entity_type.trim().is_empty() {
                return Err(CorpusError::Invalid {
                    id: self.id.clone(),
                    message: format!("{which} has an empty entity type"),
                });
            }
        }
        if self.e1.start == self.e2.start && self.e1.end == self.e2.end {
            return Err(CorpusError::IdenticalSpans {
                id: self.id.clone(),
                start: self.e1.start,
                end: self.e1.end,
            });
        }
        if self.relation.trim().is_empty() {
            return Err(CorpusError::Invalid {
                id: self.id.clone(),
                message: "empty relation".into(),
            });
        }
        Ok(())
    }

    pub fn type_pair(&self) -> TypePair {
        TypePair::new(self.e1.entity_type.clone(), self.e2.entity_type.clone())
    }
}

/// Permissible relations per ordered type pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationSchema {
    entries: BTreeMap<TypePair, BTreeSet<String>>,
    all_relations: BTreeSet<String>,
}

/// On-disk form of a schema (also the override file format).
#[derive(Debug, Serialize, Deserialize)]
pub struct SchemaFile {
    pub entries: Vec<SchemaFileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SchemaFileEntry {
    pub e1_type: String,
    pub e2_type: String,
    pub relations: Vec<String>,
}

impl RelationSchema {
    /// Derives the schema from observed `(type pair, relation)` combinations.
    pub fn derive<'a>(instances: impl IntoIterator<Item = &'a REInstance>) -> Self {
        let mut entries: BTreeMap<TypePair, BTreeSet<String>> = BTreeMap::new();
        for inst in instances {
            entries
                .entry(inst.type_pair())
                .or_default()
                .insert(inst.relation.clone());
        }
        Self::from_entries(entries)
    }

    /// Builds a schema from explicit entries, inserting [`NO_RELATION`] everywhere.
    pub fn from_entries(mut entries: BTreeMap<TypePair, BTreeSet<String>>) -> Self {
        for set in entries.values_mut() {
            set.insert(NO_RELATION.to_string());
        }
        let all_relations = entries.values().flatten().cloned().collect();
        Self {
            entries,
            all_relations,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: SchemaFile = serde_json::from_str(&text).map_err(|e| CorpusError::Json {
            record: e.line(),
            message: e.to_string(),
        })?;
        Ok(Self::from_file(file))
    }

    pub fn from_file(file: SchemaFile) -> Self {
        let mut entries: BTreeMap<TypePair, BTreeSet<String>> = BTreeMap::new();
        for e in file.entries {
            entries
                .entry(TypePair::new(e.e1_type, e.e2_type))
                .or_default()
                .extend(e.relations);
        }
        Self::from_entries(entries)
    }

    pub fn to_file(&self) -> SchemaFile {
        SchemaFile {
            entries: self
                .entries
                .iter()
                .map(|(tp, rels)| SchemaFileEntry {
                    e1_type: tp.head.clone(),
                    e2_type: tp.tail.clone(),
                    relations: rels.iter().cloned().collect(),
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &BTreeMap<TypePair, BTreeSet<String>> {
        &self.entries
    }

    pub fn all_relations(&self) -> &BTreeSet<String> {
        &self.all_relations
    }

    pub fn type_pair_count(&self) -> usize {
        self.entries.len()
    }

    /// Relations allowed between `head` and `tail` types, including [`NO_RELATION`].
    pub fn permissible_relations(
        &self,
        head: &str,
        tail: &str,
    ) -> Result<&BTreeSet<String>, CorpusError> {
        // BTreeMap lookups need an owned key; type pairs are short strings.
        self.entries
            .get(&TypePair::new(head, tail))
            .ok_or_else(|| CorpusError::UnknownTypePair(head.to_string(), tail.to_string()))
    }

    pub fn permissible_for(&self, pair: &TypePair) -> Result<&BTreeSet<String>, CorpusError> {
        self.entries
            .get(pair)
            .ok_or_else(|| CorpusError::UnknownTypePair(pair.head.clone(), pair.tail.clone()))
    }
}

/// Free-function form of [`RelationSchema::permissible_relations`].
pub fn permissible_relations<'s>(
    schema: &'s RelationSchema,
    head: &str,
    tail: &str,
) -> Result<&'s BTreeSet<String>, CorpusError> {
    schema.permissible_relations(head, tail)
}

/// Input file layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusFormat {
    /// JSON Lines with the fields of [`CanonicalRecord`].
    #[default]
    Canonical,
    /// A JSON array or JSON Lines file whose field names are given by a mapping.
    RefindNative(FieldMapping),
}

/// Source field names for the native adapter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMapping {
    pub id: String,
    pub tokens: String,
    pub e1_start: String,
    pub e1_end: String,
    pub e2_start: String,
    pub e2_end: String,
    pub e1_type: String,
    pub e2_type: String,
    pub relation: String,
    /// Whether the source span end index points at the last token (inclusive)
    /// rather than one past it.
    pub end_inclusive: bool,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            id: "id".into(),
            tokens: "token".into(),
            e1_start: "e1_start".into(),
            e1_end: "e1_end".into(),
            e2_start: "e2_start".into(),
            e2_end: "e2_end".into(),
            e1_type: "e1_type".into(),
            e2_type: "e2_type".into(),
            relation: "relation".into(),
            end_inclusive: false,
        }
    }
}

impl FieldMapping {
    fn canonical() -> Self {
        Self {
            tokens: "tokens".into(),
            ..Self::default()
        }
    }
}

/// One line of the canonical JSONL format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub e1_start: usize,
    pub e1_end: usize,
    pub e2_start: usize,
    pub e2_end: usize,
    pub e1_type: String,
    pub e2_type: String,
    pub relation: String,
}

impl From<&REInstance> for CanonicalRecord {
    fn from(i: &REInstance) -> Self {
        Self {
            id: i.id.clone(),
            tokens: i.tokens.clone(),
            e1_start: i.e1.start,
            e1_end: i.e1.end,
            e2_start: i.e2.start,
            e2_end: i.e2.end,
            e1_type: i.e1.entity_type.clone(),
            e2_type: i.e2.entity_type.clone(),
            relation: i.relation.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    instances: Vec<REInstance>,
    positions: HashMap<String, usize>,
    schema: RelationSchema,
    by_type_pair: BTreeMap<TypePair, Vec<usize>>,
    by_relation: BTreeMap<(TypePair, String), Vec<usize>>,
}

impl Corpus {
    /// Indexes `instances` and derives the schema from them.
    pub fn from_instances(instances: Vec<REInstance>) -> Result<Self, CorpusError> {
        let schema = RelationSchema::derive(&instances);
        Self::with_schema(instances, schema)
    }

    /// Indexes `instances` under a given schema. Every observed
    /// `(type pair, relation)` must be permitted by it.
    pub fn with_schema(
        instances: Vec<REInstance>,
        schema: RelationSchema,
    ) -> Result<Self, CorpusError> {
        let mut positions = HashMap::with_capacity(instances.len());
        let mut by_type_pair: BTreeMap<TypePair, Vec<usize>> = BTreeMap::new();
        let mut by_relation: BTreeMap<(TypePair, String), Vec<usize>> = BTreeMap::new();
        for (pos, inst) in instances.iter().enumerate() {
            inst.validate()?;
            if positions.insert(inst.id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateId(inst.id.clone()));
            }
            let pair = inst.type_pair();
            let allowed = schema.permissible_for(&pair)?;
            if !allowed.contains(&inst.relation) {
                return Err(CorpusError::SchemaOverrideIncomplete {
                    head: pair.head,
                    tail: pair.tail,
                    relation: inst.relation.clone(),
                });
            }
            by_type_pair.entry(pair.clone()).or_default().push(pos);
            by_relation
                .entry((pair, inst.relation.clone()))
                .or_default()
                .push(pos);
        }
        Ok(Self {
            instances,
            positions,
            schema,
            by_type_pair,
            by_relation,
        })
    }

    pub fn instances(&self) -> &[REInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn get(&self, id: &str) -> Option<&REInstance> {
        self.positions.get(id).map(|&p| &self.instances[p])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// Instances with the given type pair, in corpus order.
    pub fn by_type_pair(&self, pair: &TypePair) -> impl Iterator<Item = &REInstance> + '_ {
        self.by_type_pair
            .get(pair)
            .into_iter()
            .flatten()
            .map(move |&p| &self.instances[p])
    }

    /// Instances with the given type pair and relation, in corpus order.
    pub fn by_relation(
        &self,
        pair: &TypePair,
        relation: &str,
    ) -> impl Iterator<Item = &REInstance> + '_ {
        self.by_relation
            .get(&(pair.clone(), relation.to_string()))
            .into_iter()
            .flatten()
            .map(move |&p| &self.instances[p])
    }

    pub fn type_pairs(&self) -> impl Iterator<Item = &TypePair> + '_ {
        self.by_type_pair.keys()
    }

    /// Instance ids per type pair.
    pub fn type_pair_index(&self) -> BTreeMap<TypePair, Vec<String>> {
        self.by_type_pair
            .iter()
            .map(|(k, v)| (k.clone(), self.ids_at(v)))
            .collect()
    }

    /// Instance ids per `(type pair, relation)`.
    pub fn relation_index(&self) -> BTreeMap<(TypePair, String), Vec<String>> {
        self.by_relation
            .iter()
            .map(|(k, v)| (k.clone(), self.ids_at(v)))
            .collect()
    }

    fn ids_at(&self, positions: &[usize]) -> Vec<String> {
        positions
            .iter()
            .map(|&p| self.instances[p].id.clone())
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &REInstance> + '_ {
        self.instances.iter().filter(move |i| i.split == split)
    }

    /// Digest over instance ids and gold labels, in order.
    pub fn digest(&self) -> String {
        let rows: Vec<CanonicalRecord> = self.instances.iter().map(CanonicalRecord::from).collect();
        json_digest(&rows).expect("canonical records serialize")
    }

    /// Draws up to `n` distinct instances with `pair` and `relation`, skipping
    /// ids in `exclude`.
    ///
    /// The RNG is keyed on `(seed, pair, relation)`, so the draw for one class
    /// does not depend on which other classes exist.
    pub fn sample_by_relation(
        &self,
        pair: &TypePair,
        relation: &str,
        n: usize,
        seed: u64,
        exclude: &HashSet<String>,
    ) -> Vec<&REInstance> {
        if n == 0 {
            return Vec::new();
        }
        let mut pool: Vec<&REInstance> = self
            .by_relation(pair, relation)
            .filter(|i| !exclude.contains(&i.id))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[&pair.head, &pair.tail, relation],
        ));
        let take = n.min(pool.len());
        let (picked, _) = pool.partial_shuffle(&mut rng, take);
        picked.to_vec()
    }
}

/// Free-function form of [`Corpus::sample_by_relation`].
pub fn sample_by_relation<'c>(
    corpus: &'c Corpus,
    pair: &TypePair,
    relation: &str,
    n: usize,
    seed: u64,
    exclude: &HashSet<String>,
) -> Vec<&'c REInstance> {
    corpus.sample_by_relation(pair, relation, n, seed, exclude)
}

/// Reads instances from `path` in the given format, tagging each with `split`.
pub fn read_instances(
    path: &Path,
    format: &CorpusFormat,
    split: Split,
) -> Result<Vec<REInstance>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_instances(&text, format, split)
}

/// Loads, validates and indexes a corpus file. The schema is derived from the
/// loaded instances.
pub fn load_corpus(path: &Path, format: &CorpusFormat, split: Split) -> Result<Corpus, CorpusError> {
    Corpus::from_instances(read_instances(path, format, split)?)
}

pub fn parse_instances(
    text: &str,
    format: &CorpusFormat,
    split: Split,
) -> Result<Vec<REInstance>, CorpusError> {
    let canonical = FieldMapping::canonical();
    let (mapping, strict) = match format {
        CorpusFormat::Canonical => (&canonical, true),
        CorpusFormat::RefindNative(m) => (m, false),
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |record: usize, value: &Value| -> Result<(), CorpusError> {
        let inst = from_json(record, value, mapping, strict, split)?;
        if !seen.insert(inst.id.clone()) {
            return Err(CorpusError::DuplicateId(inst.id));
        }
        out.push(inst);
        Ok(())
    };

    let trimmed = text.trim_start();
    if !strict && trimmed.starts_with('[') {
        let values: Vec<Value> = serde_json::from_str(trimmed).map_err(|e| CorpusError::Json {
            record: e.line(),
            message: e.to_string(),
        })?;
        for (i, v) in values.iter().enumerate() {
            push(i + 1, v)?;
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Json {
                record: i + 1,
                message: e.to_string(),
            })?;
            push(i + 1, &value)?;
        }
    }
    Ok(out)
}

fn from_json(
    record: usize,
    value: &Value,
    m: &FieldMapping,
    strict: bool,
    split: Split,
) -> Result<REInstance, CorpusError> {
    let bad = |field: &str, message: String| CorpusError::Malformed {
        record,
        field: field.to_string(),
        message,
    };
    let obj = value
        .as_object()
        .ok_or_else(|| bad("<record>", "expected a JSON object".into()))?;
    if strict {
        let known = [
            &m.id, &m.tokens, &m.e1_start, &m.e1_end, &m.e2_start, &m.e2_end, &m.e1_type,
            &m.e2_type, &m.relation,
        ];
        if let Some(extra) = obj.keys().find(|k| !known.contains(k)) {
            return Err(bad(extra, "unknown field".into()));
        }
    }
    let get = |field: &str| obj.get(field).ok_or_else(|| bad(field, "missing".into()));
    let string = |field: &str| -> Result<String, CorpusError> {
        match get(field)? {
            Value::String(s) => Ok(s.clone()),
            // Native dumps sometimes carry numeric ids.
            Value::Number(n) if !strict => Ok(n.to_string()),
            other => Err(bad(field, format!("expected string, got {other}"))),
        }
    };
    let index = |field: &str| -> Result<usize, CorpusError> {
        get(field)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| bad(field, "expected a non-negative integer".into()))
    };
    let tokens = match get(&m.tokens)? {
        Value::Array(items) => items
            .iter()
            .map(|t| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| bad(&m.tokens, "expected an array of strings".into()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad(&m.tokens, "expected an array of strings".into())),
    };
    let end = |field: &str| -> Result<usize, CorpusError> {
        let v = index(field)?;
        Ok(if m.end_inclusive { v + 1 } else { v })
    };
    let e1 = EntitySpan {
        start: index(&m.e1_start)?,
        end: end(&m.e1_end)?,
        entity_type: string(&m.e1_type)?,
    };
    let e2 = EntitySpan {
        start: index(&m.e2_start)?,
        end: end(&m.e2_end)?,
        entity_type: string(&m.e2_type)?,
    };
    REInstance::new(string(&m.id)?, tokens, e1, e2, string(&m.relation)?, split)
}

/// Serializes instances to the canonical JSONL format.
pub fn to_canonical_jsonl(instances: &[REInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(&CanonicalRecord::from(inst)).expect("serializable"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, t1: &str, t2: &str, rel: &str) -> REInstance {
        REInstance::new(
            id,
            vec!["A".into(), "x".into(), "B".into()],
            EntitySpan {
                start: 0,
                end: 1,
                entity_type: t1.into(),
            },
            EntitySpan {
                start: 2,
                end: 3,
                entity_type: t2.into(),
            },
            rel,
            Split::Train,
        )
        .unwrap()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_instance_schema_adds_no_relation() {
        let c = Corpus::from_instances(vec![inst("1", "ORG", "PER", "r")]).unwrap();
        assert_eq!(
            c.schema().permissible_relations("ORG", "PER").unwrap(),
            &set(&["r", NO_RELATION])
        );
        assert!(matches!(
            c.schema().permissible_relations("PER", "ORG"),
            Err(CorpusError::UnknownTypePair(..))
        ));
    }

    #[test]
    fn span_validation() {
        let tokens: Vec<String> = vec!["a".into(), "b".into()];
        let span = |s, e| EntitySpan {
            start: s,
            end: e,
            entity_type: "T".into(),
        };
        let err = REInstance::new("x", tokens.clone(), span(0, 3), span(1, 2), "r", Split::Train);
        assert!(matches!(err, Err(CorpusError::SpanOutOfBounds { .. })));
        let err = REInstance::new("x", tokens.clone(), span(1, 1), span(0, 1), "r", Split::Train);
        assert!(matches!(err, Err(CorpusError::SpanOutOfBounds { .. })));
        let err = REInstance::new("x", tokens.clone(), span(0, 1), span(0, 1), "r", Split::Train);
        assert!(matches!(err, Err(CorpusError::IdenticalSpans { .. })));
        let err = REInstance::new("x", tokens, span(0, 1), span(1, 2), " ", Split::Train);
        assert!(matches!(err, Err(CorpusError::Invalid { .. })));
    }

    #[test]
    fn canonical_rejects_unknown_and_missing_fields() {
        let line = r#"{"id":"a","tokens":["x","y"],"e1_start":0,"e1_end":1,"e2_start":1,"e2_end":2,"e1_type":"ORG","e2_type":"ORG","relation":"r","extra":1}"#;
        let err = parse_instances(line, &CorpusFormat::Canonical, Split::Train).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { record: 1, ref field, .. } if field == "extra"));

        let text = format!(
            "\n{}",
            r#"{"id":"a","tokens":["x","y"],"e1_start":0,"e1_end":1,"e2_start":1,"e2_end":2,"e1_type":"ORG","e2_type":"ORG"}"#
        );
        let err = parse_instances(&text, &CorpusFormat::Canonical, Split::Train).unwrap_err();
        assert!(
            matches!(err, CorpusError::Malformed { record: 2, ref field, .. } if field == "relation"),
            "{err}"
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"id":"a","tokens":["x","y"],"e1_start":0,"e1_end":1,"e2_start":1,"e2_end":2,"e1_type":"ORG","e2_type":"ORG","relation":"r"}"#;
        let text = format!("{line}\n{line}\n");
        let err = parse_instances(&text, &CorpusFormat::Canonical, Split::Train).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(ref id) if id == "a"));
        let err = Corpus::from_instances(vec![inst("d", "A", "B", "r"), inst("d", "A", "B", "r")]);
        assert!(matches!(err, Err(CorpusError::DuplicateId(_))));
    }

    #[test]
    fn native_inclusive_spans_and_array_layout() {
        let text = r#"[{"id": 17, "token": ["Acme", "Corp", "hired", "Bob"], "e1_start": 0, "e1_end": 1,
            "e2_start": 3, "e2_end": 3, "e1_type": "ORG", "e2_type": "PERSON", "relation": "org:per:employee_of",
            "docid": "ignored"}]"#;
        let mapping = FieldMapping {
            end_inclusive: true,
            ..FieldMapping::default()
        };
        let out = parse_instances(text, &CorpusFormat::RefindNative(mapping), Split::Test).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "17");
        assert_eq!((out[0].e1.start, out[0].e1.end), (0, 2));
        assert_eq!((out[0].e2.start, out[0].e2.end), (3, 4));
        assert_eq!(out[0].split, Split::Test);
    }

    #[test]
    fn native_mapping_errors_name_the_source_field() {
        let mapping = FieldMapping {
            relation: "label".into(),
            ..FieldMapping::default()
        };
        let text = r#"{"id":"a","token":["x","y"],"e1_start":0,"e1_end":1,"e2_start":1,"e2_end":2,"e1_type":"ORG","e2_type":"ORG","relation":"r"}"#;
        let err = parse_instances(text, &CorpusFormat::RefindNative(mapping), Split::Train).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { ref field, .. } if field == "label"));
    }

    #[test]
    fn schema_override_must_cover_observed_relations() {
        let mut entries = BTreeMap::new();
        entries.insert(TypePair::new("ORG", "ORG"), set(&["a"]));
        let schema = RelationSchema::from_entries(entries);
        let ok = Corpus::with_schema(vec![inst("1", "ORG", "ORG", "a")], schema.clone());
        assert!(ok.is_ok());
        let err = Corpus::with_schema(vec![inst("1", "ORG", "ORG", "b")], schema);
        assert!(matches!(err, Err(CorpusError::SchemaOverrideIncomplete { .. })));
    }

    #[test]
    fn schema_file_round_trip() {
        let c = Corpus::from_instances(vec![
            inst("1", "ORG", "PER", "r"),
            inst("2", "ORG", "ORG", "s"),
        ])
        .unwrap();
        let text = serde_json::to_string(&c.schema().to_file()).unwrap();
        let back = RelationSchema::from_file(serde_json::from_str(&text).unwrap());
        assert_eq!(&back, c.schema());
    }

    #[test]
    fn sampling_edge_cases() {
        let c = Corpus::from_instances(vec![
            inst("1", "ORG", "ORG", "r"),
            inst("2", "ORG", "ORG", "r"),
            inst("3", "ORG", "ORG", "s"),
        ])
        .unwrap();
        let pair = TypePair::new("ORG", "ORG");
        let none = HashSet::new();
        assert!(c.sample_by_relation(&pair, "r", 0, 1, &none).is_empty());
        let mut got: Vec<_> = c
            .sample_by_relation(&pair, "r", 4, 1, &none)
            .iter()
            .map(|i| i.id.clone())
            .collect();
        got.sort();
        assert_eq!(got, vec!["1", "2"]);
        let ex: HashSet<String> = ["1".to_string()].into();
        let got = c.sample_by_relation(&pair, "r", 4, 1, &ex);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, "2");
        assert!(c.sample_by_relation(&pair, "missing", 3, 1, &none).is_empty());
    }
}
