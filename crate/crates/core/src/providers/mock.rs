//! Deterministic offline backends.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::{Backend, Capability, CompletionOptions, ProviderError, ScoreResult};
use crate::promptkit::{demo_labels, extract_test_input, last_label};

/// Hash-based unit-norm embeddings.
///
/// Each text is expanded to `dim` components from SHA-256 blocks of
/// `(seed, counter, text)`, mapped to `[-1, 1)` and L2-normalized.
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    seen: AtomicUsize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self {
            dim,
            seed,
            seen: AtomicUsize::new(0),
        }
    }

    /// Number of texts embedded upstream so far.
    pub fn texts_seen(&self) -> usize {
        self.seen.load(Ordering::SeqCst)
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut raw = Vec::with_capacity(self.dim);
        let mut counter = 0u64;
        while raw.len() < self.dim {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(counter.to_le_bytes());
            h.update(text.as_bytes());
            let block = h.finalize();
            for chunk in block.chunks_exact(4) {
                if raw.len() == self.dim {
                    break;
                }
                let u = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                raw.push(u as f64 / 2f64.powi(31) - 1.0);
            }
            counter += 1;
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        // An all-zero draw would need 2^(32 * dim) luck; treat it as a hash bug.
        assert!(norm > 0.0, "degenerate mock embedding");
        raw.into_iter().map(|v| v / norm).collect()
    }
}

impl Backend for HashEmbedder {
    fn model_tag(&self, _: Capability) -> String {
        format!("mock-hash-{}-s{}", self.dim, self.seed)
    }

    fn is_mock(&self) -> bool {
        true
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.seen.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Lookup-table completions with a fallback answer.
pub struct ScriptedCompleter {
    table: HashMap<String, String>,
    default: String,
    calls: AtomicUsize,
}

impl ScriptedCompleter {
    pub fn new(default: impl Into<String>) -> Self {
        Self {
            table: HashMap::new(),
            default: default.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with(mut self, prompt: impl Into<String>, answer: impl Into<String>) -> Self {
        self.table.insert(prompt.into(), answer.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedCompleter {
    fn model_tag(&self, _: Capability) -> String {
        "mock-scripted".into()
    }

    fn is_mock(&self) -> bool {
        true
    }

    fn complete(&self, prompt: &str, _: &CompletionOptions) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.table.get(prompt).unwrap_or(&self.default).clone())
    }
}

/// Answers with the gold label of the prompt's test input.
///
/// Built from a map of rendered (unlabeled) test inputs to gold labels;
/// it bounds what the rest of the pipeline can score.
pub struct GoldLeakCompleter {
    gold: HashMap<String, String>,
}

impl GoldLeakCompleter {
    pub fn new(gold: HashMap<String, String>) -> Self {
        Self { gold }
    }
}

impl Backend for GoldLeakCompleter {
    fn model_tag(&self, _: Capability) -> String {
        "mock-gold-leak".into()
    }

    fn is_mock(&self) -> bool {
        true
    }

    fn complete(&self, prompt: &str, _: &CompletionOptions) -> Result<String, ProviderError> {
        let input = extract_test_input(prompt)
            .ok_or_else(|| ProviderError::InvalidRequest("prompt has no test block".into()))?;
        self.gold
            .get(input)
            .cloned()
            .ok_or_else(|| ProviderError::InvalidRequest(format!("unknown test input: {input}")))
    }
}

/// Answers with the most frequent demonstration label in the prompt.
///
/// Ties go to the lexicographically smallest label (the schema's order);
/// a prompt without demonstrations gets "no relation".
#[derive(Default)]
pub struct MajorityDemoCompleter;

impl MajorityDemoCompleter {
    pub fn answer(prompt: &str) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for label in demo_labels(prompt) {
            *counts.entry(label).or_default() += 1;
        }
        let mut best: Option<(&str, usize)> = None;
        for (label, n) in counts {
            if best.map_or(true, |(_, m)| n > m) {
                best = Some((label, n));
            }
        }
        best.map_or_else(|| "no relation".to_string(), |(l, _)| l.to_string())
    }
}

impl Backend for MajorityDemoCompleter {
    fn model_tag(&self, _: Capability) -> String {
        "mock-majority".into()
    }

    fn is_mock(&self) -> bool {
        true
    }

    fn complete(&self, prompt: &str, _: &CompletionOptions) -> Result<String, ProviderError> {
        Ok(Self::answer(prompt))
    }
}

/// Scores a target by negated edit distance to the demonstration label
/// found in the prefix (the last `Relation: <label>` line).
#[derive(Default)]
pub struct EditDistanceScorer;

impl EditDistanceScorer {
    pub fn score_of(prefix: &str, target: &str) -> ScoreResult {
        let gold = last_label(prefix).unwrap_or("");
        ScoreResult {
            total_logprob: -(levenshtein(gold, target) as f64),
            token_count: target.chars().count().div_ceil(4).max(1),
            mock: true,
        }
    }
}

impl Backend for EditDistanceScorer {
    fn model_tag(&self, _: Capability) -> String {
        "mock-edit-distance".into()
    }

    fn is_mock(&self) -> bool {
        true
    }

    fn score(&self, prefix: &str, target: &str) -> Result<ScoreResult, ProviderError> {
        Ok(Self::score_of(prefix, target))
    }
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(ca != cb));
            diag = up;
        }
    }
    row[b.len()]
}
