//! Runs an experiment over a test set and writes resumable prediction records.

pub mod config;
pub mod metrics;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, RetrieverKind};
pub use metrics::{compare_runs, compute_metrics, DeltaTable, MetricsError, MetricsReport};

use crate::corpus::{Corpus, REInstance, NO_RELATION};
use crate::digest::{json_digest, sha256_hex};
use crate::parallel::bounded_map;
use crate::promptkit::{build_prompt, parse_relation, DemoExample, DemoOrigin, ParseStatus, PromptBundle, PromptTemplate};
use crate::providers::{CompletionOptions, ProviderClient};
use crate::retrieval::DemoRetriever;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    CorruptRecords { path: PathBuf, line: usize, message: String },
    #[error(
        "{path} holds records from a different configuration ({found}, expected {expected}); \
         remove it or choose another output directory"
    )]
    DigestMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{failures} of {total} test instances failed, above the allowed fraction {allowed}")]
    FailureThreshold { failures: usize, total: usize, allowed: f64 },
    #[error("duplicate test id `{0}`")]
    DuplicateTestId(String),
    #[error("test instance `{id}`: {message}")]
    Instance { id: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub test_id: String,
    pub gold: String,
    pub predicted: String,
    pub parse_status: ParseStatus,
    pub prompt_digest: String,
    pub demo_ids: Vec<String>,
    pub raw_completion: Option<String>,
    pub latency_ms: u64,
    pub config_digest: String,
    pub template_version: String,
    pub error: Option<String>,
}

impl Default for PredictionRecord {
    fn default() -> Self {
        Self {
            test_id: String::new(),
            gold: String::new(),
            predicted: NO_RELATION.to_string(),
            parse_status: ParseStatus::Error,
            prompt_digest: String::new(),
            demo_ids: Vec::new(),
            raw_completion: None,
            latency_ms: 0,
            config_digest: String::new(),
            template_version: String::new(),
            error: None,
        }
    }
}

impl PredictionRecord {
    pub fn failed(&self) -> bool {
        self.parse_status == ParseStatus::Error
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Records for the test set, in test order.
    pub records: Vec<PredictionRecord>,
    /// Records found on disk from an earlier, interrupted run.
    pub reused: usize,
    pub computed: usize,
    pub failures: usize,
}

/// Everything needed to predict one test instance.
pub struct Experiment<'a> {
    pub config: &'a ExperimentConfig,
    /// Demonstration pool; its schema decides the permissible relations.
    pub train: &'a Corpus,
    pub retriever: &'a dyn DemoRetriever,
    pub completer: &'a ProviderClient,
    pub template: &'a PromptTemplate,
    /// Write each prompt here as `<test_id>.txt` when set.
    pub prompt_dump: Option<PathBuf>,
}

impl<'a> Experiment<'a> {
    /// Identifies everything that can change a prediction: the semantic
    /// configuration, the template and the demonstration pool.
    pub fn config_digest(&self) -> String {
        let key = serde_json::json!({
            "config": self.config.semantic_view(),
            "template": self.template.version(),
            "train": self.train.digest(),
        });
        json_digest(&key).expect("digest input serializes")
    }

    pub fn prompt_for(&self, test: &REInstance) -> Result<PromptBundle, RunError> {
        let instance_err = |message: String| RunError::Instance {
            id: test.id.clone(),
            message,
        };
        let neighbors = self
            .retriever
            .retrieve(test, self.config.effective_k())
            .map_err(|e| instance_err(e.to_string()))?;
        let retrieved = neighbors
            .iter()
            .map(|n| {
                self.train
                    .get(&n.id)
                    .map(|inst| DemoExample::from_instance(inst, DemoOrigin::Retrieved))
                    .ok_or_else(|| instance_err(format!("retrieved id `{}` is not in the training pool", n.id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        build_prompt(
            test,
            &retrieved,
            self.train.schema(),
            self.train,
            &self.config.prompt_options(),
            self.template,
        )
        .map_err(|e| instance_err(e.to_string()))
    }

    /// Predicts one instance. Failures are recorded, never raised.
    pub fn predict_one(&self, test: &REInstance, config_digest: &str) -> PredictionRecord {
        let mut record = PredictionRecord {
            test_id: test.id.clone(),
            gold: test.relation.clone(),
            config_digest: config_digest.to_string(),
            template_version: self.template.version().to_string(),
            ..PredictionRecord::default()
        };
        let bundle = match self.prompt_for(test) {
            Ok(b) => b,
            Err(e) => {
                tracing::warn!(test = %test.id, error = %e, "prompt assembly failed");
                record.error = Some(e.to_string());
                return record;
            }
        };
        record.prompt_digest = sha256_hex(bundle.text.as_bytes());
        record.demo_ids = bundle.demo_ids.clone();
        if let Some(dir) = &self.prompt_dump {
            let path = dir.join(format!("{}.txt", sanitize_file_name(&test.id)));
            if let Err(e) = fs::write(&path, &bundle.text) {
                tracing::warn!(path = %path.display(), error = %e, "could not dump prompt");
            }
        }

        let options = CompletionOptions {
            max_tokens: self.config.prompt.max_tokens,
            temperature: 0.0,
        };
        let started = Instant::now();
        let result = self.completer.complete(&bundle.text, &options);
        // Mock runs use a frozen clock so their records are reproducible.
        record.latency_ms = if self.completer.is_mock() {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
        match result {
            Ok(raw) => {
                let permissible = bundle.permissible.iter().cloned().collect();
                let parsed = parse_relation(&raw, &permissible);
                if parsed.status == ParseStatus::Fallback {
                    tracing::debug!(test = %test.id, raw = %raw, "unparseable completion");
                }
                record.predicted = parsed.label;
                record.parse_status = parsed.status;
                record.raw_completion = Some(raw);
            }
            Err(e) => {
                tracing::warn!(test = %test.id, error = %e, "completion failed");
                record.error = Some(e.to_string());
            }
        }
        record
    }

    /// Predicts every test instance, appending to `records_path`.
    ///
    /// Records already on disk under the same configuration digest are kept
    /// and skipped, so an interrupted run resumes where it stopped. A
    /// partially written trailing line is discarded first.
    pub fn run(&self, tests: &[REInstance], records_path: &Path) -> Result<RunOutcome, RunError> {
        let digest = self.config_digest();
        let mut seen = std::collections::HashSet::new();
        for t in tests {
            if !seen.insert(t.id.as_str()) {
                return Err(RunError::DuplicateTestId(t.id.clone()));
            }
        }
        if let Some(dir) = &self.prompt_dump {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }

        let existing = recover_records(records_path)?;
        if let Some(other) = existing.iter().find(|r| r.config_digest != digest) {
            return Err(RunError::DigestMismatch {
                path: records_path.to_path_buf(),
                found: other.config_digest.clone(),
                expected: digest,
            });
        }
        let mut done: std::collections::HashMap<String, PredictionRecord> =
            existing.into_iter().map(|r| (r.test_id.clone(), r)).collect();
        let reused = tests.iter().filter(|t| done.contains_key(&t.id)).count();
        if reused > 0 {
            tracing::info!(reused, total = tests.len(), "resuming from existing records");
        }

        let pending: Vec<&REInstance> = tests.iter().filter(|t| !done.contains_key(&t.id)).collect();
        let total = tests.len();
        let allowed = self.config.run.max_failure_fraction;
        let mut failures = done.values().filter(|r| r.failed()).count();
        let workers = self.config.provider.max_parallel.max(1);

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(records_path)
            .map_err(io_err(records_path))?;
        let mut out = BufWriter::new(file);
        let mut computed = 0;
        for chunk in pending.chunks(workers) {
            let fresh = bounded_map(chunk, workers, |t| self.predict_one(t, &digest));
            for r in fresh {
                let line = serde_json::to_string(&r).expect("record serializes");
                writeln!(out, "{line}").map_err(io_err(records_path))?;
                failures += usize::from(r.failed());
                computed += 1;
                done.insert(r.test_id.clone(), r);
            }
            out.flush().map_err(io_err(records_path))?;
            if failures as f64 > allowed * total as f64 {
                return Err(RunError::FailureThreshold { failures, total, allowed });
            }
        }

        let records = tests
            .iter()
            .map(|t| done.remove(&t.id).expect("every test id has a record"))
            .collect();
        Ok(RunOutcome {
            records,
            reused,
            computed,
            failures,
        })
    }
}

/// Convenience wrapper over [`Experiment::run`] without prompt dumping.
pub fn run_experiment(
    config: &ExperimentConfig,
    train: &Corpus,
    tests: &[REInstance],
    retriever: &dyn DemoRetriever,
    completer: &ProviderClient,
    template: &PromptTemplate,
    records_path: &Path,
) -> Result<RunOutcome, RunError> {
    Experiment {
        config,
        train,
        retriever,
        completer,
        template,
        prompt_dump: None,
    }
    .run(tests, records_path)
}

fn sanitize_file_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn parse_lines(path: &Path, text: &str) -> Result<Vec<PredictionRecord>, RunError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::CorruptRecords {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads a complete records file.
pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_lines(path, &text)
}

/// Reads records for resumption, truncating an unterminated last line.
/// A missing file yields no records.
pub fn recover_records(path: &Path) -> Result<Vec<PredictionRecord>, RunError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => i + 1,
        None => 0,
    };
    if complete < text.len() {
        tracing::warn!(path = %path.display(), bytes = text.len() - complete, "dropping partial trailing record");
        let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        file.set_len(complete as u64).map_err(io_err(path))?;
    }
    parse_lines(path, &text[..complete])
}

/// Writes records as JSONL, replacing `path`.
pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::{EntitySpan, Split};
    use crate::providers::mock::{MajorityDemoCompleter, ScriptedCompleter};
    use crate::retrieval::NoRetriever;

    fn inst(id: &str, pair: (&str, &str), rel: &str) -> REInstance {
        REInstance::new(
            id,
            vec!["Acme".into(), "hired".into(), "Bo".into(), format!("w{id}")],
            EntitySpan::new(0, 1, pair.0),
            EntitySpan::new(2, 3, pair.1),
            rel,
            Split::Test,
        )
        .unwrap()
    }

    fn fixture() -> (Corpus, Vec<REInstance>) {
        let mut train = Vec::new();
        for i in 0..6 {
            let rel = if i % 3 == 0 { NO_RELATION } else { "employee_of" };
            train.push(inst(&format!("tr{i}"), ("PER", "ORG"), rel));
        }
        let tests = vec![
            inst("te0", ("PER", "ORG"), "employee_of"),
            inst("te1", ("PER", "ORG"), NO_RELATION),
            inst("te2", ("PER", "ORG"), "employee_of"),
        ];
        (Corpus::from_instances(train).unwrap(), tests)
    }

    fn config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.retriever.kind = RetrieverKind::None;
        c.prompt.r_per_class = 2;
        c.provider.max_parallel = 2;
        c
    }

    #[test]
    fn majority_run_and_resume() {
        let (train, tests) = fixture();
        let cfg = config();
        let client = ProviderClient::new(Arc::new(MajorityDemoCompleter));
        let template = PromptTemplate::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");

        let first = run_experiment(&cfg, &train, &tests, &NoRetriever, &client, &template, &path).unwrap();
        assert_eq!(first.computed, 3);
        // Two employee_of and two no_relation demos tie; the smaller label wins.
        assert!(first.records.iter().all(|r| r.predicted == "employee_of"));
        assert!(first.records.iter().all(|r| r.demo_ids.len() == 4 && r.latency_ms == 0));
        let bytes = fs::read(&path).unwrap();

        // Cut the file mid-way through the last record and resume.
        let keep = bytes.len() - 10;
        fs::write(&path, &bytes[..keep]).unwrap();
        let second = run_experiment(&cfg, &train, &tests, &NoRetriever, &client, &template, &path).unwrap();
        assert_eq!((second.reused, second.computed), (2, 1));
        assert_eq!(fs::read(&path).unwrap(), bytes);
        assert_eq!(second.records, first.records);
    }

    #[test]
    fn changed_config_is_refused() {
        let (train, tests) = fixture();
        let cfg = config();
        let client = ProviderClient::new(Arc::new(MajorityDemoCompleter));
        let template = PromptTemplate::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        run_experiment(&cfg, &train, &tests, &NoRetriever, &client, &template, &path).unwrap();
        let mut other = cfg.clone();
        other.run.seed = 99;
        let err = run_experiment(&other, &train, &tests, &NoRetriever, &client, &template, &path).unwrap_err();
        assert!(matches!(err, RunError::DigestMismatch { .. }));
    }

    #[test]
    fn failures_are_recorded_then_abort() {
        let (train, mut tests) = fixture();
        // An unseen type pair cannot be prompted.
        tests.push(inst("te3", ("ORG", "ORG"), "acquired_by"));
        let mut cfg = config();
        let client = ProviderClient::new(Arc::new(ScriptedCompleter::new("garbage")));
        let template = PromptTemplate::default();
        let dir = tempfile::tempdir().unwrap();

        cfg.run.max_failure_fraction = 0.5;
        let ok = run_experiment(&cfg, &train, &tests, &NoRetriever, &client, &template, &dir.path().join("a.jsonl")).unwrap();
        assert_eq!(ok.failures, 1);
        let bad = &ok.records[3];
        assert_eq!((bad.predicted.as_str(), bad.parse_status), (NO_RELATION, ParseStatus::Error));
        assert!(bad.error.as_deref().unwrap().contains("ORG"));
        assert_eq!(ok.records[0].parse_status, ParseStatus::Fallback);

        cfg.run.max_failure_fraction = 0.1;
        let err = run_experiment(&cfg, &train, &tests, &NoRetriever, &client, &template, &dir.path().join("b.jsonl")).unwrap_err();
        assert!(matches!(err, RunError::FailureThreshold { failures: 1, total: 4, .. }));
    }
}
