//! `icl-relex`: command-line driver for the relation extraction pipeline.

mod artifacts;
mod settings;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use icl_relex::corpus::{read_instances, to_canonical_jsonl, Corpus, CorpusFormat, REInstance, RelationSchema, Split};
use icl_relex::epr::{label_pairs, mine_candidates, score_candidates, train_adapter, AdapterModel, TrainingPair};
use icl_relex::knn::VectorIndex;
use icl_relex::parallel::bounded_map;
use icl_relex::promptkit::{render_instance, PromptTemplate};
use icl_relex::providers::mock::{EditDistanceScorer, GoldLeakCompleter, HashEmbedder, MajorityDemoCompleter, ScriptedCompleter};
use icl_relex::providers::{Backend, Capability, DiskCache, HttpBackend, HttpModels, ProviderClient, RoutedBackend};
use icl_relex::retrieval::{DemoRetriever, EprRetriever, KnnRetriever, NoRetriever};
use icl_relex::runner::config::MockCompletion;
use icl_relex::NO_RELATION;
use icl_relex::runner::{compare_runs, compute_metrics, read_records, Experiment, ExperimentConfig, MetricsError, MetricsReport, RetrieverKind, RunError};

use artifacts::Artifact;

/// Exit codes.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PROVIDER: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "icl-relex", version, about = "Relation extraction with retrieved in-context demonstrations")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set retriever.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `run.output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use deterministic offline providers instead of HTTP endpoints.
    #[arg(long, global = true)]
    mock_providers: bool,
    /// -v for debug, -vv for trace logging.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the configured corpora and write canonical copies plus the schema.
    Ingest,
    /// Embed every train and test instance.
    Embed,
    /// Build the exact cosine index over training embeddings.
    Index,
    /// Mine and score candidate demonstrations, writing contrastive training pairs.
    EprMine,
    /// Train the retrieval adapter from mined pairs.
    EprTrain,
    /// Run the experiment and write prediction records.
    Predict {
        /// Print the first prompt and exit without calling the completion provider.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score `records.jsonl` and write `report.json`.
    Evaluate {
        /// Records file (defaults to `<out>/records.jsonl`).
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Print metric deltas between two reports.
    Compare { a: PathBuf, b: PathBuf },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

struct CliError {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, CliError>;

fn usage(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

fn data(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_DATA,
        error: error.into(),
    }
}

fn provider(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_PROVIDER,
        error: error.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = settings::load(cli.config.as_deref(), &cli.overrides)
        .context("loading configuration")
        .map_err(usage)?;
    if let Some(out) = &cli.out {
        config.run.output_dir = out.clone();
    }
    config.validate().map_err(usage)?;
    let ctx = App {
        config,
        mock: cli.mock_providers,
    };

    let stage = cli.command.stage();
    let result = match cli.command {
        Command::Ingest => ctx.ingest(),
        Command::Embed => ctx.embeddings().map(|_| ()),
        Command::Index => ctx.index().map(|_| ()),
        Command::EprMine => ctx.epr_pairs().map(|_| ()),
        Command::EprTrain => ctx.adapter().map(|_| ()),
        Command::Predict { dry_run } => ctx.predict(dry_run),
        Command::Evaluate { records } => ctx.evaluate(records),
        Command::Compare { a, b } => compare(&a, &b),
        Command::ShowConfig => ctx.show_config(),
    };
    result.map_err(|e| CliError {
        code: e.code,
        error: e.error.context(stage),
    })
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Embed => "embed",
            Command::Index => "index",
            Command::EprMine => "epr-mine",
            Command::EprTrain => "epr-train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Compare { .. } => "compare",
            Command::ShowConfig => "show-config",
        }
    }
}

fn compare(a: &Path, b: &Path) -> CliResult<()> {
    let load = |p: &Path| -> CliResult<MetricsReport> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(data)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing report {}", p.display()))
            .map_err(data)
    };
    let table = compare_runs(&load(a)?, &load(b)?).map_err(data)?;
    print!("{table}");
    Ok(())
}

/// Resolved configuration plus provider mode.
struct App {
    config: ExperimentConfig,
    mock: bool,
}

struct Data {
    train: Corpus,
    tests: Vec<REInstance>,
}

impl App {
    fn out_dir(&self) -> CliResult<&Path> {
        let dir = self.config.run.output_dir.as_path();
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))
            .map_err(data)?;
        Ok(dir)
    }

    fn path(&self, name: &str) -> CliResult<PathBuf> {
        Ok(self.out_dir()?.join(name))
    }

    fn load_data(&self) -> CliResult<Data> {
        let cfg = &self.config.data;
        let format: CorpusFormat = cfg.corpus_format();
        let train = read_instances(&cfg.train_path, &format, Split::Train).map_err(data)?;
        let train = match &cfg.schema_path {
            Some(p) => {
                let schema = RelationSchema::load(p).map_err(data)?;
                Corpus::with_schema(train, schema).map_err(data)?
            }
            None => Corpus::from_instances(train).map_err(data)?,
        };
        let mut tests = read_instances(&cfg.test_path, &format, Split::Test).map_err(data)?;
        if let Some(n) = cfg.max_test {
            tests.truncate(n);
        }
        for t in &tests {
            t.validate().map_err(data)?;
            if train.contains(&t.id) {
                return Err(data(anyhow!("test id `{}` also appears in the training data", t.id)));
            }
        }
        if tests.is_empty() {
            return Err(data(MetricsError::EmptyTestSet));
        }
        Ok(Data { train, tests })
    }

    fn cache(&self) -> CliResult<DiskCache> {
        let root = match &self.config.provider.cache_dir {
            Some(dir) => dir.clone(),
            None => self.path("cache")?,
        };
        Ok(DiskCache::new(root))
    }

    fn client(&self, backend: Arc<dyn Backend>) -> CliResult<ProviderClient> {
        Ok(ProviderClient::with_config(backend, &self.config.provider, Some(self.cache()?)))
    }

    fn http(&self) -> Arc<HttpBackend> {
        let p = &self.config.provider;
        Arc::new(HttpBackend::new(
            &p.base_url,
            HttpModels {
                embedding: p.embedding_model.clone(),
                completion: p.completion_model.clone(),
                scoring: p.scoring_model.clone(),
            },
            HttpBackend::api_key_from_env(&p.api_key_env),
            Duration::from_secs(p.timeout_secs),
        ))
    }

    fn embedder(&self) -> CliResult<ProviderClient> {
        if self.mock {
            let m = &self.config.mock;
            return self.client(Arc::new(HashEmbedder::new(m.embedding_dim, m.embedding_seed)));
        }
        self.client(self.http())
    }

    fn scorer(&self) -> CliResult<ProviderClient> {
        if self.mock {
            return self.client(Arc::new(EditDistanceScorer));
        }
        self.client(self.http())
    }

    fn completer(&self, tests: &[REInstance]) -> CliResult<ProviderClient> {
        if !self.mock {
            return self.client(self.http());
        }
        let backend: Arc<dyn Backend> = match self.config.mock.completion {
            MockCompletion::Majority => Arc::new(MajorityDemoCompleter),
            MockCompletion::Scripted => Arc::new(ScriptedCompleter::new(self.config.mock.scripted_answer.clone())),
            MockCompletion::GoldLeak => {
                let gold: HashMap<String, String> = tests
                    .iter()
                    .map(|t| (render_instance(t, false), t.relation.clone()))
                    .collect();
                Arc::new(GoldLeakCompleter::new(gold))
            }
        };
        // The completion client never embeds or scores; route those to the
        // same backend so every capability reports as mock.
        let routed = RoutedBackend {
            embedding: backend.clone(),
            completion: backend.clone(),
            scoring: backend,
        };
        self.client(Arc::new(routed))
    }

    fn template(&self) -> CliResult<PromptTemplate> {
        match &self.config.prompt.template_path {
            Some(p) => PromptTemplate::load(p).map_err(data),
            None => Ok(PromptTemplate::default()),
        }
    }

    fn ingest(&self) -> CliResult<()> {
        let d = self.load_data()?;
        let dir = self.path("corpus")?;
        fs::create_dir_all(&dir).map_err(|e| data(anyhow!(e)))?;
        let write = |name: &str, text: String| -> CliResult<()> {
            let p = dir.join(name);
            fs::write(&p, text).with_context(|| format!("writing {}", p.display())).map_err(data)
        };
        write("train.jsonl", to_canonical_jsonl(d.train.instances()))?;
        write("test.jsonl", to_canonical_jsonl(&d.tests))?;
        let schema = serde_json::to_string_pretty(&d.train.schema().to_file()).expect("schema serializes");
        write("schema.json", schema + "\n")?;

        let relations = d.train.schema().all_relations().iter().filter(|r| *r != NO_RELATION).count();
        println!(
            "train: {} instances, {} type pairs, {} relations plus {} (digest {})",
            d.train.len(),
            d.train.schema().type_pair_count(),
            relations,
            NO_RELATION,
            &d.train.digest()[..12]
        );
        println!("test:  {} instances", d.tests.len());
        for (pair, relations) in d.train.schema().entries() {
            let names: Vec<&str> = relations.iter().map(String::as_str).collect();
            println!("  ({}, {}): {}", pair.head, pair.tail, names.join(", "));
        }
        let unseen = d.tests.iter().filter(|t| d.train.schema().permissible_for(&t.type_pair()).is_err()).count();
        if unseen > 0 {
            tracing::warn!(unseen, "test instances with a type pair absent from training data");
        }
        Ok(())
    }

    /// Embeddings for all train and test instances, keyed by id.
    fn embeddings(&self) -> CliResult<HashMap<String, Vec<f64>>> {
        let d = self.load_data()?;
        self.embeddings_for(&d)
    }

    fn embeddings_for(&self, d: &Data) -> CliResult<HashMap<String, Vec<f64>>> {
        let client = self.embedder()?;
        let all: Vec<&REInstance> = d.train.instances().iter().chain(&d.tests).collect();
        let texts: Vec<String> = all.iter().map(|i| render_instance(i, false)).collect();
        let key = serde_json::json!({
            "model": client.model_tag(Capability::Embedding),
            "inputs": all.iter().zip(&texts).map(|(i, t)| (i.id.as_str(), t.as_str())).collect::<Vec<_>>(),
        });
        let art = Artifact::new(self.path("embeddings.bin")?, &key);
        if art.is_fresh() {
            if let Ok(table) = icl_relex::knn::load_vectors(art.path()) {
                tracing::info!(path = %art.path().display(), "embeddings reused");
                return Ok(table.rows.into_iter().collect());
            }
        }
        let vectors = client.embed_batch(&texts).map_err(provider)?;
        let dim = vectors.first().map_or(0, |v| v.dim());
        let tag = client.model_tag(Capability::Embedding);
        icl_relex::knn::save_vectors(
            art.path(),
            dim,
            &tag,
            all.iter().zip(&vectors).map(|(i, v)| (i.id.as_str(), v.values())),
        )
        .map_err(data)?;
        art.mark().map_err(data)?;
        tracing::info!(path = %art.path().display(), count = vectors.len(), dim, "embeddings computed");
        // Reload so downstream users see the stored (f32-rounded) values.
        let table = icl_relex::knn::load_vectors(art.path()).map_err(data)?;
        Ok(table.rows.into_iter().collect())
    }

    fn index(&self) -> CliResult<VectorIndex> {
        let d = self.load_data()?;
        let emb = self.embeddings_for(&d)?;
        self.index_for(&d, &emb)
    }

    fn index_for(&self, d: &Data, emb: &HashMap<String, Vec<f64>>) -> CliResult<VectorIndex> {
        let key = serde_json::json!({
            "embeddings": artifacts::read_key(&self.path("embeddings.bin")?),
            "train": d.train.digest(),
        });
        let art = Artifact::new(self.path("index.bin")?, &key);
        if art.is_fresh() {
            if let Ok(index) = VectorIndex::load(art.path()) {
                tracing::info!(path = %art.path().display(), "index reused");
                return Ok(index);
            }
        }
        let dim = emb.values().next().map_or(0, Vec::len);
        let rows = d.train.instances().iter().map(|i| {
            let v = emb.get(&i.id).cloned().unwrap_or_default();
            (i.id.clone(), v)
        });
        let index = VectorIndex::from_rows(dim, "embeddings", rows).map_err(data)?;
        index.save(art.path()).map_err(data)?;
        art.mark().map_err(data)?;
        tracing::info!(path = %art.path().display(), rows = index.len(), "index computed");
        Ok(index)
    }

    fn epr_pairs(&self) -> CliResult<Vec<TrainingPair>> {
        let d = self.load_data()?;
        let emb = self.embeddings_for(&d)?;
        let index = self.index_for(&d, &emb)?;
        self.epr_pairs_for(&d, &index)
    }

    fn epr_pairs_for(&self, d: &Data, index: &VectorIndex) -> CliResult<Vec<TrainingPair>> {
        let epr = &self.config.epr;
        let scorer = self.scorer()?;
        let key = serde_json::json!({
            "index": artifacts::read_key(&self.path("index.bin")?),
            "scorer": scorer.model_tag(Capability::Scoring),
            "length_normalized": self.config.provider.length_normalized_scores,
            "candidates": epr.candidates,
            "positives": epr.positives,
            "negatives": epr.negatives,
            "scoring_mode": epr.scoring_mode,
        });
        let art = Artifact::new(self.path("epr_pairs.jsonl")?, &key);
        if art.is_fresh() {
            if let Ok(pairs) = read_pairs(art.path()) {
                tracing::info!(path = %art.path().display(), pairs = pairs.len(), "epr pairs reused");
                return Ok(pairs);
            }
        }

        let anchors: Vec<&REInstance> = d.train.instances().iter().collect();
        let mined = bounded_map(&anchors, self.config.provider.max_parallel, |anchor| {
            let candidates = match mine_candidates(&d.train, index, anchor, epr.candidates) {
                Ok(c) if c.len() >= epr.positives + epr.negatives => c,
                Ok(c) => {
                    tracing::debug!(anchor = %anchor.id, available = c.len(), "too few candidates; anchor skipped");
                    return Ok(Vec::new());
                }
                Err(e) => {
                    tracing::debug!(anchor = %anchor.id, error = %e, "anchor skipped");
                    return Ok(Vec::new());
                }
            };
            let scored = score_candidates(&scorer, &d.train, anchor, &candidates, epr.scoring_mode)?;
            label_pairs(&scored, &anchor.id, epr.positives, epr.negatives)
        });
        let mut pairs = Vec::new();
        let mut used = 0;
        for r in mined {
            let p = r.map_err(provider)?;
            used += usize::from(!p.is_empty());
            pairs.extend(p);
        }
        if pairs.is_empty() {
            return Err(data(anyhow!(
                "no anchor has {} candidates within its type pair; lower epr.positives/negatives",
                epr.positives + epr.negatives
            )));
        }
        let mut text = String::new();
        for p in &pairs {
            text.push_str(&serde_json::to_string(p).expect("pair serializes"));
            text.push('\n');
        }
        fs::write(art.path(), text).map_err(|e| data(anyhow!(e)))?;
        art.mark().map_err(data)?;
        tracing::info!(path = %art.path().display(), anchors = used, skipped = anchors.len() - used, pairs = pairs.len(), "epr pairs computed");
        Ok(pairs)
    }

    fn adapter(&self) -> CliResult<AdapterModel> {
        let d = self.load_data()?;
        let emb = self.embeddings_for(&d)?;
        let index = self.index_for(&d, &emb)?;
        let pairs = self.epr_pairs_for(&d, &index)?;
        let key = serde_json::json!({
            "pairs": artifacts::read_key(&self.path("epr_pairs.jsonl")?),
            "train": self.config.epr.train,
        });
        let art = Artifact::new(self.path("adapter.bin")?, &key);
        if art.is_fresh() {
            if let Ok(a) = AdapterModel::load(art.path()) {
                tracing::info!(path = %art.path().display(), "adapter reused");
                return Ok(a);
            }
        }
        let table: HashMap<String, icl_relex::EmbeddingVector> = emb
            .into_iter()
            .map(|(id, v)| icl_relex::EmbeddingVector::new(v, "stored").map(|e| (id, e)))
            .collect::<Result<_, _>>()
            .map_err(data)?;
        let adapter = train_adapter(&pairs, &table, &self.config.epr.train).map_err(data)?;
        adapter.save(art.path()).map_err(data)?;
        art.mark().map_err(data)?;
        tracing::info!(path = %art.path().display(), final_loss = adapter.meta.loss_curve.last().copied().unwrap_or(f64::NAN), "adapter computed");
        Ok(adapter)
    }

    fn retriever(&self, d: &Data) -> CliResult<Box<dyn DemoRetriever>> {
        let kind = self.config.retriever.kind;
        if kind == RetrieverKind::None || self.config.retriever.k == 0 {
            return Ok(Box::new(NoRetriever));
        }
        let emb = self.embeddings_for(d)?;
        let index = self.index_for(d, &emb)?;
        let restrict = self.config.retriever.restrict_to_type_pair;
        let queries: HashMap<String, Vec<f64>> = d
            .tests
            .iter()
            .filter_map(|t| emb.get(&t.id).map(|v| (t.id.clone(), v.clone())))
            .collect();
        match kind {
            RetrieverKind::Knn => Ok(Box::new(KnnRetriever::new(index, queries, &d.train, restrict))),
            RetrieverKind::Epr => {
                let path = self.path("adapter.bin")?;
                if !path.exists() {
                    return Err(data(anyhow!(
                        "retriever.kind = \"epr\" needs a trained adapter at {}; run `icl-relex epr-train` first",
                        path.display()
                    )));
                }
                let adapter = AdapterModel::load(&path).map_err(data)?;
                let r = EprRetriever::new(&adapter, &index, queries, &d.train, restrict).map_err(data)?;
                Ok(Box::new(r))
            }
            RetrieverKind::None => unreachable!(),
        }
    }

    fn predict(&self, dry_run: bool) -> CliResult<()> {
        let d = self.load_data()?;
        let template = self.template()?;
        let retriever = self.retriever(&d)?;
        let completer = self.completer(&d.tests)?;
        let out = self.out_dir()?;
        let prompt_dump = self.config.run.dump_prompts.then(|| out.join("prompts"));
        let exp = Experiment {
            config: &self.config,
            train: &d.train,
            retriever: retriever.as_ref(),
            completer: &completer,
            template: &template,
            prompt_dump,
        };
        if dry_run {
            let bundle = exp.prompt_for(&d.tests[0]).map_err(data)?;
            println!("{}", bundle.text);
            eprintln!(
                "dry run: test {} with {} demos, ~{} tokens; template {}",
                bundle.test_id,
                bundle.demos.len(),
                bundle.token_estimate,
                bundle.template_version
            );
            return Ok(());
        }

        let resolved = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(out.join("config.json"), resolved + "\n").map_err(|e| data(anyhow!(e)))?;
        let outcome = exp.run(&d.tests, &out.join("records.jsonl")).map_err(|e| match e {
            RunError::FailureThreshold { .. } => provider(e),
            other => data(other),
        })?;
        let stats = completer.stats();
        tracing::info!(
            reused = outcome.reused,
            computed = outcome.computed,
            failures = outcome.failures,
            cache_hits = stats.cache_hits,
            "predictions written"
        );
        println!(
            "{} records ({} computed, {} reused, {} failed) -> {}",
            outcome.records.len(),
            outcome.computed,
            outcome.reused,
            outcome.failures,
            out.join("records.jsonl").display()
        );
        Ok(())
    }

    fn evaluate(&self, records: Option<PathBuf>) -> CliResult<()> {
        let out = self.out_dir()?;
        let path = records.unwrap_or_else(|| out.join("records.jsonl"));
        let records = read_records(&path).map_err(data)?;
        let mut report = compute_metrics(&records).map_err(data)?;
        let config_path = path.with_file_name("config.json");
        // Echo the configuration the records were produced with, minus
        // locations, so reports from different output directories compare equal.
        report.config = match fs::read_to_string(&config_path) {
            Ok(text) => serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| data(anyhow!("{}: {e}", config_path.display())))?
                .semantic_view(),
            Err(_) => self.config.semantic_view(),
        };
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(out.join("report.json"), text + "\n").map_err(|e| data(anyhow!(e)))?;
        println!(
            "micro-F1 (excl. no_relation) {:.4}  micro-F1 (incl.) {:.4}  macro-F1 {:.4}  fallback {:.3}  n={}",
            report.micro_f1_excl_norel, report.micro_f1_incl_norel, report.macro_f1, report.fallback_rate, report.total
        );
        Ok(())
    }

    fn show_config(&self) -> CliResult<()> {
        print!("{}", toml::to_string_pretty(&self.config).map_err(usage)?);
        Ok(())
    }
}

fn read_pairs(path: &Path) -> anyhow::Result<Vec<TrainingPair>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
