//! Configuration loading: TOML file, then `--set key=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use icl_relex::runner::ExperimentConfig;
use toml::{Table, Value};

/// Secrets stay in the environment; a config carrying one is rejected.
const FORBIDDEN_KEYS: [&str; 1] = ["api_key"];

pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let mut t = text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?;
            if let Some(base) = p.parent() {
                resolve_paths(&mut t, base);
            }
            t
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    check_secrets(&table, "")?;
    Value::Table(table)
        .try_into::<ExperimentConfig>()
        .map_err(|e| anyhow!("invalid configuration: {e}"))
}

fn check_secrets(table: &Table, prefix: &str) -> anyhow::Result<()> {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if FORBIDDEN_KEYS.contains(&k.as_str()) {
            bail!("`{path}` must not appear in a config file; put the key in the environment variable named by provider.api_key_env");
        }
        if let Value::Table(t) = v {
            check_secrets(t, &path)?;
        }
    }
    Ok(())
}

/// Input paths written in a config file are relative to that file.
const FILE_RELATIVE: [(&str, &str); 4] = [
    ("data", "train_path"),
    ("data", "test_path"),
    ("data", "schema_path"),
    ("prompt", "template_path"),
];

fn resolve_paths(table: &mut Table, base: &Path) {
    for (section, key) in FILE_RELATIVE {
        let slot = table
            .get_mut(section)
            .and_then(Value::as_table_mut)
            .and_then(|t| t.get_mut(key));
        if let Some(Value::String(s)) = slot {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).to_string_lossy().into_owned();
            }
        }
    }
}

/// Parses the value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use icl_relex::runner::RetrieverKind;

    #[test]
    fn overrides_and_types() {
        let cfg = load(
            None,
            &["retriever.k=3".into(), "retriever.kind=none".into(), "run.output_dir=out/x".into(), "prompt.token_budget=900".into()],
        )
        .unwrap();
        assert_eq!(cfg.retriever.k, 3);
        assert_eq!(cfg.retriever.kind, RetrieverKind::None);
        assert_eq!(cfg.run.output_dir, Path::new("out/x"));
        assert_eq!(cfg.prompt.token_budget, Some(900));
    }

    #[test]
    fn file_paths_are_config_relative() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "[data]\ntrain_path = \"a/train.jsonl\"\ntest_path = \"/abs/test.jsonl\"\n").unwrap();
        let cfg = load(Some(&path), &["data.schema_path=rel/schema.json".into()]).unwrap();
        assert_eq!(cfg.data.train_path, dir.path().join("a/train.jsonl"));
        assert_eq!(cfg.data.test_path, Path::new("/abs/test.jsonl"));
        // Overrides stay relative to the working directory.
        assert_eq!(cfg.data.schema_path.as_deref(), Some(Path::new("rel/schema.json")));
    }

    #[test]
    fn rejects_secrets_and_unknown_keys() {
        let err = load(None, &["provider.api_key=sk-123".into()]).unwrap_err();
        assert!(err.to_string().contains("provider.api_key"));
        assert!(load(None, &["retriever.kk=3".into()]).is_err());
        assert!(load(None, &["retriever".into()]).is_err());
    }
}
