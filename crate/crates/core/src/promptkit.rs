//! Prompt assembly and completion parsing.
//!
//! A prompt is a task description, the list of relations permitted for the
//! test instance's type pair, the demonstrations, and the test input as the
//! final block. Demonstrations render as the context with `[E1]..[/E1]` and
//! `[E2]..[/E2]` markers followed by a `Relation: <label>` line; the test
//! block ends with a bare `Relation:` for the model to complete.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, REInstance, RelationSchema, NO_RELATION};
use crate::digest::sha256_hex;

pub const E1_OPEN: &str = "[E1]";
pub const E1_CLOSE: &str = "[/E1]";
pub const E2_OPEN: &str = "[E2]";
pub const E2_CLOSE: &str = "[/E2]";
const LABEL_LINE: &str = "Relation:";

/// Characters per token used for budget estimates.
pub const CHARS_PER_TOKEN: usize = 4;

const DEFAULT_TEMPLATE: &str = include_str!("../templates/relation_v1.txt");
const PLACEHOLDERS: [&str; 4] = ["{task_description}", "{classes}", "{demos}", "{test_input}"];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("template: {0}")]
    Template(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Renders the context with entity markers, optionally followed by the label line.
pub fn render_instance(inst: &REInstance, with_label: bool) -> String {
    let mut pieces = Vec::with_capacity(inst.tokens.len());
    for (i, token) in inst.tokens.iter().enumerate() {
        let mut piece = String::new();
        if inst.e1.start == i {
            piece.push_str(E1_OPEN);
        }
        if inst.e2.start == i {
            piece.push_str(E2_OPEN);
        }
        piece.push_str(token);
        // Close the later-opened span first so nested spans stay well formed.
        let closes = if inst.e2.start >= inst.e1.start {
            [(&inst.e2, E2_CLOSE), (&inst.e1, E1_CLOSE)]
        } else {
            [(&inst.e1, E1_CLOSE), (&inst.e2, E2_CLOSE)]
        };
        for (span, marker) in closes {
            if span.end == i + 1 {
                piece.push_str(marker);
            }
        }
        pieces.push(piece);
    }
    let mut out = pieces.join(" ");
    if with_label {
        out.push('\n');
        out.push_str(LABEL_LINE);
        out.push(' ');
        out.push_str(&inst.relation);
    }
    out
}

/// Removes entity markers and returns the whitespace-separated tokens.
pub fn strip_markers(rendered: &str) -> Vec<String> {
    let mut text = rendered.to_string();
    for m in [E1_OPEN, E1_CLOSE, E2_OPEN, E2_CLOSE] {
        text = text.replace(m, "");
    }
    text.split_whitespace().map(str::to_string).collect()
}

fn test_block(inst: &REInstance) -> String {
    format!("{}\n{}", render_instance(inst, false), LABEL_LINE)
}

/// The rendered test input of a prompt built by [`build_prompt`].
pub fn extract_test_input(prompt: &str) -> Option<&str> {
    let body = prompt.trim_end().strip_suffix(LABEL_LINE)?;
    let body = body.strip_suffix('\n')?;
    Some(body.rsplit("\n\n").next().unwrap_or(body))
}

/// Labels of all demonstrations in `prompt`, in order.
pub fn demo_labels(prompt: &str) -> impl Iterator<Item = &str> {
    prompt.lines().filter_map(|line| {
        line.strip_prefix(LABEL_LINE)
            .filter(|rest| rest.starts_with(' '))
            .map(str::trim)
            .filter(|l| !l.is_empty())
    })
}

/// Label of the last demonstration in `text`.
pub fn last_label(text: &str) -> Option<&str> {
    demo_labels(text).last()
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

/// A prompt template with `{task_description}`, `{classes}`, `{demos}` and
/// `{test_input}` placeholders; `{test_input}` must close the template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
    version: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::from_text("relation_v1", DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn from_text(name: &str, text: &str) -> Result<Self, PromptError> {
        for p in PLACEHOLDERS {
            match text.matches(p).count() {
                1 => {}
                0 => return Err(PromptError::Template(format!("missing placeholder {p}"))),
                _ => return Err(PromptError::Template(format!("placeholder {p} repeated"))),
            }
        }
        if !text.trim_end().ends_with("{test_input}") {
            return Err(PromptError::Template("{test_input} must be the final block".into()));
        }
        Ok(Self {
            text: text.to_string(),
            version: format!("{name}@{}", &sha256_hex(text)[..12]),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("template");
        Self::from_text(name, &text)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn fill(&self, task: &str, classes: &str, demos: &str, test_input: &str) -> String {
        let filled = self
            .text
            .replace("{task_description}", task)
            .replace("{classes}", classes)
            .replace("{demos}", demos)
            .replace("{test_input}", test_input);
        // An empty {demos} leaves a run of blank lines behind.
        let mut out = String::with_capacity(filled.len());
        let mut newlines = 0;
        for ch in filled.trim_end().chars() {
            if ch == '\n' {
                newlines += 1;
                if newlines > 2 {
                    continue;
                }
            } else {
                newlines = 0;
            }
            out.push(ch);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrigin {
    Retrieved,
    RandomClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoExample {
    pub instance_id: String,
    pub rendered_input: String,
    pub label_text: String,
    pub origin: DemoOrigin,
}

impl DemoExample {
    pub fn from_instance(inst: &REInstance, origin: DemoOrigin) -> Self {
        Self {
            instance_id: inst.id.clone(),
            rendered_input: render_instance(inst, false),
            label_text: inst.relation.clone(),
            origin,
        }
    }

    fn render(&self) -> String {
        format!("{}\n{} {}", self.rendered_input, LABEL_LINE, self.label_text)
    }
}

/// Placement of the two demonstration groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Retrieved demonstrations, then random per-class demonstrations.
    #[default]
    RetrievedFirst,
    /// Random per-class demonstrations, then retrieved ones, so the most
    /// similar demonstration sits right before the test input.
    RandomFirst,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    /// Random demonstrations per permissible relation.
    pub r_per_class: usize,
    pub seed: u64,
    pub order: DemoOrder,
    /// Estimated-token ceiling; random demonstrations are dropped first.
    pub token_budget: Option<usize>,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            r_per_class: 4,
            seed: 7,
            order: DemoOrder::RetrievedFirst,
            token_budget: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    /// Demonstration ids in prompt order.
    pub demo_ids: Vec<String>,
    pub demos: Vec<DemoExample>,
    pub permissible: Vec<String>,
    pub test_id: String,
    pub template_version: String,
    pub token_estimate: usize,
    /// Demonstrations removed to meet the token budget.
    pub dropped: usize,
}

pub fn task_description(head: &str, tail: &str) -> String {
    format!(
        "Classify the relation between two entities in a sentence from a financial filing. \
         The first entity is marked {E1_OPEN}...{E1_CLOSE} and has type {head}; the second is \
         marked {E2_OPEN}...{E2_CLOSE} and has type {tail}. Answer with exactly one relation \
         from the list of possible relations. If none of them holds, answer \"no relation\"."
    )
}

/// Assembles the prompt for `test`.
///
/// `retrieved` is in retriever order (most similar first); it is placed in
/// ascending similarity. Retrieved demonstrations whose label is outside the
/// permissible set are skipped. For every permissible relation, up to
/// `r_per_class` further demonstrations are sampled from `corpus`, never
/// repeating the test instance or a retrieved id.
pub fn build_prompt(
    test: &REInstance,
    retrieved: &[DemoExample],
    schema: &RelationSchema,
    corpus: &Corpus,
    options: &PromptOptions,
    template: &PromptTemplate,
) -> Result<PromptBundle, PromptError> {
    let pair = test.type_pair();
    let permissible = schema.permissible_for(&pair)?;

    let mut used: HashSet<String> = HashSet::from([test.id.clone()]);
    let mut nearest: Vec<DemoExample> = Vec::new();
    for demo in retrieved {
        if !permissible.contains(&demo.label_text) {
            tracing::warn!(test = %test.id, demo = %demo.instance_id, label = %demo.label_text,
                "retrieved demo label outside permissible set; skipped");
            continue;
        }
        if used.insert(demo.instance_id.clone()) {
            nearest.push(demo.clone());
        }
    }
    nearest.reverse();

    let mut per_class: Vec<Vec<DemoExample>> = Vec::with_capacity(permissible.len());
    for relation in permissible {
        let picked = corpus.sample_by_relation(&pair, relation, options.r_per_class, options.seed, &used);
        let demos: Vec<DemoExample> = picked
            .into_iter()
            .map(|i| DemoExample::from_instance(i, DemoOrigin::RandomClass))
            .collect();
        for d in &demos {
            used.insert(d.instance_id.clone());
        }
        per_class.push(demos);
    }

    let task = task_description(&pair.head, &pair.tail);
    let classes = permissible.iter().cloned().collect::<Vec<_>>().join(", ");
    let test_input = test_block(test);
    let assemble = |nearest: &[DemoExample], per_class: &[Vec<DemoExample>]| {
        let random = per_class.iter().flatten();
        let demos: Vec<DemoExample> = match options.order {
            DemoOrder::RetrievedFirst => nearest.iter().chain(random).cloned().collect(),
            DemoOrder::RandomFirst => random.chain(nearest.iter()).cloned().collect(),
        };
        let body = demos.iter().map(DemoExample::render).collect::<Vec<_>>().join("\n\n");
        (template.fill(&task, &classes, &body, &test_input), demos)
    };

    let (mut text, mut demos) = assemble(&nearest, &per_class);
    let mut dropped = 0;
    if let Some(budget) = options.token_budget {
        let mut cursor = 0;
        while estimate_tokens(&text) > budget {
            let classes_left: Vec<usize> = (0..per_class.len()).filter(|&c| !per_class[c].is_empty()).collect();
            if let Some(&class) = classes_left.iter().find(|&&c| c >= cursor).or(classes_left.first()) {
                per_class[class].pop();
                cursor = class + 1;
            } else if !nearest.is_empty() {
                // Least similar retrieved demo sits at the front.
                nearest.remove(0);
            } else {
                break;
            }
            dropped += 1;
            (text, demos) = assemble(&nearest, &per_class);
        }
        if dropped > 0 {
            tracing::info!(test = %test.id, dropped, budget, "dropped demos to fit token budget");
        }
    }

    Ok(PromptBundle {
        token_estimate: estimate_tokens(&text),
        demo_ids: demos.iter().map(|d| d.instance_id.clone()).collect(),
        demos,
        permissible: permissible.iter().cloned().collect(),
        test_id: test.id.clone(),
        template_version: template.version().to_string(),
        text,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    /// The trimmed answer is a permissible label verbatim (or "no relation").
    Exact,
    /// Matched after normalization.
    Normalized,
    /// Nothing matched; the label falls back to `no_relation`.
    Fallback,
    /// No answer was obtained (set by the runner, never by the parser).
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRelation {
    pub label: String,
    pub status: ParseStatus,
}

const PREFIXES: [&str; 4] = ["the relation is", "relation is", "relation:", "answer:"];
const NO_RELATION_FORMS: [&str; 3] = ["no_relation", "none", "norelation"];

/// Lowercases, strips answer prefixes and punctuation, and joins words with `_`.
pub fn normalize_label(text: &str) -> String {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let lowered = line.trim().to_lowercase();
    let mut rest = lowered.as_str();
    let is_filler = |c: char| c.is_whitespace() || !(c.is_alphanumeric() || c == '_');
    loop {
        rest = rest.trim_start_matches(is_filler);
        match PREFIXES.iter().find(|p| rest.starts_with(*p)) {
            Some(p) => rest = &rest[p.len()..],
            None => break,
        }
    }
    let cleaned: String = rest
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Maps a completion onto a permissible label, falling back to `no_relation`.
pub fn parse_relation(completion: &str, permissible: &BTreeSet<String>) -> ParsedRelation {
    let trimmed = completion.trim();
    if permissible.contains(trimmed) {
        return ParsedRelation {
            label: trimmed.to_string(),
            status: ParseStatus::Exact,
        };
    }
    if trimmed.eq_ignore_ascii_case("no relation") {
        return ParsedRelation {
            label: NO_RELATION.to_string(),
            status: ParseStatus::Exact,
        };
    }
    let norm = normalize_label(completion);
    if NO_RELATION_FORMS.contains(&norm.as_str()) {
        return ParsedRelation {
            label: NO_RELATION.to_string(),
            status: ParseStatus::Normalized,
        };
    }
    if let Some(label) = permissible.iter().find(|l| normalize_label(l) == norm && !norm.is_empty()) {
        return ParsedRelation {
            label: label.clone(),
            status: ParseStatus::Normalized,
        };
    }
    ParsedRelation {
        label: NO_RELATION.to_string(),
        status: ParseStatus::Fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntitySpan, Split};

    fn acme() -> REInstance {
        REInstance::new(
            "t",
            vec!["Acme".into(), "bought".into(), "Beta".into()],
            EntitySpan {
                start: 0,
                end: 1,
                entity_type: "ORG".into(),
            },
            EntitySpan {
                start: 2,
                end: 3,
                entity_type: "ORG".into(),
            },
            "acquired_by",
            Split::Train,
        )
        .unwrap()
    }

    fn perm(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn renders_markers_and_label() {
        assert_eq!(
            render_instance(&acme(), true),
            "[E1]Acme[/E1] bought [E2]Beta[/E2]\nRelation: acquired_by"
        );
        assert_eq!(render_instance(&acme(), false), "[E1]Acme[/E1] bought [E2]Beta[/E2]");
    }

    #[test]
    fn adjacent_and_nested_spans_keep_tokens() {
        let tokens: Vec<String> = ["Acme", "Corp", "CEO"].iter().map(|s| s.to_string()).collect();
        let span = |s, e, t: &str| EntitySpan {
            start: s,
            end: e,
            entity_type: t.into(),
        };
        let adj = REInstance::new("a", tokens.clone(), span(0, 2, "ORG"), span(2, 3, "TITLE"), "r", Split::Train).unwrap();
        assert_eq!(render_instance(&adj, false), "[E1]Acme Corp[/E1] [E2]CEO[/E2]");
        assert_eq!(strip_markers(&render_instance(&adj, false)), tokens);
        let nested = REInstance::new("b", tokens.clone(), span(0, 3, "ORG"), span(1, 2, "ORG"), "r", Split::Train).unwrap();
        assert_eq!(render_instance(&nested, false), "[E1]Acme [E2]Corp[/E2] CEO[/E1]");
        assert_eq!(strip_markers(&render_instance(&nested, false)), tokens);
    }

    #[test]
    fn parse_rule_table() {
        let p = perm(&["acquired_by", NO_RELATION]);
        let cases = [
            ("no relation", NO_RELATION, ParseStatus::Exact),
            ("no_relation", NO_RELATION, ParseStatus::Exact),
            ("acquired_by", "acquired_by", ParseStatus::Exact),
            ("  acquired_by\n", "acquired_by", ParseStatus::Exact),
            ("The relation is: Acquired_By.", "acquired_by", ParseStatus::Normalized),
            ("Relation: acquired by", "acquired_by", ParseStatus::Normalized),
            ("Answer: \"ACQUIRED-BY\"", "acquired_by", ParseStatus::Normalized),
            ("None", NO_RELATION, ParseStatus::Normalized),
            ("No Relation.", NO_RELATION, ParseStatus::Normalized),
            ("purchaser", NO_RELATION, ParseStatus::Fallback),
            ("", NO_RELATION, ParseStatus::Fallback),
        ];
        for (input, label, status) in cases {
            let got = parse_relation(input, &p);
            assert_eq!((got.label.as_str(), got.status), (label, status), "input {input:?}");
        }
    }

    #[test]
    fn parse_handles_colon_labels() {
        let p = perm(&["org:gpe:headquartered_in", NO_RELATION]);
        let got = parse_relation("Org:GPE:Headquartered_In", &p);
        assert_eq!(got.label, "org:gpe:headquartered_in");
        assert_eq!(got.status, ParseStatus::Normalized);
        let got = parse_relation("relation: org:gpe:headquartered_in", &p);
        assert_eq!(got.label, "org:gpe:headquartered_in");
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::from_text("x", "{task_description}{classes}{demos}").is_err());
        assert!(PromptTemplate::from_text("x", "{test_input}{task_description}{classes}{demos}").is_err());
        let t = PromptTemplate::from_text("x", "{task_description}\n{classes}\n{demos}\n{test_input}\n").unwrap();
        assert!(t.version().starts_with("x@"));
        assert_ne!(t.version(), PromptTemplate::default().version());
    }

    #[test]
    fn test_input_round_trips_through_extraction() {
        let corpus = Corpus::from_instances(vec![acme()]).unwrap();
        let mut test = acme();
        test.id = "other".into();
        let b = build_prompt(&test, &[], corpus.schema(), &corpus, &PromptOptions::default(), &PromptTemplate::default()).unwrap();
        assert_eq!(extract_test_input(&b.text), Some(render_instance(&test, false).as_str()));
        assert_eq!(b.demo_ids, vec!["t"]);
        assert_eq!(demo_labels(&b.text).collect::<Vec<_>>(), vec!["acquired_by"]);
    }
}
