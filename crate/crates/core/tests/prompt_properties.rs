use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use icl_relex::corpus::{Corpus, EntitySpan, REInstance, Split};
use icl_relex::knn::VectorIndex;
use icl_relex::promptkit::{
    extract_test_input, normalize_label, parse_relation, render_instance, strip_markers, DemoOrigin, ParseStatus,
    PromptTemplate,
};
use icl_relex::providers::mock::{HashEmbedder, MajorityDemoCompleter};
use icl_relex::retrieval::KnnRetriever;
use icl_relex::runner::{Experiment, ExperimentConfig};
use icl_relex::{ProviderClient, NO_RELATION};
use proptest::prelude::*;

const RELATIONS: [&str; 3] = ["acquired_by", "subsidiary_of", NO_RELATION];

fn org_pair(id: String, n: usize, relation: &str, split: Split) -> REInstance {
    let tokens: Vec<String> = format!("Firm{n} and Group{n} filed note {n} on {relation}")
        .split(' ')
        .map(str::to_string)
        .collect();
    REInstance::new(id, tokens, EntitySpan::new(0, 1, "ORG"), EntitySpan::new(2, 3, "ORG"), relation, split).unwrap()
}

/// 20 training instances per relation for a single type pair.
fn abundant() -> (Corpus, REInstance) {
    let mut train = Vec::new();
    for (r, rel) in RELATIONS.iter().enumerate() {
        for i in 0..20 {
            train.push(org_pair(format!("tr-{r}-{i:02}"), r * 100 + i, rel, Split::Train));
        }
    }
    let test = org_pair("te-0".into(), 999, "acquired_by", Split::Test);
    (Corpus::from_instances(train).unwrap(), test)
}

#[test]
fn five_retrieved_plus_four_per_class_gives_seventeen() {
    let (train, test) = abundant();
    assert_eq!(train.schema().permissible_for(&test.type_pair()).unwrap().len(), 3);

    let embedder = HashEmbedder::new(32, 1);
    let rows = train
        .instances()
        .iter()
        .map(|i| (i.id.clone(), embedder.vector(&render_instance(i, false))));
    let index = VectorIndex::from_rows(32, "hash", rows).unwrap();
    let queries: HashMap<String, Vec<f64>> = [(test.id.clone(), embedder.vector(&render_instance(&test, false)))].into();
    let retriever = KnnRetriever::new(index, queries, &train, true);

    let mut config = ExperimentConfig::default();
    config.retriever.k = 5;
    config.prompt.r_per_class = 4;
    let client = ProviderClient::new(Arc::new(MajorityDemoCompleter));
    let template = PromptTemplate::default();
    let exp = Experiment {
        config: &config,
        train: &train,
        retriever: &retriever,
        completer: &client,
        template: &template,
        prompt_dump: None,
    };
    let bundle = exp.prompt_for(&test).unwrap();

    assert_eq!(bundle.demos.len(), 17);
    let retrieved = bundle.demos.iter().filter(|d| d.origin == DemoOrigin::Retrieved).count();
    assert_eq!(retrieved, 5);
    for rel in RELATIONS {
        let n = bundle
            .demos
            .iter()
            .filter(|d| d.origin == DemoOrigin::RandomClass && d.label_text == rel)
            .count();
        assert_eq!(n, 4, "random demos for {rel}");
    }
    let unique: BTreeSet<&String> = bundle.demo_ids.iter().collect();
    assert_eq!(unique.len(), 17);
    assert!(!bundle.demo_ids.contains(&test.id));

    // The test block closes the prompt.
    let expected_tail = format!("{}\nRelation:", render_instance(&test, false));
    assert!(bundle.text.trim_end().ends_with(&expected_tail));
    assert_eq!(extract_test_input(&bundle.text), Some(render_instance(&test, false).as_str()));
    // And every demo precedes it.
    let test_at = bundle.text.rfind(&expected_tail).unwrap();
    for d in &bundle.demos {
        assert!(bundle.text.find(&d.rendered_input).unwrap() < test_at);
    }
}

#[test]
fn prompts_are_stable_across_calls() {
    let (train, test) = abundant();
    let config = ExperimentConfig {
        retriever: icl_relex::runner::config::RetrieverConfig {
            kind: icl_relex::runner::RetrieverKind::None,
            ..Default::default()
        },
        ..Default::default()
    };
    let client = ProviderClient::new(Arc::new(MajorityDemoCompleter));
    let template = PromptTemplate::default();
    let exp = Experiment {
        config: &config,
        train: &train,
        retriever: &icl_relex::retrieval::NoRetriever,
        completer: &client,
        template: &template,
        prompt_dump: None,
    };
    let a = exp.prompt_for(&test).unwrap();
    let b = exp.prompt_for(&test).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.demos.len(), 12);
}

fn word() -> impl Strategy<Value = String> {
    "[A-Za-z0-9&.,'$%-]{1,8}"
}

prop_compose! {
    fn instance()(tokens in prop::collection::vec(word(), 2..14), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>(),
                  la in 1usize..4, lb in 1usize..4)
        -> Option<REInstance> {
        let n = tokens.len();
        let s1 = a.index(n);
        let e1 = (s1 + la).min(n);
        let s2 = b.index(n);
        let e2 = (s2 + lb).min(n);
        REInstance::new("p", tokens, EntitySpan::new(s1, e1, "ORG"), EntitySpan::new(s2, e2, "PERSON"), "employee_of", Split::Train).ok()
    }
}

proptest! {
    #[test]
    fn rendering_keeps_every_token(inst in instance()) {
        if let Some(inst) = inst {
            let rendered = render_instance(&inst, false);
            prop_assert_eq!(strip_markers(&rendered), inst.tokens.clone());
            prop_assert_eq!(rendered.matches("[E1]").count(), 1);
            prop_assert_eq!(rendered.matches("[/E2]").count(), 1);
        }
    }

    #[test]
    fn parsing_is_idempotent(raw in "\\PC{0,40}") {
        let permissible: BTreeSet<String> = ["acquired_by", "employee_of", NO_RELATION].iter().map(|s| s.to_string()).collect();
        let first = parse_relation(&raw, &permissible);
        prop_assert!(permissible.contains(&first.label));
        let again = parse_relation(&first.label, &permissible);
        prop_assert_eq!(&again.label, &first.label);
        prop_assert_eq!(again.status, ParseStatus::Exact);
        prop_assert_eq!(normalize_label(&normalize_label(&raw)), normalize_label(&raw));
    }

    #[test]
    fn decorated_labels_parse_back(label in prop::sample::select(vec!["acquired_by", "employee_of"]),
                                   prefix in prop::sample::select(vec!["", "Relation: ", "The relation is ", "answer: "]),
                                   upper in any::<bool>(), trailing in prop::sample::select(vec!["", ".", "\nbecause ...", "  "])) {
        let permissible: BTreeSet<String> = ["acquired_by", "employee_of", NO_RELATION].iter().map(|s| s.to_string()).collect();
        let shown = if upper { label.to_uppercase() } else { label.to_string() };
        let parsed = parse_relation(&format!("{prefix}{shown}{trailing}"), &permissible);
        prop_assert_eq!(parsed.label, label);
        prop_assert_ne!(parsed.status, ParseStatus::Fallback);
    }
}
