use std::collections::{HashMap, HashSet};
use std::time::Instant;

use icl_relex::epr::synthetic::{SyntheticSpec, SyntheticTask};
use icl_relex::epr::{
    batch_loss, batch_loss_and_grad, epr_retrieve, info_nce, label_pairs, train_adapter, AdapterModel, PairExample,
    ScoredCandidate, TrainConfig, TrainingPair,
};
use icl_relex::knn::{query, VectorIndex};
use icl_relex::EmbeddingVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, prefix: &str) -> Vec<(String, Vec<f64>)> {
    (0..n)
        .map(|i| (format!("{prefix}{i:04}"), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

#[test]
fn identity_adapter_reduces_to_knn() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dim = 24;
    let index = VectorIndex::from_rows(dim, "raw", gaussian_rows(&mut rng, 500, dim, "c")).unwrap();
    let identity = AdapterModel::identity(dim);
    let exclude: HashSet<String> = ["c0003".to_string(), "c0100".to_string()].into();
    for (_, q) in gaussian_rows(&mut rng, 200, dim, "q") {
        let q = EmbeddingVector::new(q, "raw").unwrap();
        let plain = query(&index, &q, 8, &exclude).unwrap();
        let projected = epr_retrieve(&identity, &index, &q, 8, &exclude).unwrap();
        assert_eq!(plain, projected);
    }
}

fn fixture_vectors() -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    gaussian_rows(&mut rng, 9, 4, "v")
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let vecs = fixture_vectors();
    let v = |i: usize| (vecs[i].0.as_str(), vecs[i].1.as_slice());
    // Three pairs: anchor, positive, two negatives each.
    let batch: Vec<PairExample> = (0..3)
        .map(|p| {
            let b = p * 3;
            PairExample {
                anchor_id: v(b).0,
                anchor: v(b).1,
                positive_id: v(b + 1).0,
                positive: v(b + 1).1,
                negatives: vec![v(b + 2), v((b + 4) % 9)],
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 4;
    let w: Vec<f64> = (0..dim * dim)
        .map(|i| if i % (dim + 1) == 0 { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3))
        .collect();
    let eps = 1e-5;
    for (temperature, in_batch) in [(0.1, true), (0.5, false), (1.0, true)] {
        let (loss, grad) = batch_loss_and_grad(&w, dim, &batch, temperature, in_batch);
        assert!((loss - batch_loss(&w, dim, &batch, temperature, in_batch)).abs() < 1e-12);
        let mut worst: f64 = 0.0;
        for i in 0..w.len() {
            let mut plus = w.clone();
            plus[i] += eps;
            let mut minus = w.clone();
            minus[i] -= eps;
            let numeric = (batch_loss(&plus, dim, &batch, temperature, in_batch)
                - batch_loss(&minus, dim, &batch, temperature, in_batch))
                / (2.0 * eps);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        assert!(worst <= 1e-4, "max relative error {worst:e} at temperature {temperature}");
    }
}

#[test]
fn info_nce_reference_values() {
    // log(1 + e^-1) for logits [1, 0].
    assert!((info_nce(&[1.0, 0.0]) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    // Uniform logits over n candidates give ln n.
    assert!((info_nce(&[0.3; 8]) - 8f64.ln()).abs() < 1e-12);
    // Stable for large logits.
    assert!(info_nce(&[1000.0, 999.0]).is_finite());
}

#[test]
fn label_pairs_invariant_to_positive_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for round in 0..20 {
        let mut scored: Vec<ScoredCandidate> = (0..30)
            .map(|i| ScoredCandidate {
                candidate_id: format!("c{i:02}"),
                score: -rng.gen_range(0.0..40.0f64),
            })
            .collect();
        // Plant ties at both ends.
        scored[3].score = scored[4].score;
        scored[10].score = 0.0;
        scored[11].score = 0.0;
        let base = label_pairs(&scored, "anchor", 3, 10).unwrap();
        for c in [0.5, 3.0, 1e6] {
            let scaled: Vec<ScoredCandidate> = scored
                .iter()
                .map(|s| ScoredCandidate {
                    candidate_id: s.candidate_id.clone(),
                    score: s.score * c,
                })
                .collect();
            assert_eq!(label_pairs(&scaled, "anchor", 3, 10).unwrap(), base, "round {round}, factor {c}");
        }
    }
}

#[test]
fn synthetic_task_trained_beats_identity() {
    let task = SyntheticTask::generate(SyntheticSpec::default());
    assert_eq!(task.anchors.len(), 400);
    let identity = task.recall_at_k(&AdapterModel::identity(16), 5).unwrap();
    let pairs = task.training_pairs(50, 3, 10).unwrap();
    let start = Instant::now();
    let adapter = train_adapter(&pairs, &task.embeddings(), &TrainConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let trained = task.recall_at_k(&adapter, 5).unwrap();
    assert!(identity <= 0.4, "identity recall@5 {identity}");
    assert!(trained >= 0.9, "trained recall@5 {trained}");
    assert!(elapsed.as_secs_f64() < 60.0, "training took {elapsed:?}");
}

#[test]
fn training_is_deterministic_and_persists() {
    let task = SyntheticTask::generate(SyntheticSpec {
        anchors: 40,
        queries: 8,
        ..SyntheticSpec::default()
    });
    let pairs = task.training_pairs(20, 2, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let emb = task.embeddings();
    let a = train_adapter(&pairs, &emb, &cfg).unwrap();
    let b = train_adapter(&pairs, &emb, &cfg).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert_eq!(a.meta.loss_curve.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapter.bin");
    a.save(&path).unwrap();
    let back = AdapterModel::load(&path).unwrap();
    assert_eq!(back.weights(), a.weights());
    assert_eq!(back.meta, a.meta);
}

#[test]
fn training_rejects_missing_embeddings() {
    let pairs = vec![TrainingPair {
        anchor_id: "a".into(),
        positive_id: "p".into(),
        negative_ids: vec!["n".into()],
    }];
    let emb: HashMap<String, EmbeddingVector> =
        [("a".to_string(), EmbeddingVector::new(vec![1.0, 0.0], "t").unwrap())].into();
    assert!(train_adapter(&pairs, &emb, &TrainConfig::default()).is_err());
}
