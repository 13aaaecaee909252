//! Scoring of prediction records.
//!
//! Three F1 variants are reported side by side:
//!
//! | metric                 | no_relation handling                                     |
//! |------------------------|----------------------------------------------------------|
//! | `micro_f1_excl_norel`  | predictions of no_relation abstain (FN if gold differs)  |
//! | `micro_f1_incl_norel`  | ordinary multiclass micro F1, equal to accuracy          |
//! | `macro_f1`             | mean per-class F1 over classes with gold support         |
//!
//! The first is the headline number. Every F1 is computed from integer
//! counts as `2tp / (2tp + fp + fn)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::corpus::NO_RELATION;
use crate::digest::json_digest;
use crate::promptkit::ParseStatus;

pub const REPORT_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no prediction records to evaluate")]
    EmptyTestSet,
    #[error("reports cover different test splits ({a} vs {b})")]
    SplitMismatch { a: String, b: String },
}

/// `2tp / (2tp + fp + fn)`, or 0 when every count is zero.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold instances of this class.
    pub support: usize,
    /// Predictions of this class.
    pub predicted: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: String,
    /// Digest of the `(test_id, gold)` sequence the report covers.
    pub split_digest: String,
    pub total: usize,
    pub correct: usize,
    pub micro_f1_excl_norel: f64,
    pub micro_excl_detail: MicroScores,
    pub micro_f1_incl_norel: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Share of records whose answer needed the no_relation fallback.
    pub fallback_rate: f64,
    /// Share of records with no answer at all (provider or prompt failure).
    pub error_rate: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn headline(&self) -> f64 {
        self.micro_f1_excl_norel
    }
}

/// Digest identifying the evaluated split: test ids and gold labels in order.
pub fn split_digest(records: &[PredictionRecord]) -> String {
    let rows: Vec<(&str, &str)> = records.iter().map(|r| (r.test_id.as_str(), r.gold.as_str())).collect();
    json_digest(&rows).expect("pairs serialize")
}

pub fn compute_metrics(records: &[PredictionRecord]) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut ex_tp, mut ex_fp, mut ex_fn) = (0usize, 0usize, 0usize);
    let (mut fallbacks, mut errors) = (0usize, 0usize);

    for r in records {
        let gold = r.gold.as_str();
        let pred = r.predicted.as_str();
        *support.entry(gold).or_default() += 1;
        *predicted.entry(pred).or_default() += 1;
        if gold == pred {
            *tp.entry(gold).or_default() += 1;
        }
        let gold_rel = gold != NO_RELATION;
        let pred_rel = pred != NO_RELATION;
        if gold == pred {
            if gold_rel {
                ex_tp += 1;
            }
        } else {
            if pred_rel {
                ex_fp += 1;
            }
            if gold_rel {
                ex_fn += 1;
            }
        }
        match r.parse_status {
            ParseStatus::Fallback => fallbacks += 1,
            ParseStatus::Error => errors += 1,
            _ => {}
        }
    }

    let classes: BTreeSet<&str> = support.keys().chain(predicted.keys()).copied().collect();
    let mut per_class = BTreeMap::new();
    for c in classes {
        let t = tp.get(c).copied().unwrap_or(0);
        let s = support.get(c).copied().unwrap_or(0);
        let p = predicted.get(c).copied().unwrap_or(0);
        per_class.insert(
            c.to_string(),
            ClassMetrics {
                precision: ratio(t, p),
                recall: ratio(t, s),
                f1: f1_from_counts(t, p - t, s - t),
                support: s,
                predicted: p,
                true_positives: t,
            },
        );
    }
    let supported: Vec<f64> = per_class.values().filter(|m| m.support > 0).map(|m| m.f1).collect();
    let macro_f1 = supported.iter().sum::<f64>() / supported.len() as f64;
    let correct: usize = tp.values().sum();
    let n = records.len();

    Ok(MetricsReport {
        report_version: REPORT_VERSION.to_string(),
        split_digest: split_digest(records),
        total: n,
        correct,
        micro_f1_excl_norel: f1_from_counts(ex_tp, ex_fp, ex_fn),
        micro_excl_detail: MicroScores {
            precision: ratio(ex_tp, ex_tp + ex_fp),
            recall: ratio(ex_tp, ex_tp + ex_fn),
            f1: f1_from_counts(ex_tp, ex_fp, ex_fn),
        },
        // Each miss is one FP and one FN, so this equals correct / n.
        micro_f1_incl_norel: f1_from_counts(correct, n - correct, n - correct),
        macro_f1,
        per_class,
        fallback_rate: ratio(fallbacks, n),
        error_rate: ratio(errors, n),
        config: serde_json::Value::Null,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub name: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub metrics: Vec<DeltaRow>,
    /// Per-class F1; a class missing from one report counts as 0 there.
    pub per_class_f1: Vec<DeltaRow>,
}

fn row(name: &str, a: f64, b: f64) -> DeltaRow {
    DeltaRow {
        name: name.to_string(),
        a,
        b,
        delta: b - a,
    }
}

/// Side-by-side deltas of two reports over the same split.
pub fn compare_runs(a: &MetricsReport, b: &MetricsReport) -> Result<DeltaTable, MetricsError> {
    if a.split_digest != b.split_digest {
        return Err(MetricsError::SplitMismatch {
            a: a.split_digest.clone(),
            b: b.split_digest.clone(),
        });
    }
    let metrics = vec![
        row("micro_f1_excl_norel", a.micro_f1_excl_norel, b.micro_f1_excl_norel),
        row("micro_f1_incl_norel", a.micro_f1_incl_norel, b.micro_f1_incl_norel),
        row("macro_f1", a.macro_f1, b.macro_f1),
        row("fallback_rate", a.fallback_rate, b.fallback_rate),
        row("error_rate", a.error_rate, b.error_rate),
    ];
    let classes: BTreeSet<&String> = a.per_class.keys().chain(b.per_class.keys()).collect();
    let f1 = |r: &MetricsReport, c: &str| r.per_class.get(c).map_or(0.0, |m| m.f1);
    let per_class_f1 = classes.into_iter().map(|c| row(c, f1(a, c), f1(b, c))).collect();
    Ok(DeltaTable { metrics, per_class_f1 })
}

impl fmt::Display for DeltaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .metrics
            .iter()
            .chain(&self.per_class_f1)
            .map(|r| r.name.len())
            .max()
            .unwrap_or(6)
            .max(6);
        writeln!(f, "{:<width$}  {:>8}  {:>8}  {:>9}", "metric", "a", "b", "delta")?;
        for r in &self.metrics {
            writeln!(f, "{:<width$}  {:>8.4}  {:>8.4}  {:>+9.4}", r.name, r.a, r.b, r.delta)?;
        }
        if !self.per_class_f1.is_empty() {
            writeln!(f, "\nper-class F1")?;
            for r in &self.per_class_f1 {
                writeln!(f, "{:<width$}  {:>8.4}  {:>8.4}  {:>+9.4}", r.name, r.a, r.b, r.delta)?;
            }
        }
        Ok(())
    }
}
