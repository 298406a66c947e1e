//! Evaluation: top-k accuracy, class-mean recall@k, verb/noun
//! marginalization, late fusion of prediction files, and report assembly.
//!
//! All metric reductions use exact integer counts divided once, so they are
//! independent of record order.

pub mod attention;
pub mod rollout;

use std::path::Path;

use crate::data::{read_text, write_text, Vocabulary};
use crate::error::{AvtError, Result};

/// One evaluated sample: a probability vector over actions plus the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub probs: Vec<f64>,
    pub true_action: usize,
}

/// Class indices ordered by probability descending, ties broken by ascending
/// class id.
pub fn ranked_classes(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Whether the truth ranks within the top k.
pub fn topk_hit(probs: &[f64], truth: usize, k: usize) -> bool {
    ranked_classes(probs).iter().take(k).any(|&c| c == truth)
}

pub fn topk_accuracy(records: &[PredictionRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(AvtError::Eval("top-k accuracy over an empty record set".to_string()));
    }
    let hits = records.iter().filter(|r| topk_hit(&r.probs, r.true_action, k)).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Recall@k computed per ground-truth class, averaged with equal weight over
/// the classes that appear in the record set.
pub fn class_mean_recall_at_k(records: &[PredictionRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(AvtError::Eval("class-mean recall over an empty record set".to_string()));
    }
    let n_classes = records[0].probs.len();
    let mut count = vec![0usize; n_classes];
    let mut hit = vec![0usize; n_classes];
    for r in records {
        count[r.true_action] += 1;
        if topk_hit(&r.probs, r.true_action, k) {
            hit[r.true_action] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        if count[c] > 0 {
            acc += hit[c] as f64 / count[c] as f64;
            present += 1;
        }
    }
    Ok(acc / present as f64)
}

/// Verb and noun distributions derived by summing action probabilities over
/// the vocabulary map.
pub fn marginalize(action_probs: &[f64], vocab: &Vocabulary) -> Result<(Vec<f64>, Vec<f64>)> {
    if action_probs.len() != vocab.len() {
        return Err(AvtError::Vocab(format!(
            "{} action probabilities but the vocabulary maps {} actions",
            action_probs.len(),
            vocab.len()
        )));
    }
    let mut verb = vec![0.0; vocab.n_verbs()];
    let mut noun = vec![0.0; vocab.n_nouns()];
    for (a, &p) in action_probs.iter().enumerate() {
        verb[vocab.verb_of(a)] += p;
        noun[vocab.noun_of(a)] += p;
    }
    Ok((verb, noun))
}

/// Per-sample weighted arithmetic mean of probability vectors, renormalized.
/// Every set must cover exactly the same sample ids.
pub fn late_fuse(sets: &[Vec<PredictionRecord>], weights: &[f64]) -> Result<Vec<PredictionRecord>> {
    if sets.is_empty() {
        return Err(AvtError::Eval("late fusion needs at least one prediction set".to_string()));
    }
    if sets.len() != weights.len() {
        return Err(AvtError::Eval(format!(
            "{} prediction sets but {} weights",
            sets.len(),
            weights.len()
        )));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(AvtError::Eval("fusion weights must sum to a positive value".to_string()));
    }
    let mut base: Vec<PredictionRecord> = sets[0].clone();
    base.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    for (si, set) in sets.iter().enumerate().skip(1) {
        let mut ids: Vec<&str> = set.iter().map(|r| r.sample_id.as_str()).collect();
        ids.sort_unstable();
        let base_ids: Vec<&str> = base.iter().map(|r| r.sample_id.as_str()).collect();
        if ids != base_ids {
            let missing: Vec<&&str> = base_ids.iter().filter(|id| !ids.contains(id)).take(5).collect();
            let extra: Vec<&&str> = ids.iter().filter(|id| !base_ids.contains(id)).take(5).collect();
            return Err(AvtError::Alignment(format!(
                "prediction set {si} does not cover the same samples (missing: {missing:?}, unexpected: {extra:?})"
            )));
        }
    }

    let k = base[0].probs.len();
    let wsum: f64 = weights.iter().sum();
    let mut fused = Vec::with_capacity(base.len());
    for rec in &base {
        let mut probs = vec![0.0; k];
        let mut truth = rec.true_action;
        for (set, &w) in sets.iter().zip(weights) {
            let r = set
                .iter()
                .find(|r| r.sample_id == rec.sample_id)
                .expect("alignment verified above");
            if r.probs.len() != k {
                return Err(AvtError::Alignment(format!(
                    "sample {} has {} classes in one set and {} in another",
                    rec.sample_id,
                    r.probs.len(),
                    k
                )));
            }
            if r.true_action != truth {
                return Err(AvtError::Alignment(format!(
                    "sample {} has conflicting ground truth across sets",
                    rec.sample_id
                )));
            }
            truth = r.true_action;
            for (acc, &p) in probs.iter_mut().zip(&r.probs) {
                *acc += w * p;
            }
        }
        for p in probs.iter_mut() {
            *p /= wsum;
        }
        let norm: f64 = probs.iter().sum();
        if norm > 0.0 {
            for p in probs.iter_mut() {
                *p /= norm;
            }
        }
        fused.push(PredictionRecord { sample_id: rec.sample_id.clone(), probs, true_action: truth });
    }
    Ok(fused)
}

// ── Prediction file I/O ──────────────────────────────────────────────────

pub fn predictions_to_csv(records: &[PredictionRecord]) -> String {
    let k = records.first().map_or(0, |r| r.probs.len());
    let mut out = String::from("sample_id,true_action");
    for c in 0..k {
        out.push_str(&format!(",p_{c}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&r.sample_id);
        out.push_str(&format!(",{}", r.true_action));
        for &p in &r.probs {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_predictions_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_text(path, &predictions_to_csv(records))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    let mut k = None;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 3 {
            return Err(AvtError::Format {
                offset: lineno as u64,
                msg: format!("prediction line {} malformed", lineno + 1),
            });
        }
        let true_action: usize = parts[1].parse().map_err(|_| AvtError::Format {
            offset: lineno as u64,
            msg: format!("bad true_action on line {}", lineno + 1),
        })?;
        let probs: Vec<f64> = parts[2..]
            .iter()
            .map(|p| p.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| AvtError::Format {
                offset: lineno as u64,
                msg: format!("bad probability on line {}", lineno + 1),
            })?;
        if let Some(k) = k {
            if probs.len() != k {
                return Err(AvtError::Format {
                    offset: lineno as u64,
                    msg: format!("line {} has {} probabilities, expected {k}", lineno + 1, probs.len()),
                });
            }
        } else {
            k = Some(probs.len());
        }
        records.push(PredictionRecord { sample_id: parts[0].to_string(), probs, true_action });
    }
    if records.is_empty() {
        return Err(AvtError::Eval("prediction file holds no records".to_string()));
    }
    Ok(records)
}

// ── Report ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScopeRow {
    pub scope: String,
    pub id: String,
    pub name: String,
    pub count: usize,
    pub top1: f64,
    pub top5: f64,
    pub recall5: f64,
}

/// Metric report: overall row, verb/noun rows via marginalization, and
/// per-action rows.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<ScopeRow>,
}

impl EvalReport {
    pub fn overall(&self) -> &ScopeRow {
        &self.rows[0]
    }

    pub fn lookup(&self, scope: &str, id: &str) -> Option<&ScopeRow> {
        self.rows.iter().find(|r| r.scope == scope && r.id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,id,name,count,top1,top5,cm_recall5\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.scope, r.id, r.name, r.count, r.top1, r.top5, r.recall5
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>4} {:<14} {:>7} {:>8} {:>8} {:>10}\n",
            "scope", "id", "name", "count", "top1", "top5", "cm_rec@5"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>4} {:<14} {:>7} {:>8.4} {:>8.4} {:>10.4}\n",
                r.scope, r.id, r.name, r.count, r.top1, r.top5, r.recall5
            ));
        }
        out
    }
}

fn scoped_rows(
    scope: &str,
    n: usize,
    name_of: impl Fn(usize) -> String,
    preds: &[(Vec<f64>, usize)],
) -> Vec<ScopeRow> {
    let mut count = vec![0usize; n];
    let mut top1 = vec![0usize; n];
    let mut top5 = vec![0usize; n];
    for (probs, truth) in preds {
        count[*truth] += 1;
        if topk_hit(probs, *truth, 1) {
            top1[*truth] += 1;
        }
        if topk_hit(probs, *truth, 5) {
            top5[*truth] += 1;
        }
    }
    (0..n)
        .filter(|&c| count[c] > 0)
        .map(|c| ScopeRow {
            scope: scope.to_string(),
            id: c.to_string(),
            name: name_of(c),
            count: count[c],
            top1: top1[c] as f64 / count[c] as f64,
            top5: top5[c] as f64 / count[c] as f64,
            recall5: top5[c] as f64 / count[c] as f64,
        })
        .collect()
}

pub fn build_report(records: &[PredictionRecord], vocab: &Vocabulary) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(AvtError::Eval("report over an empty record set".to_string()));
    }
    let mut rows = Vec::new();

    let verb_preds: Vec<(Vec<f64>, usize)> = records
        .iter()
        .map(|r| {
            let (v, _) = marginalize(&r.probs, vocab)?;
            Ok((v, vocab.verb_of(r.true_action)))
        })
        .collect::<Result<_>>()?;
    let noun_preds: Vec<(Vec<f64>, usize)> = records
        .iter()
        .map(|r| {
            let (_, n) = marginalize(&r.probs, vocab)?;
            Ok((n, vocab.noun_of(r.true_action)))
        })
        .collect::<Result<_>>()?;

    rows.push(ScopeRow {
        scope: "overall".to_string(),
        id: "-".to_string(),
        name: "action".to_string(),
        count: records.len(),
        top1: topk_accuracy(records, 1)?,
        top5: topk_accuracy(records, 5)?,
        recall5: class_mean_recall_at_k(records, 5)?,
    });

    let verb_records: Vec<PredictionRecord> = verb_preds
        .iter()
        .enumerate()
        .map(|(i, (p, t))| PredictionRecord { sample_id: records[i].sample_id.clone(), probs: p.clone(), true_action: *t })
        .collect();
    let noun_records: Vec<PredictionRecord> = noun_preds
        .iter()
        .enumerate()
        .map(|(i, (p, t))| PredictionRecord { sample_id: records[i].sample_id.clone(), probs: p.clone(), true_action: *t })
        .collect();
    rows.push(ScopeRow {
        scope: "overall".to_string(),
        id: "-".to_string(),
        name: "verb".to_string(),
        count: records.len(),
        top1: topk_accuracy(&verb_records, 1)?,
        top5: topk_accuracy(&verb_records, 5)?,
        recall5: class_mean_recall_at_k(&verb_records, 5)?,
    });
    rows.push(ScopeRow {
        scope: "overall".to_string(),
        id: "-".to_string(),
        name: "noun".to_string(),
        count: records.len(),
        top1: topk_accuracy(&noun_records, 1)?,
        top5: topk_accuracy(&noun_records, 5)?,
        recall5: class_mean_recall_at_k(&noun_records, 5)?,
    });

    rows.extend(scoped_rows(
        "verb",
        vocab.n_verbs(),
        |v| format!("verb_{v}"),
        &verb_preds,
    ));
    rows.extend(scoped_rows(
        "noun",
        vocab.n_nouns(),
        |n| format!("noun_{n}"),
        &noun_preds,
    ));
    let action_preds: Vec<(Vec<f64>, usize)> =
        records.iter().map(|r| (r.probs.clone(), r.true_action)).collect();
    rows.extend(scoped_rows(
        "action",
        vocab.len(),
        |a| vocab.name_of(a).to_string(),
        &action_preds,
    ));

    Ok(EvalReport { rows })
}
