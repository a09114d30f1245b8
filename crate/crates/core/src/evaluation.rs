//! Accuracy, macro-F1, all-variants robustness (ARS) and per-subset
//! breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::causal::{argmax, InferenceMode};
use crate::corpus::{Corpus, Instance, Polarity, Subset};
use crate::encoder::Branch;
use crate::model::{Model, ModelKind, CLASSES};
use crate::training::{train, Checkpoint, TrainingConfig};
use crate::{Error, Result};

/// Checkpoints whose vocabulary misses more than this fraction of an
/// evaluation corpus's tokens are refused.
pub const MAX_OOV_RATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub source_id: String,
    pub subset: Subset,
    pub gold: Polarity,
    pub pred: Polarity,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.gold == self.pred
    }
}

/// `(accuracy, macro_f1)`, both in percent. Every class counts towards the
/// macro average, including classes absent from gold and predictions.
pub fn accuracy_f1(preds: &[Prediction]) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut tp = [0usize; CLASSES];
    let mut gold_n = [0usize; CLASSES];
    let mut pred_n = [0usize; CLASSES];
    for p in preds {
        gold_n[p.gold.index()] += 1;
        pred_n[p.pred.index()] += 1;
        if p.correct() {
            tp[p.gold.index()] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1_sum: f64 = (0..CLASSES)
        .map(|c| {
            let denom = gold_n[c] + pred_n[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok((100.0 * correct as f64 / preds.len() as f64, 100.0 * f1_sum / CLASSES as f64))
}

/// Percentage of source groups whose members are all classified correctly.
/// A group is the Original instance plus every variant derived from it.
pub fn ars(preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut groups: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for p in preds {
        let e = groups.entry(&p.source_id).or_insert((true, false));
        e.0 &= p.correct();
        e.1 |= p.subset == Subset::Original;
    }
    if let Some((id, _)) = groups.iter().find(|(_, g)| !g.1) {
        return Err(Error::MissingOriginal(id.to_string()));
    }
    let ok = groups.values().filter(|g| g.0).count();
    Ok(100.0 * ok as f64 / groups.len() as f64)
}

/// Runs `model` over `corpus`, scoring each instance under `mode`.
/// Instances are processed in parallel chunks; the result keeps corpus order.
pub fn predict(model: &Model, corpus: &Corpus, mode: InferenceMode) -> Result<Vec<Prediction>> {
    let oov = model.vocab.oov_rate(corpus);
    if oov > MAX_OOV_RATE {
        return Err(Error::VocabMismatch(format!(
            "{:.1}% of evaluation tokens are unknown to the checkpoint vocabulary",
            100.0 * oov
        )));
    }
    let insts: Vec<&Instance> = corpus.iter().collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    let chunk = insts.len().div_ceil(threads).clamp(1, 64);
    let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = insts
            .chunks(chunk)
            .map(|c| s.spawn(move || predict_chunk(model, c, mode)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(insts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn predict_chunk(model: &Model, insts: &[&Instance], mode: InferenceMode) -> Result<Vec<Prediction>> {
    let raw = model.outputs(insts)?;
    Ok(insts
        .iter()
        .zip(raw)
        .map(|(inst, r)| {
            let scores = model.scores(&r, mode);
            Prediction {
                id: inst.id.clone(),
                source_id: inst.source_id.clone(),
                subset: inst.subset,
                gold: inst.label,
                pred: Polarity::from_index(argmax(&scores)).unwrap_or(Polarity::Positive),
                scores,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub subset: Subset,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mode: InferenceMode,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` when some group lacks its Original instance.
    pub ars: Option<f64>,
    pub n_instances: usize,
    pub n_groups: usize,
    pub subsets: Vec<SubsetAccuracy>,
}

impl ModeMetrics {
    pub fn from_predictions(mode: InferenceMode, preds: &[Prediction]) -> Result<Self> {
        let (accuracy, macro_f1) = accuracy_f1(preds)?;
        let ars = match ars(preds) {
            Ok(v) => Some(v),
            Err(Error::MissingOriginal(_)) => None,
            Err(e) => return Err(e),
        };
        let mut by_subset: BTreeMap<Subset, (usize, usize)> = BTreeMap::new();
        for p in preds {
            let e = by_subset.entry(p.subset).or_default();
            e.0 += usize::from(p.correct());
            e.1 += 1;
        }
        let groups: std::collections::BTreeSet<&str> = preds.iter().map(|p| p.source_id.as_str()).collect();
        Ok(Self {
            mode,
            accuracy,
            macro_f1,
            ars,
            n_instances: preds.len(),
            n_groups: groups.len(),
            subsets: by_subset
                .into_iter()
                .map(|(subset, (c, n))| SubsetAccuracy {
                    subset,
                    accuracy: 100.0 * c as f64 / n as f64,
                    n,
                })
                .collect(),
        })
    }

    pub fn subset_accuracy(&self, subset: Subset) -> Option<f64> {
        self.subsets.iter().find(|s| s.subset == subset).map(|s| s.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub rows: Vec<ModeMetrics>,
    /// Echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn row(&self, mode: InferenceMode) -> Option<&ModeMetrics> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `metric,subset,value,n` line per number; metrics are prefixed by
    /// the inference mode.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,subset,value,n\n");
        for r in &self.rows {
            let m = r.mode.name();
            let _ = writeln!(out, "{m}.accuracy,all,{:.4},{}", r.accuracy, r.n_instances);
            let _ = writeln!(out, "{m}.macro_f1,all,{:.4},{}", r.macro_f1, r.n_instances);
            if let Some(a) = r.ars {
                let _ = writeln!(out, "{m}.ars,all,{a:.4},{}", r.n_groups);
            }
            for s in &r.subsets {
                let _ = writeln!(out, "{m}.accuracy,{},{:.4},{}", s.subset.as_str(), s.accuracy, s.n);
            }
        }
        out
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "mode", "acc", "f1", "ars", "orig", "revtgt", "revnon", "adddiff"
        );
        for r in &self.rows {
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{:<8} {:>8.2} {:>8.2} {:>8} {:>8} {:>8} {:>8} {:>8}",
                r.mode.name(),
                r.accuracy,
                r.macro_f1,
                cell(r.ars),
                cell(r.subset_accuracy(Subset::Original)),
                cell(r.subset_accuracy(Subset::RevTgt)),
                cell(r.subset_accuracy(Subset::RevNon)),
                cell(r.subset_accuracy(Subset::AddDiff)),
            );
        }
        out
    }
}

/// Evaluates `checkpoint` on `test` under each of `modes`. Single-branch
/// models only produce one row since the mode does not apply to them.
pub fn evaluate(checkpoint: &Checkpoint, test: &Corpus, modes: &[InferenceMode]) -> Result<MetricsReport> {
    if modes.is_empty() {
        return Err(Error::Empty("inference modes"));
    }
    let model = &checkpoint.model;
    let modes: Vec<InferenceMode> = if model.config.kind == ModelKind::Full {
        modes.to_vec()
    } else {
        vec![InferenceMode::Te]
    };
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        rows.push(ModeMetrics::from_predictions(mode, &predict(model, test, mode)?)?);
    }
    Ok(MetricsReport {
        model: model.config.kind,
        rows,
        config: serde_json::to_value(&checkpoint.config)?,
    })
}

/// Trains a single-branch classifier (that branch's encoder and a linear
/// head under plain cross-entropy) and reports its per-subset accuracy on
/// `test`.
pub fn probe(train_set: &Corpus, test: &Corpus, branch: Branch, cfg: &TrainingConfig) -> Result<ModeMetrics> {
    let mut cfg = cfg.clone();
    cfg.model.kind = ModelKind::probe(branch);
    let ckpt = train(train_set, &cfg)?;
    ModeMetrics::from_predictions(InferenceMode::Te, &predict(&ckpt.model, test, InferenceMode::Te)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(src: &str, subset: Subset, gold: Polarity, pred: Polarity) -> Prediction {
        Prediction {
            id: format!("{src}:{}", subset.as_str()),
            source_id: src.to_string(),
            subset,
            gold,
            pred,
            scores: vec![0.0; 3],
        }
    }

    #[test]
    fn all_zero_predictions_on_uniform_golds() {
        let ps: Vec<_> = Polarity::ALL
            .iter()
            .enumerate()
            .map(|(i, &g)| pred(&format!("s{i}"), Subset::Original, g, Polarity::Positive))
            .collect();
        let (acc, f1) = accuracy_f1(&ps).unwrap();
        assert!((acc - 100.0 / 3.0).abs() < 1e-9);
        // class 0: tp 1, gold 1, pred 3 -> 2/4
        assert!((f1 - 50.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn ars_forced_count() {
        use Polarity::*;
        let mut ps = vec![
            pred("a", Subset::Original, Positive, Positive),
            pred("a", Subset::RevTgt, Negative, Negative),
            pred("a", Subset::RevNon, Positive, Positive),
            pred("a", Subset::AddDiff, Positive, Positive),
            pred("b", Subset::Original, Negative, Negative),
            pred("b", Subset::RevTgt, Positive, Negative),
            pred("b", Subset::RevNon, Negative, Negative),
        ];
        assert_eq!(ars(&ps).unwrap(), 50.0);
        ps.retain(|p| !(p.source_id == "b" && p.subset == Subset::Original));
        assert!(matches!(ars(&ps), Err(Error::MissingOriginal(id)) if id == "b"));
        assert!(matches!(accuracy_f1(&[]), Err(Error::Empty(_))));
    }
}
