//! Multi-seed experiment drivers shared by the command line and the
//! acceptance suite.

use std::fmt::Write as _;

use absa_core::causal::{FusionStrategy, InferenceMode};
use absa_core::corpus::{generate_synthetic_corpus, BiasConfig, Corpus, Subset, SyntheticCorpus};
use absa_core::encoder::Branch;
use absa_core::evaluation::{predict, ModeMetrics};
use absa_core::model::ModelKind;
use absa_core::training::{train, TrainingConfig};
use absa_core::Result;
use serde::Serialize;

/// Train/test material for one seed.
pub struct Splits {
    pub train: Corpus,
    pub test: Corpus,
    pub anti: Option<Corpus>,
}

impl From<SyntheticCorpus> for Splits {
    fn from(s: SyntheticCorpus) -> Self {
        Self {
            train: s.train,
            test: s.test,
            anti: Some(s.anti),
        }
    }
}

/// Generates the synthetic corpus of `seed` from `base`.
pub fn synthetic_splits(base: &BiasConfig, seed: u64) -> Result<Splits> {
    Ok(generate_synthetic_corpus(&BiasConfig { seed, ..base.clone() })?.into())
}

fn metrics(ckpt: &absa_core::training::Checkpoint, corpus: &Corpus, mode: InferenceMode) -> Result<ModeMetrics> {
    ModeMetrics::from_predictions(mode, &predict(&ckpt.model, corpus, mode)?)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn original(m: &ModeMetrics) -> f64 {
    m.subset_accuracy(Subset::Original).unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, Serialize)]
pub struct DebiasSeed {
    pub seed: u64,
    /// Fused-only baseline, total-effect inference.
    pub baseline_anti: f64,
    pub baseline_original: f64,
    pub baseline_revtgt: f64,
    /// Three-branch model, debiased inference.
    pub debiased_anti: f64,
    pub debiased_original: f64,
    pub debiased_revtgt: f64,
    /// Three-branch model scored without removing the aspect effect.
    pub full_te_anti: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DebiasReport {
    pub seeds: Vec<DebiasSeed>,
    pub anti_gain: f64,
    pub original_change: f64,
    pub revtgt_gain: f64,
}

/// Trains the fused-only baseline and the three-branch model on each seed's
/// synthetic corpus and compares them on the anti-biased split and the
/// Original subset of the test split.
pub fn debias_experiment(bias: &BiasConfig, full: &TrainingConfig, seeds: &[u64]) -> Result<DebiasReport> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let splits = synthetic_splits(bias, seed)?;
        let anti = splits.anti.as_ref().expect("synthetic splits carry an anti split");
        let mut base_cfg = TrainingConfig {
            seed,
            alpha: 0.0,
            beta: 0.0,
            ..full.clone()
        };
        base_cfg.model.kind = ModelKind::FusedOnly;
        let mut full_cfg = TrainingConfig { seed, ..full.clone() };
        full_cfg.model.kind = ModelKind::Full;

        let base = train(&splits.train, &base_cfg)?;
        let b_test = metrics(&base, &splits.test, InferenceMode::Te)?;
        let b_anti = metrics(&base, anti, InferenceMode::Te)?;
        let model = train(&splits.train, &full_cfg)?;
        let d_test = metrics(&model, &splits.test, InferenceMode::Tie)?;
        let d_anti = metrics(&model, anti, InferenceMode::Tie)?;
        let te_anti = metrics(&model, anti, InferenceMode::Te)?;
        let row = DebiasSeed {
            seed,
            baseline_anti: b_anti.accuracy,
            baseline_original: original(&b_test),
            baseline_revtgt: b_test.subset_accuracy(Subset::RevTgt).unwrap_or(f64::NAN),
            debiased_anti: d_anti.accuracy,
            debiased_original: original(&d_test),
            debiased_revtgt: d_test.subset_accuracy(Subset::RevTgt).unwrap_or(f64::NAN),
            full_te_anti: te_anti.accuracy,
        };
        eprintln!(
            "seed {seed}: anti {:.2} -> {:.2}, original {:.2} -> {:.2}",
            row.baseline_anti, row.debiased_anti, row.baseline_original, row.debiased_original
        );
        rows.push(row);
    }
    Ok(DebiasReport {
        anti_gain: mean(rows.iter().map(|r| r.debiased_anti - r.baseline_anti)),
        original_change: mean(rows.iter().map(|r| r.debiased_original - r.baseline_original)),
        revtgt_gain: mean(rows.iter().map(|r| r.debiased_revtgt - r.baseline_revtgt)),
        seeds: rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub seed: u64,
    pub branch: Branch,
    /// Accuracy per subset of the test split, in `Subset::ALL` order
    /// (`None` for absent subsets).
    pub subsets: Vec<Option<f64>>,
    pub test_accuracy: f64,
    pub anti_accuracy: Option<f64>,
}

/// Trains single-branch probes (encoder plus linear head, plain
/// cross-entropy) and reports per-subset accuracy.
pub fn probe_experiment(splits: &[(u64, Splits)], branches: &[Branch], cfg: &TrainingConfig) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for (seed, s) in splits {
        for &branch in branches {
            let mut c = TrainingConfig { seed: *seed, ..cfg.clone() };
            c.model.kind = ModelKind::probe(branch);
            let ckpt = train(&s.train, &c)?;
            let m = metrics(&ckpt, &s.test, InferenceMode::Te)?;
            let anti = match &s.anti {
                Some(a) => Some(metrics(&ckpt, a, InferenceMode::Te)?.accuracy),
                None => None,
            };
            rows.push(ProbeRow {
                seed: *seed,
                branch,
                subsets: Subset::ALL.iter().map(|&x| m.subset_accuracy(x)).collect(),
                test_accuracy: m.accuracy,
                anti_accuracy: anti,
            });
        }
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("seed,branch,Original,RevTgt,RevNon,AddDiff,test,anti\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
    for r in rows {
        let subsets: Vec<String> = r.subsets.iter().map(|&v| cell(v)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{}",
            r.seed,
            r.branch.name(),
            subsets.join(","),
            r.test_accuracy,
            cell(r.anti_accuracy)
        );
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct FusionRow {
    pub fusion: FusionStrategy,
    pub accuracies: Vec<f64>,
    pub ars: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_ars: f64,
}

/// Trains the three-branch model under every fusion strategy on each
/// seed's splits and scores it with debiased inference on the test split.
pub fn ablate_fusion(splits: &[(u64, Splits)], cfg: &TrainingConfig) -> Result<Vec<FusionRow>> {
    let mut rows = Vec::new();
    for fusion in FusionStrategy::ALL {
        let (mut accs, mut arss) = (Vec::new(), Vec::new());
        for (seed, s) in splits {
            let mut c = TrainingConfig { seed: *seed, ..cfg.clone() };
            c.model.kind = ModelKind::Full;
            c.model.fusion = fusion;
            let ckpt = train(&s.train, &c)?;
            let m = metrics(&ckpt, &s.test, InferenceMode::Tie)?;
            eprintln!("{fusion} seed {seed}: accuracy {:.2}", m.accuracy);
            accs.push(m.accuracy);
            arss.push(m.ars.unwrap_or(f64::NAN));
        }
        rows.push(FusionRow {
            fusion,
            mean_accuracy: mean(accs.iter().copied()),
            mean_ars: mean(arss.iter().copied()),
            accuracies: accs,
            ars: arss,
        });
    }
    Ok(rows)
}

pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut out = String::from("fusion,mean_accuracy,mean_ars,accuracies\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{}",
            r.fusion.name(),
            r.mean_accuracy,
            r.mean_ars,
            accs.join(";")
        );
    }
    out
}
