use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, Polarity};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// Fraction of aspect terms whose target occurrences all carry one
    /// polarity.
    pub single_polarity_fraction: f64,
    /// Fraction of instances whose annotated aspects all share one
    /// polarity.
    pub all_same_fraction: f64,
    pub n_aspect_terms: usize,
    pub n_instances: usize,
    /// Target-occurrence counts per aspect term, indexed by class.
    pub histograms: BTreeMap<String, [usize; Polarity::COUNT]>,
}

pub fn analyze_bias(corpus: &Corpus) -> Result<BiasReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut histograms: BTreeMap<String, [usize; Polarity::COUNT]> = BTreeMap::new();
    let mut all_same = 0usize;
    for inst in corpus {
        histograms.entry(inst.aspect_key()).or_default()[inst.label.index()] += 1;
        if inst.all_aspects.iter().all(|m| m.label == inst.label) {
            all_same += 1;
        }
    }
    let single = histograms
        .values()
        .filter(|h| h.iter().filter(|&&c| c > 0).count() == 1)
        .count();
    Ok(BiasReport {
        single_polarity_fraction: single as f64 / histograms.len() as f64,
        all_same_fraction: all_same as f64 / corpus.len() as f64,
        n_aspect_terms: histograms.len(),
        n_instances: corpus.len(),
        histograms,
    })
}
