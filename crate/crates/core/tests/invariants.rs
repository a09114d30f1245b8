use std::collections::BTreeMap;

use absa_core::causal::{
    inference_scores, nde_aspect, normalized_group_logits, BranchOutputs, FusionStrategy, InferenceMode,
    ReviewHeadConfig, Voids,
};
use absa_core::corpus::{Polarity, Subset};
use absa_core::evaluation::{accuracy_f1, ars, Prediction};
use absa_numeric::Tensor;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, 3)
}

fn predictions() -> impl Strategy<Value = Vec<Prediction>> {
    prop::collection::vec((0..12usize, 0..3usize, 0..3usize, 0..4usize), 1..60).prop_map(|rows| {
        let mut seen = BTreeMap::new();
        rows.into_iter()
            .enumerate()
            .map(|(i, (g, gold, pred, s))| {
                // First member of each group is its Original.
                let first = seen.insert(g, ()).is_none();
                Prediction {
                    id: format!("{i}"),
                    source_id: format!("s{g}"),
                    subset: if first { Subset::Original } else { Subset::ALL[1 + s % 3] },
                    gold: Polarity::ALL[gold],
                    pred: Polarity::ALL[pred],
                    scores: vec![0.0; 3],
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn ars_counts_fully_correct_groups(preds in predictions()) {
        let mut groups: BTreeMap<&str, bool> = BTreeMap::new();
        for p in &preds {
            *groups.entry(&p.source_id).or_insert(true) &= p.correct();
        }
        let want = 100.0 * groups.values().filter(|&&v| v).count() as f64 / groups.len() as f64;
        prop_assert!((ars(&preds).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn metrics_ignore_instance_order(preds in predictions(), rot in 0..60usize) {
        let mut shuffled = preds.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        prop_assert_eq!(ars(&preds).unwrap(), ars(&shuffled).unwrap());
        let (a, f) = accuracy_f1(&preds).unwrap();
        let (a2, f2) = accuracy_f1(&shuffled).unwrap();
        prop_assert!((a - a2).abs() < 1e-9 && (f - f2).abs() < 1e-9);
    }

    #[test]
    fn macro_f1_is_symmetric_in_classes(preds in predictions(), shift in 1..3usize) {
        let relabel = |p: Polarity| Polarity::ALL[(p.index() + shift) % 3];
        let moved: Vec<Prediction> = preds
            .iter()
            .map(|p| Prediction { gold: relabel(p.gold), pred: relabel(p.pred), ..p.clone() })
            .collect();
        let (a, f) = accuracy_f1(&preds).unwrap();
        let (a2, f2) = accuracy_f1(&moved).unwrap();
        prop_assert!((a - a2).abs() < 1e-9 && (f - f2).abs() < 1e-9);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&f));
    }

    #[test]
    fn tie_removes_exactly_the_aspect_effect(za in logits(), zr in logits(), zk in logits(), c in logits(), f in 0..6usize) {
        let fusion = FusionStrategy::ALL[f];
        let out = BranchOutputs { za, zr, zk };
        let voids = Voids { c_a: c.clone(), c_r: c.iter().map(|x| x / 2.0).collect(), c_k: c.iter().map(|x| -x).collect() };
        let te = inference_scores(&out, &voids, fusion, InferenceMode::Te);
        let tie = inference_scores(&out, &voids, fusion, InferenceMode::Tie);
        let nde = nde_aspect(&out.za, &voids, fusion);
        for i in 0..3 {
            prop_assert!((tie[i] - (te[i] - nde[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn review_logits_are_scale_free_and_bounded(
        r in prop::collection::vec(-5.0..5.0f64, 8),
        w in prop::collection::vec(-1.0..1.0f64, 24),
        k in prop::sample::select(vec![1usize, 2, 4, 8]),
        log_scale in -6.0..6.0f64,
    ) {
        prop_assume!(r.chunks(8 / k).all(|g| g.iter().any(|x| x.abs() > 1e-3)));
        let head = ReviewHeadConfig { groups: k, tau: 16.0, eps: 1e-5 };
        let w = Tensor::new(vec![3, 8], w).unwrap();
        let base = normalized_group_logits(&r, &w, &head).unwrap();
        let lambda = 10f64.powf(log_scale);
        let scaled: Vec<f64> = r.iter().map(|x| x * lambda).collect();
        let z = normalized_group_logits(&scaled, &w, &head).unwrap();
        for i in 0..3 {
            prop_assert!((z[i] - base[i]).abs() <= 1e-9);
            prop_assert!(z[i].abs() <= head.tau);
        }
    }
}
