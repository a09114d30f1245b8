//! Confounder dictionary, normalized and context-debiased review logits,
//! fusion of branch logits and counterfactual effect arithmetic.
//!
//! The graph-building functions here are the ones the model trains with;
//! the slice-based wrappers evaluate them on plain vectors.

use std::fmt;

use absa_numeric::{Graph, Tensor, Var, NORM_FLOOR};
use serde::{Deserialize, Serialize};

use crate::corpus::Polarity;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewHeadConfig {
    /// Number of feature groups K; must divide d.
    pub groups: usize,
    /// Logit scale τ.
    pub tau: f64,
    /// Weight-norm guard ε.
    pub eps: f64,
}

impl Default for ReviewHeadConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            tau: 16.0,
            eps: 1e-5,
        }
    }
}

impl ReviewHeadConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.groups == 0 || !d.is_multiple_of(self.groups) {
            return Err(Error::config(
                "head.groups",
                format!("{} does not divide d = {d}", self.groups),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("head.tau", "must be positive"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("head.eps", "must be non-negative"));
        }
        Ok(())
    }
}

/// Divides each of the `groups` equal slices of every row of `x: [n, d]`
/// by its Euclidean norm plus `eps`, floored at [`NORM_FLOOR`]. All-zero
/// slices stay zero.
pub fn group_normalize(g: &mut Graph, x: Var, groups: usize, eps: f64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (n, d) = (shape[0], shape[1]);
    let parts = g.reshape(x, &[n * groups, d / groups])?;
    let mut norms = g.l2_norm(parts)?;
    if eps > 0.0 {
        norms = g.add_scalar(norms, eps)?;
    }
    let norms = g.clamp_min(norms, NORM_FLOOR)?;
    let unit = g.div_last(parts, norms)?;
    Ok(g.reshape(unit, &[n, d])?)
}

/// Review logits `[n, classes]` from features `r: [n, d]` and classifier
/// weights `w: [classes, d]`: the group-normalized cosine form, or, with
/// `r_c`, the same weights applied to `r̂ - r̂_c`.
pub fn review_logits_graph(
    g: &mut Graph,
    r: Var,
    r_c: Option<Var>,
    w: Var,
    head: &ReviewHeadConfig,
) -> Result<Var> {
    let w_hat = group_normalize(g, w, head.groups, head.eps)?;
    let mut x = group_normalize(g, r, head.groups, 0.0)?;
    if let Some(rc) = r_c {
        let rc_hat = group_normalize(g, rc, head.groups, 0.0)?;
        x = g.sub(x, rc_hat)?;
    }
    let wt = g.transpose(w_hat)?;
    let logits = g.matmul(x, wt)?;
    Ok(g.scale(logits, head.tau / head.groups as f64)?)
}

/// Context feature `C = Σ_n softmax_n(q·u_n / √d) u_n` for every row of
/// `q: [n, d]` against `prototypes: [N, d]`. Returns `(C, weights)`.
pub fn context_feature_graph(g: &mut Graph, q: Var, prototypes: Var) -> Result<(Var, Var)> {
    let d = g.value(q).cols();
    let pt = g.transpose(prototypes)?;
    let scores = g.matmul(q, pt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let c = g.matmul(weights, prototypes)?;
    Ok((c, weights))
}

/// `r_c = W_c · [r; C]` row-wise, with `w_c: [d, 2d]`.
pub fn context_projection_graph(g: &mut Graph, r: Var, c: Var, w_c: Var) -> Result<Var> {
    let rc = g.concat(&[r, c])?;
    let wt = g.transpose(w_c)?;
    Ok(g.matmul(rc, wt)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    #[serde(rename = "SUM-Vanilla")]
    SumVanilla,
    #[serde(rename = "SUM-sigmoid")]
    SumSigmoid,
    #[serde(rename = "SUM-tanh")]
    #[default]
    SumTanh,
    #[serde(rename = "MUL-Vanilla")]
    MulVanilla,
    #[serde(rename = "MUL-sigmoid")]
    MulSigmoid,
    #[serde(rename = "MUL-tanh")]
    MulTanh,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy)]
enum Squash {
    Identity,
    Sigmoid,
    Tanh,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::SumVanilla,
        FusionStrategy::SumSigmoid,
        FusionStrategy::SumTanh,
        FusionStrategy::MulVanilla,
        FusionStrategy::MulSigmoid,
        FusionStrategy::MulTanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::SumVanilla => "SUM-Vanilla",
            FusionStrategy::SumSigmoid => "SUM-sigmoid",
            FusionStrategy::SumTanh => "SUM-tanh",
            FusionStrategy::MulVanilla => "MUL-Vanilla",
            FusionStrategy::MulSigmoid => "MUL-sigmoid",
            FusionStrategy::MulTanh => "MUL-tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|f| f.name().to_ascii_lowercase() == key)
    }

    pub fn is_sum(self) -> bool {
        matches!(
            self,
            FusionStrategy::SumVanilla | FusionStrategy::SumSigmoid | FusionStrategy::SumTanh
        )
    }

    fn squash(self) -> Squash {
        match self {
            FusionStrategy::SumVanilla | FusionStrategy::MulVanilla => Squash::Identity,
            FusionStrategy::SumSigmoid | FusionStrategy::MulSigmoid => Squash::Sigmoid,
            FusionStrategy::SumTanh | FusionStrategy::MulTanh => Squash::Tanh,
        }
    }

    /// Elementwise fusion of the aspect, review and fused logits. The
    /// squashing function applies to the aspect and review terms only.
    pub fn fuse(self, za: &[f64], zr: &[f64], zk: &[f64]) -> Vec<f64> {
        let s = |x| self.squash_value(x);
        za.iter()
            .zip(zr)
            .zip(zk)
            .map(|((&a, &r), &k)| if self.is_sum() { k + s(a) + s(r) } else { k * s(a) * s(r) })
            .collect()
    }

    fn squash_value(self, x: f64) -> f64 {
        match self.squash() {
            Squash::Identity => x,
            Squash::Sigmoid => sigmoid(x),
            Squash::Tanh => x.tanh(),
        }
    }

    pub fn fuse_graph(self, g: &mut Graph, za: Var, zr: Var, zk: Var) -> Result<Var> {
        let (a, r) = match self.squash() {
            Squash::Identity => (za, zr),
            Squash::Sigmoid => (g.sigmoid(za)?, g.sigmoid(zr)?),
            Squash::Tanh => (g.tanh(za)?, g.tanh(zr)?),
        };
        if self.is_sum() {
            let s = g.add(zk, a)?;
            Ok(g.add(s, r)?)
        } else {
            let m = g.mul(zk, a)?;
            Ok(g.mul(m, r)?)
        }
    }
}

/// Constant logits standing in for a branch whose input is set void.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voids {
    pub c_a: Vec<f64>,
    pub c_r: Vec<f64>,
    pub c_k: Vec<f64>,
}

impl Voids {
    pub fn zeros(classes: usize) -> Self {
        Self {
            c_a: vec![0.0; classes],
            c_r: vec![0.0; classes],
            c_k: vec![0.0; classes],
        }
    }

    pub fn constant(classes: usize, c_a: f64, c_r: f64, c_k: f64) -> Self {
        Self {
            c_a: vec![c_a; classes],
            c_r: vec![c_r; classes],
            c_k: vec![c_k; classes],
        }
    }
}

impl Default for Voids {
    fn default() -> Self {
        Self::zeros(Polarity::COUNT)
    }
}

/// Per-instance logits of the three branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchOutputs {
    pub za: Vec<f64>,
    pub zr: Vec<f64>,
    pub zk: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Fused score minus the aspect-only direct effect.
    Tie,
    /// Fused score alone.
    Te,
    /// Four-term counterfactual difference with void substitutions.
    Literal,
}

impl InferenceMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tie" => Some(InferenceMode::Tie),
            "te" => Some(InferenceMode::Te),
            "literal" | "literal4term" => Some(InferenceMode::Literal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Tie => "tie",
            InferenceMode::Te => "te",
            InferenceMode::Literal => "literal",
        }
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `fuse(ζ_a, c_r, c_k) - fuse(c_a, c_r, c_k)`.
pub fn nde_aspect(za: &[f64], voids: &Voids, strategy: FusionStrategy) -> Vec<f64> {
    sub(
        &strategy.fuse(za, &voids.c_r, &voids.c_k),
        &strategy.fuse(&voids.c_a, &voids.c_r, &voids.c_k),
    )
}

/// Effect decomposition of one instance; the interaction effect is taken
/// to be zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalEffects {
    pub te: Vec<f64>,
    pub nde_a: Vec<f64>,
    pub nde_r: Vec<f64>,
    pub tie: Vec<f64>,
}

pub fn causal_effects(out: &BranchOutputs, voids: &Voids, strategy: FusionStrategy) -> CausalEffects {
    let f = |a: &[f64], r: &[f64], k: &[f64]| strategy.fuse(a, r, k);
    let base = f(&voids.c_a, &voids.c_r, &voids.c_k);
    let te = sub(&f(&out.za, &out.zr, &out.zk), &base);
    let nde_a = sub(&f(&out.za, &voids.c_r, &voids.c_k), &base);
    let nde_r = sub(&f(&voids.c_a, &out.zr, &voids.c_k), &base);
    let tie = te
        .iter()
        .zip(&nde_a)
        .zip(&nde_r)
        .map(|((t, a), r)| t - a - r)
        .collect();
    CausalEffects { te, nde_a, nde_r, tie }
}

/// Final class scores under `mode`.
pub fn inference_scores(out: &BranchOutputs, voids: &Voids, strategy: FusionStrategy, mode: InferenceMode) -> Vec<f64> {
    let fused = strategy.fuse(&out.za, &out.zr, &out.zk);
    match mode {
        InferenceMode::Te => fused,
        InferenceMode::Tie => sub(&fused, &nde_aspect(&out.za, voids, strategy)),
        // Additive fusion separates per branch, so the four terms cancel
        // exactly except for the fused branch: ζ_k - c_k.
        InferenceMode::Literal if strategy.is_sum() => out.zk.iter().zip(&voids.c_k).map(|(k, c)| k - c).collect(),
        InferenceMode::Literal => {
            let a_void = strategy.fuse(&voids.c_a, &out.zr, &voids.c_k);
            let r_void = strategy.fuse(&out.za, &voids.c_r, &voids.c_k);
            let all_void = strategy.fuse(&voids.c_a, &voids.c_r, &voids.c_k);
            (0..fused.len())
                .map(|i| fused[i] - a_void[i] - r_void[i] + all_void[i])
                .collect()
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores and predicted class under `mode`.
pub fn tie_inference(
    out: &BranchOutputs,
    voids: &Voids,
    strategy: FusionStrategy,
    mode: InferenceMode,
) -> (Vec<f64>, usize) {
    let s = inference_scores(out, voids, strategy, mode);
    let c = argmax(&s);
    (s, c)
}

/// Per-aspect context prototypes captured from lower-layer review
/// features early in training.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderDictionary {
    /// Aspect terms (space-joined), sorted.
    pub terms: Vec<String>,
    pub member_counts: Vec<usize>,
    /// `[N, d]`, row `n` is the prototype of `terms[n]`.
    pub prototypes: Tensor,
    pub snapshot_epoch: usize,
}

impl ConfounderDictionary {
    /// Mean feature per aspect over `(term, feature)` memberships.
    pub fn from_members<'a, I>(members: I, d: usize, snapshot_epoch: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (String, &'a [f64])>,
    {
        let mut acc: std::collections::BTreeMap<String, (usize, Vec<f64>)> = Default::default();
        for (term, feat) in members {
            if feat.len() != d {
                return Err(Error::config("dictionary", format!("feature width {} != d = {d}", feat.len())));
            }
            let e = acc.entry(term).or_insert_with(|| (0, vec![0.0; d]));
            e.0 += 1;
            for (s, v) in e.1.iter_mut().zip(feat) {
                *s += v;
            }
        }
        if acc.is_empty() {
            return Err(Error::Empty("confounder dictionary members"));
        }
        let mut terms = Vec::with_capacity(acc.len());
        let mut counts = Vec::with_capacity(acc.len());
        let mut data = Vec::with_capacity(acc.len() * d);
        for (term, (n, sum)) in acc {
            terms.push(term);
            counts.push(n);
            data.extend(sum.into_iter().map(|s| s / n as f64));
        }
        Ok(Self {
            prototypes: Tensor::new(vec![terms.len(), d], data)?,
            terms,
            member_counts: counts,
            snapshot_epoch,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn d(&self) -> usize {
        self.prototypes.cols()
    }
}

fn vector_const(g: &mut Graph, v: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?))
}

fn row(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

/// Group-normalized logits of a single feature vector `r` against
/// `w: [classes, d]`.
pub fn normalized_group_logits(r: &[f64], w: &Tensor, head: &ReviewHeadConfig) -> Result<Vec<f64>> {
    head.validate(r.len())?;
    let mut g = Graph::new();
    let rv = vector_const(&mut g, r)?;
    let wv = g.constant(w.clone());
    let out = review_logits_graph(&mut g, rv, None, wv, head)?;
    Ok(row(&g, out))
}

/// Debiased review logits `(τ/K) Σ_k ŵ^k · (r̂^k - r̂_c^k)`.
pub fn debiased_review_logits(r: &[f64], r_c: &[f64], w: &Tensor, head: &ReviewHeadConfig) -> Result<Vec<f64>> {
    head.validate(r.len())?;
    let mut g = Graph::new();
    let rv = vector_const(&mut g, r)?;
    let rcv = vector_const(&mut g, r_c)?;
    let wv = g.constant(w.clone());
    let out = review_logits_graph(&mut g, rv, Some(rcv), wv, head)?;
    Ok(row(&g, out))
}

/// `(C, P(u_n | r))` for a single query vector.
pub fn context_feature(r: &[f64], dict: &ConfounderDictionary) -> Result<(Vec<f64>, Vec<f64>)> {
    if dict.is_empty() {
        return Err(Error::Empty("confounder dictionary"));
    }
    let mut g = Graph::new();
    let q = vector_const(&mut g, r)?;
    let p = g.constant(dict.prototypes.clone());
    let (c, w) = context_feature_graph(&mut g, q, p)?;
    Ok((row(&g, c), row(&g, w)))
}

pub fn context_projection(r: &[f64], c: &[f64], w_c: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let rv = vector_const(&mut g, r)?;
    let cv = vector_const(&mut g, c)?;
    let wv = g.constant(w_c.clone());
    let out = context_projection_graph(&mut g, rv, cv, wv)?;
    Ok(row(&g, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(groups: usize, tau: f64, eps: f64) -> ReviewHeadConfig {
        ReviewHeadConfig { groups, tau, eps }
    }

    #[test]
    fn single_group_cosine() {
        let w = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let z = normalized_group_logits(&[3.0, 4.0], &w, &head(1, 1.0, 0.0)).unwrap();
        assert!((z[0] - 0.6).abs() < 1e-15);
        let z2 = normalized_group_logits(&[6.0, 8.0], &w, &head(1, 1.0, 0.0)).unwrap();
        assert!((z2[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn two_groups() {
        let w = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = normalized_group_logits(&[1.0, 0.0, 0.0, 2.0], &w, &head(2, 2.0, 0.0)).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_group_contributes_nothing() {
        let w = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = normalized_group_logits(&[0.0, 0.0, 0.0, 2.0], &w, &head(2, 2.0, 0.0)).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_context_cancels_and_antipodal_doubles() {
        let w = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let h = head(2, 16.0, 1e-5);
        let r = [0.3, -1.2, 0.5, 2.0];
        let z = debiased_review_logits(&r, &r, &w, &h).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let z2 = debiased_review_logits(&r, &neg, &w, &h).unwrap();
        let base = normalized_group_logits(&r, &w, &h).unwrap();
        for (a, b) in z2.iter().zip(&base) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_feature_symmetry_and_singleton() {
        let members = [("a".to_string(), &[1.0, 0.0][..]), ("b".to_string(), &[0.0, 1.0][..])];
        let dict = ConfounderDictionary::from_members(members, 2, 1).unwrap();
        let (c, w) = context_feature(&[1.0, 1.0], &dict).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);

        let one = ConfounderDictionary::from_members([("a".to_string(), &[0.2, -0.7][..])], 2, 1).unwrap();
        let (c, _) = context_feature(&[5.0, 3.0], &one).unwrap();
        assert_eq!(c, [0.2, -0.7]);
    }

    #[test]
    fn dictionary_means() {
        let members = [("x".to_string(), &[1.0, 0.0][..]), ("x".to_string(), &[0.0, 1.0][..])];
        let d = ConfounderDictionary::from_members(members, 2, 1).unwrap();
        assert_eq!(d.prototypes.data(), [0.5, 0.5]);
        assert_eq!(d.member_counts, [2]);
        let none: [(String, &[f64]); 0] = [];
        assert!(ConfounderDictionary::from_members(none, 2, 1).is_err());
    }

    #[test]
    fn projection_identities() {
        let d = 3;
        let mut left = vec![0.0; d * 2 * d];
        let mut right = vec![0.0; d * 2 * d];
        for i in 0..d {
            left[i * 2 * d + i] = 1.0;
            right[i * 2 * d + d + i] = 1.0;
        }
        let r = [1.0, 2.0, 3.0];
        let c = [-4.0, 5.0, 0.5];
        let l = Tensor::matrix(d, 2 * d, left).unwrap();
        let rr = Tensor::matrix(d, 2 * d, right).unwrap();
        assert_eq!(context_projection(&r, &c, &l).unwrap(), r);
        assert_eq!(context_projection(&r, &c, &rr).unwrap(), c);
    }

    #[test]
    fn fusion_examples() {
        let s = FusionStrategy::SumTanh;
        assert_eq!(s.fuse(&[0.0; 3], &[0.0; 3], &[1.0, 0.0, -1.0]), [1.0, 0.0, -1.0]);
        let m = FusionStrategy::MulVanilla;
        assert_eq!(m.fuse(&[1.0; 3], &[1.0; 3], &[2.0, 3.0, 4.0]), [2.0, 3.0, 4.0]);
        let z = s.fuse(&[1.0, -1.0], &[0.2, 0.0], &[0.5, -0.5]);
        assert_eq!(z, [0.5 + 1f64.tanh() + 0.2f64.tanh(), -0.5 + (-1f64).tanh()]);
        for f in FusionStrategy::ALL {
            assert_eq!(FusionStrategy::parse(f.name()), Some(f));
        }
    }

    #[test]
    fn effect_reductions_under_zero_voids() {
        let v = Voids::zeros(3);
        let za = [0.4, -1.3, 2.2];
        let nde = nde_aspect(&za, &v, FusionStrategy::SumTanh);
        for (a, b) in nde.iter().zip(za) {
            assert_eq!(*a, b.tanh());
        }
        assert_eq!(nde_aspect(&[0.0; 3], &v, FusionStrategy::SumSigmoid), [0.0; 3]);
        let out = BranchOutputs {
            za: za.to_vec(),
            zr: vec![0.1, 0.7, -0.2],
            zk: vec![1.5, -0.5, 0.25],
        };
        let lit = inference_scores(&out, &v, FusionStrategy::SumTanh, InferenceMode::Literal);
        assert_eq!(lit, out.zk);
        let e = causal_effects(&out, &v, FusionStrategy::SumTanh);
        for i in 0..3 {
            assert!((e.tie[i] - out.zk[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
