//! The three-branch model, its single-branch variants and the multi-task
//! objective.

use absa_numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::causal::{
    context_feature_graph, context_projection_graph, review_logits_graph, BranchOutputs, ConfounderDictionary,
    FusionStrategy, InferenceMode, ReviewHeadConfig, Voids,
};
use crate::corpus::{Instance, Polarity};
use crate::encoder::{branch_input, register_token_embedding, uniform, Branch, Dense, Encoded, Encoder, EncoderConfig, Vocab};
use crate::{rng, Error, Result};

pub const CLASSES: usize = Polarity::COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Aspect, review and fused branches with the normalized, debiased
    /// review head.
    Full,
    /// The fused branch with a linear head.
    FusedOnly,
    /// The aspect-only branch with a linear head.
    AspectProbe,
    /// The review-only branch with a linear head.
    ReviewProbe,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Some(ModelKind::Full),
            "fused-only" | "vanilla" => Some(ModelKind::FusedOnly),
            "aspect-probe" => Some(ModelKind::AspectProbe),
            "review-probe" => Some(ModelKind::ReviewProbe),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Full => "full",
            ModelKind::FusedOnly => "fused-only",
            ModelKind::AspectProbe => "aspect-probe",
            ModelKind::ReviewProbe => "review-probe",
        }
    }

    pub fn single_branch(self) -> Option<Branch> {
        match self {
            ModelKind::Full => None,
            ModelKind::FusedOnly => Some(Branch::Fused),
            ModelKind::AspectProbe => Some(Branch::AspectOnly),
            ModelKind::ReviewProbe => Some(Branch::ReviewOnly),
        }
    }

    pub fn probe(branch: Branch) -> Self {
        match branch {
            Branch::Fused => ModelKind::FusedOnly,
            Branch::AspectOnly => ModelKind::AspectProbe,
            Branch::ReviewOnly => ModelKind::ReviewProbe,
        }
    }

    pub fn branches(self) -> Vec<Branch> {
        match self.single_branch() {
            Some(b) => vec![b],
            None => Branch::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub head: ReviewHeadConfig,
    pub fusion: FusionStrategy,
    pub voids: Voids,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Full,
            encoder: EncoderConfig::default(),
            head: ReviewHeadConfig::default(),
            fusion: FusionStrategy::default(),
            voids: Voids::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate(self.encoder.d)?;
        for (key, v) in [("void.c_a", &self.voids.c_a), ("void.c_r", &self.voids.c_r), ("void.c_k", &self.voids.c_k)] {
            if v.len() != CLASSES || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(key, format!("need {CLASSES} finite values")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Heads {
    fused: Option<Dense>,
    aspect: Option<Dense>,
    review_w: Option<ParamId>,
    context_w: Option<ParamId>,
    single: Option<Dense>,
}

/// Parameters, vocabulary and (once built) the confounder dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub dictionary: Option<ConfounderDictionary>,
    encoders: Vec<Encoder>,
    heads: Heads,
}

/// Id sequences per branch plus gold class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<(Branch, Vec<Vec<usize>>)>,
    pub labels: Vec<usize>,
    pub truncated: usize,
}

/// Graph nodes of one forward pass, all `[batch, CLASSES]` except `lower`.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub za: Option<Var>,
    pub zr: Option<Var>,
    pub zk: Option<Var>,
    /// Training-time score: the fused logits of the full model, or the
    /// single head's logits.
    pub score: Var,
    /// Review-branch lower-layer features `[batch, d]`, when present.
    pub lower: Option<Var>,
}

/// Per-instance outputs read back from a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RawOutputs {
    Full(BranchOutputs),
    Single(Vec<f64>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_k: f64,
    pub l_a: f64,
    pub l_r: f64,
}

/// `L_K + α L_A + β L_R` for a batch: cross-entropy of the fused score and
/// of the aspect and review logits `[za, zr, zk]`. Returns the total and
/// the three terms.
pub fn multi_task_loss_graph(
    g: &mut Graph,
    [za, zr, zk]: [Var; 3],
    labels: &[usize],
    alpha: f64,
    beta: f64,
    fusion: FusionStrategy,
) -> Result<(Var, [Var; 3])> {
    let fused = fusion.fuse_graph(g, za, zr, zk)?;
    let l_k = g.cross_entropy(fused, labels)?;
    let l_a = g.cross_entropy(za, labels)?;
    let l_r = g.cross_entropy(zr, labels)?;
    let a = g.scale(l_a, alpha)?;
    let r = g.scale(l_r, beta)?;
    let t = g.add(l_k, a)?;
    let total = g.add(t, r)?;
    Ok((total, [l_k, l_a, l_r]))
}

/// Loss of a single instance's branch outputs.
pub fn multi_task_loss(
    out: &BranchOutputs,
    label: usize,
    alpha: f64,
    beta: f64,
    fusion: FusionStrategy,
) -> Result<LossParts> {
    if label >= out.zk.len() {
        return Err(Error::config("label", format!("class index {label} out of range")));
    }
    let mut g = Graph::new();
    let mut c = |v: &[f64]| -> Result<Var> { Ok(g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?)) };
    let (za, zr, zk) = (c(&out.za)?, c(&out.zr)?, c(&out.zk)?);
    let (total, [l_k, l_a, l_r]) = multi_task_loss_graph(&mut g, [za, zr, zk], &[label], alpha, beta, fusion)?;
    let v = |x: Var| g.value(x).data()[0];
    Ok(LossParts {
        total: v(total),
        l_k: v(l_k),
        l_a: v(l_a),
        l_r: v(l_r),
    })
}

impl Model {
    /// Registers every parameter in a fixed order with values drawn from
    /// the `init` substream of `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, rng::INIT);
        let mut params = ParamStore::new();
        let d = config.encoder.d;
        let tokens = register_token_embedding(&mut params, &mut rng, vocab.len(), d)?;
        let mut encoders = Vec::new();
        for b in config.kind.branches() {
            encoders.push(Encoder::register(&mut params, &mut rng, b, &config.encoder, tokens)?);
        }
        let mut heads = Heads {
            fused: None,
            aspect: None,
            review_w: None,
            context_w: None,
            single: None,
        };
        match config.kind.single_branch() {
            Some(b) => heads.single = Some(Dense::register(&mut params, &mut rng, &format!("head.{}", b.name()), d, CLASSES)?),
            None => {
                heads.fused = Some(Dense::register(&mut params, &mut rng, "head.fused", d, CLASSES)?);
                heads.aspect = Some(Dense::register(&mut params, &mut rng, "head.aspect", d, CLASSES)?);
                heads.review_w = Some(params.insert("head.review.w", uniform(&mut rng, &[CLASSES, d]), true)?);
                heads.context_w = Some(params.insert("head.context.w", uniform(&mut rng, &[d, 2 * d]), true)?);
            }
        }
        Ok(Self {
            config,
            vocab,
            params,
            dictionary: None,
            encoders,
            heads,
        })
    }

    pub fn encoder(&self, branch: Branch) -> Option<&Encoder> {
        self.encoders.iter().find(|e| e.branch() == branch)
    }

    pub fn batch(&self, insts: &[&Instance]) -> Result<Batch> {
        let mut truncated = 0;
        let mut inputs = Vec::new();
        for e in &self.encoders {
            let mut seqs = Vec::with_capacity(insts.len());
            for inst in insts {
                let (ids, cut) = branch_input(inst, e.branch(), &self.vocab, self.config.encoder.max_len)?;
                truncated += usize::from(cut);
                seqs.push(ids);
            }
            inputs.push((e.branch(), seqs));
        }
        Ok(Batch {
            inputs,
            labels: insts.iter().map(|i| i.label.index()).collect(),
            truncated,
        })
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &Batch, branch: Branch, dropout: f64) -> Result<Option<Encoded>> {
        let Some(enc) = self.encoder(branch) else { return Ok(None) };
        let seqs = &batch
            .inputs
            .iter()
            .find(|(b, _)| *b == branch)
            .ok_or(Error::Empty("batch inputs for branch"))?
            .1;
        Ok(Some(enc.encode(g, store, seqs, dropout)?))
    }

    /// Records one forward pass with parameter values from `store` (which
    /// must share this model's layout).
    pub fn forward_with(&self, store: &ParamStore, g: &mut Graph, batch: &Batch, dropout: f64) -> Result<Forward> {
        if let Some(branch) = self.config.kind.single_branch() {
            let e = self.encode(g, store, batch, branch, dropout)?.expect("single branch encoder");
            let head = self.heads.single.expect("single head");
            let logits = head.apply(g, store, e.pooled)?;
            return Ok(Forward {
                za: None,
                zr: None,
                zk: None,
                score: logits,
                lower: (branch == Branch::ReviewOnly).then_some(e.lower),
            });
        }
        let k = self.encode(g, store, batch, Branch::Fused, dropout)?.expect("fused encoder");
        let a = self.encode(g, store, batch, Branch::AspectOnly, dropout)?.expect("aspect encoder");
        let r = self.encode(g, store, batch, Branch::ReviewOnly, dropout)?.expect("review encoder");
        let zk = self.heads.fused.expect("fused head").apply(g, store, k.pooled)?;
        let za = self.heads.aspect.expect("aspect head").apply(g, store, a.pooled)?;
        let w = g.param(store, self.heads.review_w.expect("review head"));
        let r_c = match &self.dictionary {
            Some(dict) => {
                let protos = g.constant(dict.prototypes.clone());
                let (c, _) = context_feature_graph(g, r.lower, protos)?;
                let w_c = g.param(store, self.heads.context_w.expect("context projection"));
                Some(context_projection_graph(g, r.pooled, c, w_c)?)
            }
            None => None,
        };
        let zr = review_logits_graph(g, r.pooled, r_c, w, &self.config.head)?;
        let score = self.config.fusion.fuse_graph(g, za, zr, zk)?;
        Ok(Forward {
            za: Some(za),
            zr: Some(zr),
            zk: Some(zk),
            score,
            lower: Some(r.lower),
        })
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, dropout: f64) -> Result<Forward> {
        self.forward_with(&self.params, g, batch, dropout)
    }

    /// Training objective of a recorded forward pass.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, labels: &[usize], alpha: f64, beta: f64) -> Result<(Var, [Option<Var>; 3])> {
        match (fwd.za, fwd.zr, fwd.zk) {
            (Some(za), Some(zr), Some(zk)) => {
                let (t, [k, a, r]) = multi_task_loss_graph(g, [za, zr, zk], labels, alpha, beta, self.config.fusion)?;
                Ok((t, [Some(k), Some(a), Some(r)]))
            }
            _ => {
                let l = g.cross_entropy(fwd.score, labels)?;
                Ok((l, [Some(l), None, None]))
            }
        }
    }

    /// Branch outputs of every instance in `insts`, evaluated without
    /// dropout.
    pub fn outputs(&self, insts: &[&Instance]) -> Result<Vec<RawOutputs>> {
        let batch = self.batch(insts)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &batch, 0.0)?;
        let rows = |v: Var| -> Vec<Vec<f64>> { g.value(v).data().chunks(CLASSES).map(<[f64]>::to_vec).collect() };
        Ok(match (fwd.za, fwd.zr, fwd.zk) {
            (Some(za), Some(zr), Some(zk)) => {
                let (za, zr, zk) = (rows(za), rows(zr), rows(zk));
                za.into_iter()
                    .zip(zr)
                    .zip(zk)
                    .map(|((za, zr), zk)| RawOutputs::Full(BranchOutputs { za, zr, zk }))
                    .collect()
            }
            _ => rows(fwd.score).into_iter().map(RawOutputs::Single).collect(),
        })
    }

    /// Lower-layer review features `[n][d]` without dropout.
    pub fn lower_features(&self, insts: &[&Instance]) -> Result<Vec<Vec<f64>>> {
        let enc = self
            .encoder(Branch::ReviewOnly)
            .ok_or_else(|| Error::config("model.kind", "model has no review branch"))?;
        let mut seqs = Vec::with_capacity(insts.len());
        for inst in insts {
            seqs.push(branch_input(inst, Branch::ReviewOnly, &self.vocab, self.config.encoder.max_len)?.0);
        }
        let mut g = Graph::new();
        let e = enc.encode(&mut g, &self.params, &seqs, 0.0)?;
        Ok(g.value(e.lower).data().chunks(self.config.encoder.d).map(<[f64]>::to_vec).collect())
    }

    /// Class scores of one instance's outputs under `mode`. Single-branch
    /// models ignore the mode.
    pub fn scores(&self, raw: &RawOutputs, mode: InferenceMode) -> Vec<f64> {
        match raw {
            RawOutputs::Full(b) => crate::causal::inference_scores(b, &self.config.voids, self.config.fusion, mode),
            RawOutputs::Single(s) => s.clone(),
        }
    }
}
