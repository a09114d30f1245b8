//! Vocabulary, branch inputs and the small post-LN transformer encoders.

use std::collections::{BTreeSet, HashMap};

use absa_numeric::{AttentionLayout, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Instance};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.05;
const LN_EPS: f64 = 1e-5;

/// Token-to-id map built from a training split. Ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Every review and aspect token of `train`, in sorted order after the
    /// reserved entries.
    pub fn build(train: &Corpus) -> Self {
        let words: BTreeSet<&str> = train
            .iter()
            .flat_map(|i| i.review.iter().chain(&i.aspect_term))
            .map(String::as_str)
            .collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(str::to_string))
            .collect::<Vec<_>>();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &[String]) -> Vec<usize> {
        text.iter().map(|t| self.id(t)).collect()
    }

    /// Fraction of tokens of `corpus` (reviews and aspects) that map to UNK.
    pub fn oov_rate(&self, corpus: &Corpus) -> f64 {
        let (mut oov, mut total) = (0usize, 0usize);
        for inst in corpus {
            for t in inst.review.iter().chain(&inst.aspect_term) {
                total += 1;
                if !self.index.contains_key(t) {
                    oov += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            oov as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Fused,
    AspectOnly,
    ReviewOnly,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Fused, Branch::AspectOnly, Branch::ReviewOnly];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Fused => "fused",
            Branch::AspectOnly => "aspect",
            Branch::ReviewOnly => "review",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fused" => Some(Branch::Fused),
            "aspect" | "aspectonly" => Some(Branch::AspectOnly),
            "review" | "reviewonly" => Some(Branch::ReviewOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub pooling: Pooling,
    /// 1-based layer whose output feeds the confounder features.
    pub lower_tap_layer: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            pooling: Pooling::Cls,
            lower_tap_layer: 1,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.heads",
                format!("d = {} must be a positive multiple of n_heads = {}", self.d, self.n_heads),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::config("model.layers", "must be at least 1"));
        }
        if self.lower_tap_layer == 0 || self.lower_tap_layer > self.n_layers {
            return Err(Error::config(
                "model.lower_tap_layer",
                format!("must lie in 1..={}", self.n_layers),
            ));
        }
        if self.max_len < 4 {
            return Err(Error::config("model.max_len", "must be at least 4"));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        2 * self.d
    }
}

/// Token ids fed to `branch` for `inst`, and whether the review had to be
/// truncated to fit `max_len`. The aspect is never truncated.
pub fn branch_input(inst: &Instance, branch: Branch, vocab: &Vocab, max_len: usize) -> Result<(Vec<usize>, bool)> {
    let aspect = vocab.tokenize(&inst.aspect_term);
    let review = vocab.tokenize(&inst.review);
    let (fixed, with_review) = match branch {
        Branch::AspectOnly => (2 + aspect.len(), false),
        Branch::ReviewOnly => (2, true),
        Branch::Fused => (3 + aspect.len(), true),
    };
    if fixed > max_len || (with_review && fixed >= max_len) {
        return Err(Error::InvalidInstance {
            id: inst.id.clone(),
            reason: format!("aspect of {} tokens does not fit max_len {max_len}", aspect.len()),
        });
    }
    let mut ids = vec![CLS];
    let mut truncated = false;
    if with_review {
        let room = max_len - fixed;
        truncated = review.len() > room;
        ids.extend(&review[..review.len().min(room)]);
        ids.push(SEP);
    }
    if branch != Branch::ReviewOnly {
        ids.extend(&aspect);
        ids.push(SEP);
    }
    Ok((ids, truncated))
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite uniform draws")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.insert(format!("{name}.w"), uniform(rng, &[fan_in, fan_out]), true)?,
            b: store.insert(format!("{name}.b"), uniform(rng, &[fan_out]), false)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn register(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0), false)?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[d]), false)?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln1: Norm,
    ff1: Dense,
    ff2: Dense,
    ln2: Norm,
}

/// One branch encoder: its own positional table and transformer layers over
/// the shared token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    branch: Branch,
    cfg: EncoderConfig,
    tokens: ParamId,
    positions: ParamId,
    emb_norm: Norm,
    layers: Vec<Layer>,
}

/// Pooled features of a batch, `[batch, d]` each.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub pooled: Var,
    /// Pooled output of the lower tap layer.
    pub lower: Var,
}

/// Registers the shared token embedding table.
pub fn register_token_embedding(store: &mut ParamStore, rng: &mut ChaCha8Rng, vocab_size: usize, d: usize) -> Result<ParamId> {
    Ok(store.insert("embed.tokens", uniform(rng, &[vocab_size, d]), true)?)
}

impl Encoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        branch: Branch,
        cfg: &EncoderConfig,
        tokens: ParamId,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let p = branch.name();
        let positions = store.insert(format!("{p}.positions"), uniform(rng, &[cfg.max_len, d]), true)?;
        let emb_norm = Norm::register(store, &format!("{p}.emb_ln"), d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("{p}.layer{l}.{s}");
            layers.push(Layer {
                q: Dense::register(store, rng, &n("q"), d, d)?,
                k: Dense::register(store, rng, &n("k"), d, d)?,
                v: Dense::register(store, rng, &n("v"), d, d)?,
                o: Dense::register(store, rng, &n("o"), d, d)?,
                ln1: Norm::register(store, &n("ln1"), d)?,
                ff1: Dense::register(store, rng, &n("ff1"), d, cfg.ffn_width())?,
                ff2: Dense::register(store, rng, &n("ff2"), cfg.ffn_width(), d)?,
                ln2: Norm::register(store, &n("ln2"), d)?,
            });
        }
        Ok(Self {
            branch,
            cfg: cfg.clone(),
            tokens,
            positions,
            emb_norm,
            layers,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Parameters of layers strictly above the lower tap (0-based layer
    /// indices `lower_tap_layer..`).
    pub fn upper_layer_params(&self) -> Vec<ParamId> {
        self.layers[self.cfg.lower_tap_layer..]
            .iter()
            .flat_map(|l| {
                [l.q, l.k, l.v, l.o, l.ff1, l.ff2]
                    .into_iter()
                    .flat_map(|dn| [dn.w, dn.b])
                    .chain([l.ln1.gamma, l.ln1.beta, l.ln2.gamma, l.ln2.beta])
            })
            .collect()
    }

    /// Encodes a batch of id sequences, padding to the longest.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>], dropout: f64) -> Result<Encoded> {
        let batch = seqs.len();
        if batch == 0 {
            return Err(Error::Empty("encoder batch"));
        }
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if t == 0 || t > self.cfg.max_len {
            return Err(Error::config(
                "model.max_len",
                format!("sequence length {t} outside 1..={}", self.cfg.max_len),
            ));
        }
        let mut ids = Vec::with_capacity(batch * t);
        let mut mask = Vec::with_capacity(batch * t);
        for s in seqs {
            ids.extend(s.iter().copied().chain(std::iter::repeat_n(PAD, t - s.len())));
            mask.extend((0..t).map(|i| i < s.len()));
        }
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();

        let table = g.param(store, self.tokens);
        let tok = g.embedding(table, &ids)?;
        let ptable = g.param(store, self.positions);
        let pos = g.embedding(ptable, &pos_ids)?;
        let x = g.add(tok, pos)?;
        let x = self.emb_norm.apply(g, store, x)?;
        let mut x = g.dropout(x, dropout)?;

        let layout = AttentionLayout {
            batch,
            seq_len: t,
            heads: self.cfg.n_heads,
            key_mask: mask,
        };
        let pool = self.pooling_matrix(seqs, t);
        let mut lower = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let q = layer.q.apply(g, store, x)?;
            let k = layer.k.apply(g, store, x)?;
            let v = layer.v.apply(g, store, x)?;
            let a = g.attention(q, k, v, layout.clone())?;
            let a = layer.o.apply(g, store, a)?;
            let a = g.dropout(a, dropout)?;
            let h = g.add(x, a)?;
            let h = layer.ln1.apply(g, store, h)?;
            let f = layer.ff1.apply(g, store, h)?;
            let f = g.tanh(f)?;
            let f = layer.ff2.apply(g, store, f)?;
            let f = g.dropout(f, dropout)?;
            let h2 = g.add(h, f)?;
            x = layer.ln2.apply(g, store, h2)?;
            if l + 1 == self.cfg.lower_tap_layer {
                lower = Some(self.pool(g, x, &pool, batch, t)?);
            }
        }
        let pooled = self.pool(g, x, &pool, batch, t)?;
        Ok(Encoded {
            pooled,
            lower: lower.expect("lower_tap_layer validated against n_layers"),
        })
    }

    fn pooling_matrix(&self, seqs: &[Vec<usize>], t: usize) -> Option<Tensor> {
        match self.cfg.pooling {
            Pooling::Cls => None,
            Pooling::Mean => {
                let b = seqs.len();
                let mut m = vec![0.0; b * b * t];
                for (i, s) in seqs.iter().enumerate() {
                    let w = 1.0 / s.len() as f64;
                    for j in 0..s.len() {
                        m[i * b * t + i * t + j] = w;
                    }
                }
                Some(Tensor::new(vec![b, b * t], m).expect("finite pooling weights"))
            }
        }
    }

    fn pool(&self, g: &mut Graph, x: Var, pool: &Option<Tensor>, batch: usize, t: usize) -> Result<Var> {
        Ok(match pool {
            None => {
                let rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
                g.gather_rows(x, &rows)?
            }
            Some(m) => {
                let p = g.constant(m.clone());
                g.matmul(p, x)?
            }
        })
    }
}
