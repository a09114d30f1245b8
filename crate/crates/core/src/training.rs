//! Mini-batch optimization of the multi-task objective, confounder
//! snapshotting and the startup gradient self-check.

use std::collections::BTreeSet;

use absa_numeric::gradcheck::DEFAULT_FLOOR;
use absa_numeric::{Gradients, Graph, NumericError, ParamStore};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::causal::ConfounderDictionary;
use crate::corpus::{Corpus, Instance};
use crate::encoder::Vocab;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Epoch (1-based) after which the confounder dictionary is built.
    pub snapshot_epoch: usize,
    /// Rebuild the dictionary every this many epochs after the snapshot;
    /// 0 keeps it frozen.
    pub refresh_every: usize,
    /// Number of sampled parameter coordinates checked against finite
    /// differences before training; 0 disables the check.
    pub self_check_samples: usize,
    pub self_check_tol: f64,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 1.0,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 20,
            dropout: 0.1,
            seed: 0,
            snapshot_epoch: 1,
            refresh_every: 0,
            self_check_samples: 24,
            self_check_tol: 1e-4,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (key, v) in [("train.alpha", self.alpha), ("train.beta", self.beta), ("train.weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{v} must be finite and non-negative")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("train.dropout", "must lie in [0, 1)"));
        }
        if self.snapshot_epoch == 0 {
            return Err(Error::config("train.snapshot_epoch", "must be at least 1"));
        }
        if self.epochs > 0 && self.epochs < self.snapshot_epoch {
            return Err(Error::config(
                "train.snapshot_epoch",
                format!("{} exceeds epochs = {}", self.snapshot_epoch, self.epochs),
            ));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Parameters registered without decay
/// (biases, normalization gains and offsets) are never decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let decay = if store.decays(id) { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= self.lr * (update + decay * p[i]);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Instance-weighted means over the epoch.
    pub loss: f64,
    pub l_k: f64,
    pub l_a: f64,
    pub l_r: f64,
    pub dictionary_built: bool,
}

/// A trained model with the configuration and log that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainingConfig,
    pub log: Vec<EpochLog>,
}

/// Prototypes: for each aspect term, the mean lower-layer feature of the
/// distinct training reviews that mention it.
pub fn build_confounder_dictionary(model: &Model, train: &Corpus, epoch: usize) -> Result<ConfounderDictionary> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut seen = BTreeSet::new();
    let reviews: Vec<&Instance> = train.iter().filter(|i| seen.insert(&i.review)).collect();
    let mut members = Vec::new();
    for chunk in reviews.chunks(64) {
        let feats = model.lower_features(chunk)?;
        for (inst, f) in chunk.iter().zip(feats) {
            let terms: BTreeSet<String> = inst.all_aspects.iter().map(|m| m.term.join(" ")).collect();
            for t in terms {
                members.push((t, f.clone()));
            }
        }
    }
    ConfounderDictionary::from_members(members.iter().map(|(t, f)| (t.clone(), f.as_slice())), model.config.encoder.d, epoch)
}

/// Compares the analytic gradient of the training loss on `insts` with
/// central differences at `samples` coordinates drawn from the run seed.
/// Dropout is off so the loss is deterministic.
pub fn self_check(model: &Model, insts: &[&Instance], cfg: &TrainingConfig, samples: usize) -> Result<(f64, String)> {
    let batch = model.batch(insts)?;
    let loss_of = |store: &ParamStore| -> Result<(Graph, absa_numeric::Var)> {
        let mut g = Graph::new();
        let fwd = model.forward_with(store, &mut g, &batch, 0.0)?;
        let (loss, _) = model.loss(&mut g, &fwd, &batch.labels, cfg.alpha, cfg.beta)?;
        Ok((g, loss))
    };
    let (g, loss) = loss_of(&model.params)?;
    let grads = g.backward(loss)?;

    let mut store = model.params.clone();
    let ids: Vec<_> = store.ids().collect();
    let total = store.scalar_count();
    let mut rng = rng::substream(cfg.seed, "self-check");
    let h = absa_numeric::gradcheck::DEFAULT_STEP;
    let mut worst = (0.0, String::new());
    for _ in 0..samples.min(total) {
        let mut flat = rng.gen_range(0..total);
        let mut id = ids[0];
        for &cand in &ids {
            let n = store.get(cand).len();
            if flat < n {
                id = cand;
                break;
            }
            flat -= n;
        }
        let orig = store.get(id).data()[flat];
        store.get_mut(id).data_mut()[flat] = orig + h;
        let (gp, lp) = loss_of(&store)?;
        store.get_mut(id).data_mut()[flat] = orig - h;
        let (gm, lm) = loss_of(&store)?;
        store.get_mut(id).data_mut()[flat] = orig;
        let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[flat]);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DEFAULT_FLOOR);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("{}[{flat}]", store.name(id)));
        }
    }
    Ok(worst)
}

fn step_error(e: Error, epoch: usize, batch: usize, first_id: &str) -> Error {
    match e {
        Error::Numeric(NumericError::NonFinite { .. }) | Error::Numeric(NumericError::NonFiniteGradient(_)) => {
            Error::NonFiniteLoss {
                epoch,
                batch,
                first_id: first_id.to_string(),
            }
        }
        other => other,
    }
}

/// Trains a model on `train` (whose tokens alone define the vocabulary).
pub fn train(train: &Corpus, cfg: &TrainingConfig) -> Result<Checkpoint> {
    train_with_vocab(train, Vocab::build(train), cfg)
}

pub fn train_with_vocab(train: &Corpus, vocab: Vocab, cfg: &TrainingConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;

    if cfg.self_check_samples > 0 {
        let probe: Vec<&Instance> = train.iter().take(6).collect();
        let (err, location) = self_check(&model, &probe, cfg, cfg.self_check_samples)?;
        if err > cfg.self_check_tol {
            return Err(Error::SelfCheck {
                max_rel_error: err,
                tolerance: cfg.self_check_tol,
                location,
            });
        }
    }

    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut shuffle = rng::substream(cfg.seed, rng::SHUFFLE);
    let dropout_seed = rng::substream_seed(cfg.seed, rng::DROPOUT);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 4];
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let insts: Vec<&Instance> = idx.iter().map(|&i| &train.instances[i]).collect();
            let first = insts[0].id.as_str();
            let batch = model.batch(&insts)?;
            let mut g = Graph::training(rng::child_seed(dropout_seed, step));
            step += 1;
            let result = (|| -> Result<(f64, [f64; 3], Gradients)> {
                let fwd = model.forward(&mut g, &batch, cfg.dropout)?;
                let (loss, parts) = model.loss(&mut g, &fwd, &batch.labels, cfg.alpha, cfg.beta)?;
                let val = |v: Option<absa_numeric::Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
                let comps = [val(parts[0]), val(parts[1]), val(parts[2])];
                let total = g.value(loss).data()[0];
                if !total.is_finite() {
                    return Err(Error::Numeric(NumericError::NonFinite { op: "loss" }));
                }
                Ok((total, comps, g.backward(loss)?))
            })();
            let (total, comps, grads) = result.map_err(|e| step_error(e, epoch, b, first))?;
            let n = insts.len() as f64;
            sums[0] += total * n;
            for k in 0..3 {
                sums[k + 1] += comps[k] * n;
            }
            opt.step(&mut model.params, &grads);
        }
        let n = train.len() as f64;
        let mut built = false;
        if model.config.kind == ModelKind::Full {
            let refresh = cfg.refresh_every > 0
                && epoch > cfg.snapshot_epoch
                && (epoch - cfg.snapshot_epoch).is_multiple_of(cfg.refresh_every);
            if epoch == cfg.snapshot_epoch || refresh {
                model.dictionary = Some(build_confounder_dictionary(&model, train, epoch)?);
                built = true;
            }
        }
        let entry = EpochLog {
            epoch,
            loss: sums[0] / n,
            l_k: sums[1] / n,
            l_a: sums[2] / n,
            l_r: sums[3] / n,
            dictionary_built: built,
        };
        if !entry.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                first_id: train.instances[0].id.clone(),
            });
        }
        log.push(entry);
    }

    round_to_f32(&mut model);
    Ok(Checkpoint {
        model,
        config: cfg.clone(),
        log,
    })
}

/// Rounds every parameter and prototype to the nearest 32-bit value, the
/// precision checkpoints are stored in.
pub fn round_to_f32(model: &mut Model) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v = f64::from(*v as f32);
        }
    }
    if let Some(d) = &mut model.dictionary {
        for v in d.prototypes.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}
