//! Run configuration as a flat document of dotted keys.
//!
//! Values are resolved in increasing precedence: built-in defaults, a
//! `key = value` file (with `#` comments), `ABSA_*` environment variables
//! and finally `--set key=value` flags. Unknown keys are rejected at every
//! layer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use absa_core::causal::{FusionStrategy, InferenceMode};
use absa_core::corpus::{BiasConfig, SentimentLexicon};
use absa_core::encoder::Pooling;
use absa_core::model::{ModelKind, CLASSES};
use absa_core::training::TrainingConfig;
use absa_core::{Error, Result};

/// Prefix of environment overrides: `train.lr` is read from `ABSA_TRAIN_LR`.
pub const ENV_PREFIX: &str = "ABSA_";

/// Every key with a one-line description, in reference order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed; split into corpus, init, dropout and shuffle substreams"),
    ("corpus.n_sources", "original reviews to generate"),
    ("corpus.n_aspects", "aspect nouns in use (taken from the lexicon in order)"),
    ("corpus.aspects_per_review", "aspect mentions per generated review"),
    ("corpus.p_aspect_label", "probability a target carries its aspect's preferred polarity"),
    ("corpus.p_context_agree", "probability each non-target agrees with the target"),
    ("corpus.lexicon", "sentiment lexicon JSON file, or `builtin`"),
    ("model.kind", "model variant: full, fused-only, aspect-probe or review-probe"),
    ("model.d", "hidden width"),
    ("model.layers", "encoder layers per branch"),
    ("model.heads", "attention heads"),
    ("model.pooling", "sequence pooling: cls or mean"),
    ("model.lower_tap_layer", "1-based layer feeding the confounder features"),
    ("model.max_len", "maximum input length in tokens, specials included"),
    ("model.fusion", "branch fusion: SUM-Vanilla, SUM-sigmoid, SUM-tanh, MUL-Vanilla, MUL-sigmoid or MUL-tanh"),
    ("head.groups", "feature groups of the normalized review head; must divide model.d"),
    ("head.tau", "logit scale of the normalized review head"),
    ("head.eps", "weight-norm guard of the normalized review head"),
    ("void.c_a", "aspect-branch logits used when the aspect is set void (3 comma-separated values)"),
    ("void.c_r", "review-branch void logits"),
    ("void.c_k", "fused-branch void logits"),
    ("train.alpha", "weight of the aspect-branch loss"),
    ("train.beta", "weight of the review-branch loss"),
    ("train.lr", "AdamW learning rate"),
    ("train.weight_decay", "decoupled weight decay (weights only)"),
    ("train.batch_size", "instances per step"),
    ("train.epochs", "passes over the training split"),
    ("train.dropout", "dropout probability"),
    ("train.snapshot_epoch", "epoch after which the confounder dictionary is built"),
    ("train.refresh_every", "rebuild the dictionary every N epochs after the snapshot (0 = frozen)"),
    ("train.self_check_samples", "coordinates checked against finite differences before training (0 = off)"),
    ("train.self_check_tol", "maximum relative error of the startup gradient check"),
    ("eval.modes", "comma-separated inference modes among tie, te, literal"),
    ("experiment.seeds", "seeds of multi-seed experiments (ablate-fusion, debias, probe)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_sources: usize,
    pub n_aspects: usize,
    pub aspects_per_review: usize,
    pub p_aspect_label: f64,
    pub p_context_agree: f64,
    /// `None` selects the built-in lexicon.
    pub lexicon: Option<PathBuf>,
    pub train: TrainingConfig,
    pub eval_modes: Vec<InferenceMode>,
    pub experiment_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bias = BiasConfig::default();
        Self {
            seed: 0,
            n_sources: bias.n_sources,
            n_aspects: bias.n_aspects,
            aspects_per_review: bias.aspects_per_review,
            p_aspect_label: bias.p_aspect_label,
            p_context_agree: bias.p_context_agree,
            lexicon: None,
            train: TrainingConfig::default(),
            eval_modes: vec![InferenceMode::Te, InferenceMode::Tie],
            experiment_seeds: 3,
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(key, format!("cannot parse `{value}`")))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = value.split(',').map(|s| num(key, s)).collect::<Result<_>>()?;
    if v.len() != CLASSES {
        return Err(bad(key, format!("expected {CLASSES} values, got {}", v.len())));
    }
    Ok(v)
}

fn show_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Current value of `key`, rendered as it would be written in a file.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &t.model;
        let e = &m.encoder;
        Some(match key {
            "seed" => self.seed.to_string(),
            "corpus.n_sources" => self.n_sources.to_string(),
            "corpus.n_aspects" => self.n_aspects.to_string(),
            "corpus.aspects_per_review" => self.aspects_per_review.to_string(),
            "corpus.p_aspect_label" => self.p_aspect_label.to_string(),
            "corpus.p_context_agree" => self.p_context_agree.to_string(),
            "corpus.lexicon" => self
                .lexicon
                .as_ref()
                .map_or_else(|| "builtin".to_string(), |p| p.display().to_string()),
            "model.kind" => m.kind.name().to_string(),
            "model.d" => e.d.to_string(),
            "model.layers" => e.n_layers.to_string(),
            "model.heads" => e.n_heads.to_string(),
            "model.pooling" => match e.pooling {
                Pooling::Cls => "cls".into(),
                Pooling::Mean => "mean".into(),
            },
            "model.lower_tap_layer" => e.lower_tap_layer.to_string(),
            "model.max_len" => e.max_len.to_string(),
            "model.fusion" => m.fusion.name().to_string(),
            "head.groups" => m.head.groups.to_string(),
            "head.tau" => m.head.tau.to_string(),
            "head.eps" => m.head.eps.to_string(),
            "void.c_a" => show_list(&m.voids.c_a),
            "void.c_r" => show_list(&m.voids.c_r),
            "void.c_k" => show_list(&m.voids.c_k),
            "train.alpha" => t.alpha.to_string(),
            "train.beta" => t.beta.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.dropout" => t.dropout.to_string(),
            "train.snapshot_epoch" => t.snapshot_epoch.to_string(),
            "train.refresh_every" => t.refresh_every.to_string(),
            "train.self_check_samples" => t.self_check_samples.to_string(),
            "train.self_check_tol" => t.self_check_tol.to_string(),
            "eval.modes" => self.eval_modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            "experiment.seeds" => self.experiment_seeds.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let m = &mut t.model;
        let e = &mut m.encoder;
        match key {
            "seed" => self.seed = num(key, value)?,
            "corpus.n_sources" => self.n_sources = num(key, value)?,
            "corpus.n_aspects" => self.n_aspects = num(key, value)?,
            "corpus.aspects_per_review" => self.aspects_per_review = num(key, value)?,
            "corpus.p_aspect_label" => self.p_aspect_label = num(key, value)?,
            "corpus.p_context_agree" => self.p_context_agree = num(key, value)?,
            "corpus.lexicon" => {
                self.lexicon = (!value.eq_ignore_ascii_case("builtin")).then(|| PathBuf::from(value));
            }
            "model.kind" => m.kind = ModelKind::parse(value).ok_or_else(|| bad(key, format!("unknown kind `{value}`")))?,
            "model.d" => e.d = num(key, value)?,
            "model.layers" => e.n_layers = num(key, value)?,
            "model.heads" => e.n_heads = num(key, value)?,
            "model.pooling" => {
                e.pooling = match value.to_ascii_lowercase().as_str() {
                    "cls" => Pooling::Cls,
                    "mean" => Pooling::Mean,
                    _ => return Err(bad(key, format!("unknown pooling `{value}`"))),
                }
            }
            "model.lower_tap_layer" => e.lower_tap_layer = num(key, value)?,
            "model.max_len" => e.max_len = num(key, value)?,
            "model.fusion" => {
                m.fusion = FusionStrategy::parse(value).ok_or_else(|| bad(key, format!("unknown strategy `{value}`")))?
            }
            "head.groups" => m.head.groups = num(key, value)?,
            "head.tau" => m.head.tau = num(key, value)?,
            "head.eps" => m.head.eps = num(key, value)?,
            "void.c_a" => m.voids.c_a = list(key, value)?,
            "void.c_r" => m.voids.c_r = list(key, value)?,
            "void.c_k" => m.voids.c_k = list(key, value)?,
            "train.alpha" => t.alpha = num(key, value)?,
            "train.beta" => t.beta = num(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.dropout" => t.dropout = num(key, value)?,
            "train.snapshot_epoch" => t.snapshot_epoch = num(key, value)?,
            "train.refresh_every" => t.refresh_every = num(key, value)?,
            "train.self_check_samples" => t.self_check_samples = num(key, value)?,
            "train.self_check_tol" => t.self_check_tol = num(key, value)?,
            "eval.modes" => {
                let modes = value
                    .split(',')
                    .map(|s| InferenceMode::parse(s.trim()).ok_or_else(|| bad(key, format!("unknown mode `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if modes.is_empty() {
                    return Err(bad(key, "at least one mode is required"));
                }
                self.eval_modes = modes;
            }
            "experiment.seeds" => self.experiment_seeds = num(key, value)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key = value` document. Blank lines and text after `#`
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: n + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Applies `ABSA_*` variables. A variable that names no key is an
    /// error.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let by_env: BTreeMap<String, &str> = KEYS.iter().map(|(k, _)| (env_name(k), *k)).collect();
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = by_env
                    .get(&name)
                    .ok_or_else(|| bad(&format!("{ENV_PREFIX}{rest}"), "environment variable names no key"))?;
                self.set(key, &value)?;
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| bad(o, "override must look like key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then file, then environment, then overrides.
    pub fn resolve<I>(file: Option<&Path>, env: I, overrides: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_env(env)?;
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training_config().validate()?;
        if self.experiment_seeds == 0 {
            return Err(bad("experiment.seeds", "must be positive"));
        }
        Ok(())
    }

    /// All keys and their current values.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("every listed key has a value")))
            .collect()
    }

    /// The resolved document, loadable with [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn bias_config(&self) -> Result<BiasConfig> {
        let lexicon = match &self.lexicon {
            Some(p) => SentimentLexicon::load(p)?,
            None => SentimentLexicon::builtin(),
        };
        let cfg = BiasConfig {
            n_sources: self.n_sources,
            n_aspects: self.n_aspects,
            aspects_per_review: self.aspects_per_review,
            p_aspect_label: self.p_aspect_label,
            p_context_agree: self.p_context_agree,
            lexicon,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training configuration carrying the run seed.
    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Markdown reference of every key with its default.
    pub fn reference() -> String {
        let d = Self::default();
        let mut out = String::from(
            "# Configuration keys\n\nPrecedence: `--set key=value` > `ABSA_*` environment > `--config` file > default.\n\
             The environment name of a key is `ABSA_` followed by the key upper-cased with dots replaced by underscores.\n\n\
             | key | default | environment | description |\n|---|---|---|---|\n",
        );
        for (k, doc) in KEYS {
            let _ = writeln!(out, "| `{k}` | `{}` | `{}` | {doc} |", d.get(k).expect("listed key"), env_name(k));
        }
        out
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}
