use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{add_diff, rev_non, rev_tgt, AspectMention, Corpus, Instance, Polarity, SentimentLexicon, Span, Subset};
use crate::{rng, Error, Result};

/// Fractions of sources assigned to train and dev; the rest is test.
pub const TRAIN_FRACTION: f64 = 0.7;
pub const DEV_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BiasConfig {
    pub n_sources: usize,
    pub n_aspects: usize,
    pub aspects_per_review: usize,
    /// Probability that a target carries its aspect's preferred polarity.
    pub p_aspect_label: f64,
    /// Probability that each non-target agrees with the target.
    pub p_context_agree: f64,
    pub lexicon: SentimentLexicon,
    pub seed: u64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            n_sources: 2000,
            n_aspects: 16,
            aspects_per_review: 2,
            p_aspect_label: 0.9,
            p_context_agree: 0.9,
            lexicon: SentimentLexicon::builtin(),
            seed: 0,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("corpus.p_aspect_label", self.p_aspect_label), ("corpus.p_context_agree", self.p_context_agree)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("{p} is not a probability")));
            }
        }
        if self.n_sources == 0 {
            return Err(Error::config("corpus.n_sources", "must be positive"));
        }
        if self.aspects_per_review < 2 {
            return Err(Error::config("corpus.aspects_per_review", "must be at least 2"));
        }
        if self.aspects_per_review > self.n_aspects {
            return Err(Error::config(
                "corpus.aspects_per_review",
                format!("{} exceeds n_aspects = {}", self.aspects_per_review, self.n_aspects),
            ));
        }
        if self.n_aspects > self.lexicon.aspects().len() {
            return Err(Error::config(
                "corpus.n_aspects",
                format!("lexicon lists only {} aspect nouns", self.lexicon.aspects().len()),
            ));
        }
        for pol in [Polarity::Positive, Polarity::Negative] {
            if reversible(&self.lexicon, pol).is_empty() {
                return Err(Error::config("corpus.lexicon", format!("no {pol} adjective with an antonym")));
            }
        }
        Ok(())
    }
}

fn reversible(lex: &SentimentLexicon, pol: Polarity) -> Vec<&String> {
    lex.adjectives(pol).iter().filter(|w| lex.antonym(w).is_some()).collect()
}

/// Generated splits. `test` holds each test original followed by its
/// RevTgt, RevNon and AddDiff variants; `anti` holds fresh originals whose
/// targets carry the opposite of their aspect's preferred polarity with
/// probability `p_aspect_label`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub anti: Corpus,
    /// Preferred polarity of each aspect noun in use, in lexicon order.
    pub preferred: Vec<(String, Polarity)>,
}

struct Generator<'a> {
    cfg: &'a BiasConfig,
    nouns: Vec<Vec<String>>,
    preferred: Vec<Polarity>,
    positive: Vec<&'a String>,
    negative: Vec<&'a String>,
}

impl Generator<'_> {
    fn original(&self, rng: &mut ChaCha8Rng, id: String, anti: bool) -> Instance {
        let cfg = self.cfg;
        let chosen = sample(rng, self.nouns.len(), cfg.aspects_per_review).into_vec();
        let target = rng.gen_range(0..chosen.len());
        let mut pref = self.preferred[chosen[target]];
        if anti {
            pref = flip(pref);
        }
        let target_label = if rng.gen_bool(cfg.p_aspect_label) { pref } else { flip(pref) };

        let mut review: Vec<String> = Vec::new();
        let mut mentions = Vec::with_capacity(chosen.len());
        for (j, &n) in chosen.iter().enumerate() {
            let label = if j == target || rng.gen_bool(cfg.p_context_agree) {
                target_label
            } else {
                flip(target_label)
            };
            let adjectives = if label == Polarity::Positive { &self.positive } else { &self.negative };
            let adj = adjectives[rng.gen_range(0..adjectives.len())];
            if let Some(prev) = mentions.last().map(|m: &AspectMention| m.label) {
                review.push(",".into());
                review.push(if prev == label { "and" } else { "but" }.into());
            }
            review.push(adj.clone());
            let start = review.len();
            review.extend(self.nouns[n].iter().cloned());
            mentions.push(AspectMention {
                term: self.nouns[n].clone(),
                span: Span::new(start, review.len()),
                label,
            });
        }
        review.push(".".into());
        let t = &mentions[target];
        Instance {
            source_id: id.clone(),
            id,
            subset: Subset::Original,
            aspect_term: t.term.clone(),
            aspect_span: t.span,
            label: t.label,
            review,
            all_aspects: mentions,
        }
    }
}

fn flip(p: Polarity) -> Polarity {
    p.flipped().unwrap_or(p)
}

/// Templated multi-aspect reviews with controllable aspect→label and
/// context→label correlations. A pure function of `cfg`.
pub fn generate_synthetic_corpus(cfg: &BiasConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = rng::substream(cfg.seed, rng::CORPUS);
    let used = &cfg.lexicon.aspects()[..cfg.n_aspects];
    let nouns: Vec<Vec<String>> = used
        .iter()
        .map(|a| a.term.split_whitespace().map(str::to_string).collect())
        .collect();
    let mut preferred: Vec<Polarity> = (0..nouns.len())
        .map(|i| if i < nouns.len().div_ceil(2) { Polarity::Positive } else { Polarity::Negative })
        .collect();
    preferred.shuffle(&mut rng);

    let gen = Generator {
        cfg,
        nouns,
        preferred,
        positive: reversible(&cfg.lexicon, Polarity::Positive),
        negative: reversible(&cfg.lexicon, Polarity::Negative),
    };
    // Variants draw distractor nouns only from the nouns in use so that
    // they stay inside the training vocabulary.
    let active = SentimentLexicon::new(
        cfg.lexicon.adjectives(Polarity::Positive).to_vec(),
        cfg.lexicon.adjectives(Polarity::Negative).to_vec(),
        cfg.lexicon
            .adjectives(Polarity::Positive)
            .iter()
            .filter_map(|w| cfg.lexicon.antonym(w).map(|a| (w.clone(), a.to_string()))),
        used.to_vec(),
    )?;

    let n_train = ((cfg.n_sources as f64) * TRAIN_FRACTION).round() as usize;
    let n_dev = ((cfg.n_sources as f64) * DEV_FRACTION).round() as usize;
    let n_dev = n_dev.min(cfg.n_sources - n_train);
    let width = cfg.n_sources.to_string().len().max(4);

    let mut train = Vec::with_capacity(n_train);
    let mut dev = Vec::with_capacity(n_dev);
    let mut test = Vec::new();
    for i in 0..cfg.n_sources {
        let inst = gen.original(&mut rng, format!("src-{i:0width$}"), false);
        if i < n_train {
            train.push(inst);
        } else if i < n_train + n_dev {
            dev.push(inst);
        } else {
            // A rule that does not apply to this review is skipped; with
            // the templated reviews that only happens when every noun in
            // use is already present (AddDiff).
            let variants = [rev_tgt(&inst, &active), rev_non(&inst, &active), add_diff(&inst, &active, 1)];
            test.push(inst);
            test.extend(variants.into_iter().filter_map(Result::ok));
        }
    }
    let n_test = cfg.n_sources - n_train - n_dev;
    let anti = (0..n_test)
        .map(|i| gen.original(&mut rng, format!("anti-{i:0width$}"), true))
        .collect();

    Ok(SyntheticCorpus {
        train: Corpus::new(train),
        dev: Corpus::new(dev),
        test: Corpus::new(test),
        anti: Corpus::new(anti),
        preferred: used.iter().map(|a| a.term.clone()).zip(gen.preferred).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> BiasConfig {
        BiasConfig {
            n_sources: 50,
            n_aspects: 6,
            aspects_per_review: 3,
            seed,
            ..BiasConfig::default()
        }
    }

    #[test]
    fn splits_have_expected_sizes() {
        let c = generate_synthetic_corpus(&small(1)).unwrap();
        assert_eq!(c.train.len(), 35);
        assert_eq!(c.dev.len(), 5);
        assert_eq!(c.test.filter_subset(Subset::Original).len(), 10);
        assert_eq!(c.test.len(), 40);
        assert_eq!(c.anti.len(), 10);
        for inst in c.train.iter().chain(&c.dev).chain(&c.test).chain(&c.anti) {
            inst.validate().unwrap();
        }
    }

    #[test]
    fn config_violations_name_the_key() {
        let mut cfg = small(0);
        cfg.aspects_per_review = 7;
        match generate_synthetic_corpus(&cfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "corpus.aspects_per_review"),
            other => panic!("unexpected {other:?}"),
        }
        cfg = small(0);
        cfg.p_context_agree = 1.5;
        assert!(generate_synthetic_corpus(&cfg).is_err());
    }

    #[test]
    fn preferred_polarities_are_balanced() {
        let c = generate_synthetic_corpus(&small(3)).unwrap();
        let pos = c.preferred.iter().filter(|(_, p)| *p == Polarity::Positive).count();
        assert_eq!(pos, 3);
    }
}
