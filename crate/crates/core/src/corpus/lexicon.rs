use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Polarity;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectNoun {
    pub term: String,
    #[serde(default)]
    pub domain: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AspectEntry {
    Bare(String),
    Tagged(AspectNoun),
}

#[derive(Deserialize)]
struct LexiconFile {
    positive: Vec<String>,
    negative: Vec<String>,
    #[serde(default)]
    antonyms: BTreeMap<String, String>,
    #[serde(default)]
    aspects: Vec<AspectEntry>,
}

/// Polarity-tagged adjectives, their antonym pairing and a list of aspect
/// nouns.
///
/// The antonym map is stored symmetrically; a file may list each pair in
/// one direction only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentimentLexicon {
    positive: Vec<String>,
    negative: Vec<String>,
    antonyms: BTreeMap<String, String>,
    aspects: Vec<AspectNoun>,
}

impl SentimentLexicon {
    pub fn new(
        positive: Vec<String>,
        negative: Vec<String>,
        pairs: impl IntoIterator<Item = (String, String)>,
        aspects: Vec<AspectNoun>,
    ) -> Result<Self> {
        let pos: BTreeSet<&str> = positive.iter().map(String::as_str).collect();
        if let Some(w) = negative.iter().find(|w| pos.contains(w.as_str())) {
            return Err(Error::config("lexicon", format!("`{w}` is listed as both positive and negative")));
        }
        let mut antonyms = BTreeMap::new();
        for (a, b) in pairs {
            if a == b {
                return Err(Error::config("lexicon.antonyms", format!("`{a}` is its own antonym")));
            }
            for (x, y) in [(&a, &b), (&b, &a)] {
                if let Some(prev) = antonyms.insert(x.clone(), y.clone()) {
                    if prev != *y {
                        return Err(Error::config(
                            "lexicon.antonyms",
                            format!("`{x}` paired with both `{prev}` and `{y}`"),
                        ));
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        for a in &aspects {
            if a.term.split_whitespace().next().is_none() {
                return Err(Error::config("lexicon.aspects", "empty aspect term"));
            }
            if !seen.insert(a.term.as_str()) {
                return Err(Error::config("lexicon.aspects", format!("duplicate aspect `{}`", a.term)));
            }
        }
        Ok(Self {
            positive,
            negative,
            antonyms,
            aspects,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: LexiconFile = serde_json::from_str(text)?;
        let aspects = f
            .aspects
            .into_iter()
            .map(|e| match e {
                AspectEntry::Bare(term) => AspectNoun {
                    term,
                    domain: String::new(),
                },
                AspectEntry::Tagged(a) => a,
            })
            .collect();
        Self::new(f.positive, f.negative, f.antonyms, aspects)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        // One direction per pair keeps the file minimal; loading symmetrizes.
        let pairs: BTreeMap<&str, &str> = self
            .antonyms
            .iter()
            .filter(|(a, b)| a < b)
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        serde_json::json!({
            "positive": self.positive,
            "negative": self.negative,
            "antonyms": pairs,
            "aspects": self.aspects,
        })
    }

    pub fn adjectives(&self, polarity: Polarity) -> &[String] {
        match polarity {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
            Polarity::Neutral => &[],
        }
    }

    pub fn polarity_of(&self, word: &str) -> Option<Polarity> {
        if self.positive.iter().any(|w| w == word) {
            Some(Polarity::Positive)
        } else if self.negative.iter().any(|w| w == word) {
            Some(Polarity::Negative)
        } else {
            None
        }
    }

    pub fn is_adjective(&self, word: &str) -> bool {
        self.polarity_of(word).is_some() || self.antonyms.contains_key(word)
    }

    pub fn antonym(&self, word: &str) -> Option<&str> {
        self.antonyms.get(word).map(String::as_str)
    }

    pub fn aspects(&self) -> &[AspectNoun] {
        &self.aspects
    }

    pub fn domain_of(&self, term: &[String]) -> Option<&str> {
        let joined = term.join(" ");
        self.aspects
            .iter()
            .find(|a| a.term == joined)
            .map(|a| a.domain.as_str())
    }

    /// A small restaurant/laptop lexicon sufficient for the synthetic
    /// generator and the adversarial rules.
    pub fn builtin() -> Self {
        const PAIRS: &[(&str, &str)] = &[
            ("tasty", "terrible"),
            ("crispy", "soggy"),
            ("finest", "poorest"),
            ("attentive", "heedless"),
            ("delicious", "bland"),
            ("fresh", "stale"),
            ("friendly", "rude"),
            ("great", "awful"),
            ("excellent", "dreadful"),
            ("cozy", "cramped"),
            ("cheap", "overpriced"),
            ("fast", "slow"),
            ("quiet", "noisy"),
            ("clean", "dirty"),
            ("reliable", "flaky"),
            ("sharp", "blurry"),
            ("sturdy", "flimsy"),
            ("lovely", "nasty"),
        ];
        const ASPECTS: &[(&str, &str)] = &[
            ("burgers", "restaurant"),
            ("fries", "restaurant"),
            ("service", "restaurant"),
            ("staff", "restaurant"),
            ("pizza", "restaurant"),
            ("sushi", "restaurant"),
            ("pasta", "restaurant"),
            ("dessert", "restaurant"),
            ("wine", "restaurant"),
            ("coffee", "restaurant"),
            ("decor", "restaurant"),
            ("waiter", "restaurant"),
            ("menu", "restaurant"),
            ("salad", "restaurant"),
            ("steak", "restaurant"),
            ("bread", "restaurant"),
            ("soup", "restaurant"),
            ("noodles", "restaurant"),
            ("music", "restaurant"),
            ("patio", "restaurant"),
            ("screen", "laptop"),
            ("keyboard", "laptop"),
            ("battery", "laptop"),
            ("trackpad", "laptop"),
            ("speakers", "laptop"),
            ("charger", "laptop"),
            ("webcam", "laptop"),
            ("hinge", "laptop"),
            ("processor", "laptop"),
            ("display", "laptop"),
            ("fan", "laptop"),
            ("case", "laptop"),
        ];
        let positive = PAIRS.iter().map(|(p, _)| p.to_string()).collect();
        let negative = PAIRS.iter().map(|(_, n)| n.to_string()).collect();
        let pairs = PAIRS.iter().map(|(p, n)| (p.to_string(), n.to_string()));
        let aspects = ASPECTS
            .iter()
            .map(|(t, d)| AspectNoun {
                term: t.to_string(),
                domain: d.to_string(),
            })
            .collect();
        Self::new(positive, negative, pairs, aspects).expect("builtin lexicon is consistent")
    }
}
