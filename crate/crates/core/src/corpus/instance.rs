use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sentiment class. The discriminant order is the class index used by
/// every model head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Positive and Negative swap; Neutral has no opposite.
    pub fn flipped(self) -> Option<Self> {
        match self {
            Polarity::Positive => Some(Polarity::Negative),
            Polarity::Negative => Some(Polarity::Positive),
            Polarity::Neutral => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which adversarial rule produced an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Original,
    RevTgt,
    RevNon,
    AddDiff,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::Original, Subset::RevTgt, Subset::RevNon, Subset::AddDiff];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Original => "Original",
            Subset::RevTgt => "RevTgt",
            Subset::RevNon => "RevNon",
            Subset::AddDiff => "AddDiff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Some(Subset::Original),
            "revtgt" | "rev_tgt" => Some(Subset::RevTgt),
            "revnon" | "rev_non" => Some(Subset::RevNon),
            "adddiff" | "add_diff" => Some(Subset::AddDiff),
            _ => None,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open token range, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectMention {
    pub term: Vec<String>,
    pub span: Span,
    pub label: Polarity,
}

/// One review/aspect/label triple plus every aspect annotated in the review
/// and the lineage of adversarial variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub source_id: String,
    pub subset: Subset,
    pub review: Vec<String>,
    pub aspect_term: Vec<String>,
    pub aspect_span: Span,
    pub label: Polarity,
    pub all_aspects: Vec<AspectMention>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidInstance {
            id: self.id.clone(),
            reason,
        };
        check_span(&self.review, &self.aspect_term, self.aspect_span).map_err(|r| bad(format!("aspect_span: {r}")))?;
        for m in &self.all_aspects {
            check_span(&self.review, &m.term, m.span).map_err(|r| bad(format!("all_aspects: {r}")))?;
        }
        if !self
            .all_aspects
            .iter()
            .any(|m| m.term == self.aspect_term && m.label == self.label)
        {
            return Err(bad("target (aspect_term, label) missing from all_aspects".into()));
        }
        if (self.subset == Subset::Original) != (self.source_id == self.id) {
            return Err(bad(format!(
                "subset {} inconsistent with source_id `{}`",
                self.subset, self.source_id
            )));
        }
        Ok(())
    }

    /// Position of the target within `all_aspects`.
    pub fn target_index(&self) -> Option<usize> {
        self.all_aspects
            .iter()
            .position(|m| m.span == self.aspect_span && m.term == self.aspect_term)
    }

    pub fn aspect_key(&self) -> String {
        self.aspect_term.join(" ")
    }

    pub fn review_text(&self) -> String {
        self.review.join(" ")
    }
}

fn check_span(review: &[String], term: &[String], span: Span) -> std::result::Result<(), String> {
    if span.start >= span.end || span.end > review.len() {
        return Err(format!(
            "span [{}, {}) out of bounds for {} tokens",
            span.start,
            span.end,
            review.len()
        ));
    }
    if review[span.range()] != *term {
        return Err(format!(
            "review{:?} = {:?} does not match term {:?}",
            [span.start, span.end],
            &review[span.range()],
            term
        ));
    }
    Ok(())
}

/// Lowercases and splits on whitespace, separating punctuation into its own
/// tokens. Apostrophes and hyphens inside words are kept.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner = i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if c.is_ascii_punctuation() && !((c == '\'' || c == '-') && inner) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// An ordered collection of instances.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub instances: Vec<Instance>,
}

impl Corpus {
    pub fn new(instances: Vec<Instance>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instance> {
        self.instances.iter()
    }

    pub fn subset_counts(&self) -> BTreeMap<Subset, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(inst.subset).or_insert(0) += 1;
        }
        counts
    }

    /// Instances keyed by `source_id`, each group in corpus order.
    pub fn groups(&self) -> BTreeMap<&str, Vec<&Instance>> {
        let mut groups: BTreeMap<&str, Vec<&Instance>> = BTreeMap::new();
        for inst in &self.instances {
            groups.entry(inst.source_id.as_str()).or_default().push(inst);
        }
        groups
    }

    pub fn filter_subset(&self, subset: Subset) -> Corpus {
        Corpus::new(self.instances.iter().filter(|i| i.subset == subset).cloned().collect())
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Instance;
    type IntoIter = std::slice::Iter<'a, Instance>;

    fn into_iter(self) -> Self::IntoIter {
        self.instances.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn burgers() -> Instance {
        let review = tokenize_text("Tasty burgers, and crispy fries.");
        Instance {
            id: "s1".into(),
            source_id: "s1".into(),
            subset: Subset::Original,
            aspect_term: vec!["burgers".into()],
            aspect_span: Span::new(1, 2),
            label: Polarity::Positive,
            all_aspects: vec![
                AspectMention {
                    term: vec!["burgers".into()],
                    span: Span::new(1, 2),
                    label: Polarity::Positive,
                },
                AspectMention {
                    term: vec!["fries".into()],
                    span: Span::new(5, 6),
                    label: Polarity::Positive,
                },
            ],
            review,
        }
    }

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize_text("Tasty burgers, and crispy fries."),
            ["tasty", "burgers", ",", "and", "crispy", "fries", "."]
        );
        assert_eq!(tokenize_text("It's  well-made!"), ["it's", "well-made", "!"]);
        assert!(tokenize_text("   ").is_empty());
    }

    #[test]
    fn valid_instance_passes() {
        burgers().validate().unwrap();
    }

    #[test]
    fn span_out_of_bounds_is_rejected() {
        let mut inst = burgers();
        inst.aspect_span = Span::new(6, 9);
        assert!(matches!(inst.validate(), Err(Error::InvalidInstance { .. })));
    }

    #[test]
    fn span_term_mismatch_is_rejected() {
        let mut inst = burgers();
        inst.aspect_span = Span::new(0, 1);
        assert!(inst.validate().is_err());
    }

    #[test]
    fn target_must_be_listed() {
        let mut inst = burgers();
        inst.all_aspects[0].label = Polarity::Negative;
        assert!(inst.validate().is_err());
    }

    #[test]
    fn original_iff_self_sourced() {
        let mut inst = burgers();
        inst.source_id = "other".into();
        assert!(inst.validate().is_err());
        inst.subset = Subset::RevTgt;
        inst.validate().unwrap();
        inst.source_id = inst.id.clone();
        assert!(inst.validate().is_err());
    }

    #[test]
    fn json_shape_matches_interchange_schema() {
        let v = serde_json::to_value(burgers()).unwrap();
        assert_eq!(v["aspect_span"], serde_json::json!([1, 2]));
        assert_eq!(v["label"], "positive");
        assert_eq!(v["subset"], "Original");
        assert_eq!(v["all_aspects"][1]["span"], serde_json::json!([5, 6]));
    }
}
