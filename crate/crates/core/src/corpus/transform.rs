//! Adversarial rewrites of an instance: reverse the target's sentiment,
//! reverse every non-target's sentiment, or append opposite-polarity
//! distractor aspects.
//!
//! All three work token-for-token on clause structure. A clause is a
//! maximal run of tokens between boundaries (punctuation, "and", "but");
//! the sentiment word of an aspect is the lexicon adjective in its clause
//! nearest to the aspect span.

use std::collections::BTreeSet;

use super::{AspectMention, Instance, Polarity, SentimentLexicon, Span, Subset};
use crate::rng::fnv1a;
use crate::{Error, Result};

const BOUNDARIES: &[&str] = &[",", ".", "!", "?", ";", ":", "and", "but"];
const CONNECTIVES: &[&str] = &["and", "but"];
const TERMINALS: &[&str] = &[".", "!", "?"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Clause {
    start: usize,
    end: usize,
    /// Index of the "and"/"but" token directly before the clause.
    connective: Option<usize>,
}

fn clauses(review: &[String]) -> Vec<Clause> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < review.len() {
        if BOUNDARIES.contains(&review[i].as_str()) {
            i += 1;
            continue;
        }
        let start = i;
        while i < review.len() && !BOUNDARIES.contains(&review[i].as_str()) {
            i += 1;
        }
        let connective = (start > 0 && CONNECTIVES.contains(&review[start - 1].as_str())).then(|| start - 1);
        out.push(Clause { start, end: i, connective });
    }
    out
}

fn clause_of(clauses: &[Clause], pos: usize) -> Option<usize> {
    clauses.iter().position(|c| c.start <= pos && pos < c.end)
}

/// Nearest lexicon adjective to `span` inside its clause; ties go to the
/// earlier token.
fn find_adjective(review: &[String], lex: &SentimentLexicon, clauses: &[Clause], span: Span) -> Option<usize> {
    let c = clauses[clause_of(clauses, span.start)?];
    (c.start..c.end)
        .filter(|i| !span.range().contains(i) && lex.is_adjective(&review[*i]))
        .min_by_key(|&i| (if i < span.start { span.start - i } else { i + 1 - span.end }, i))
}

fn clause_polarity(clauses: &[Clause], mentions: &[AspectMention], c: usize) -> Option<Polarity> {
    mentions
        .iter()
        .find(|m| clause_of(clauses, m.span.start) == Some(c))
        .map(|m| m.label)
}

/// Sets the connective before each changed clause, and before the clause
/// following it, to "but" when the two neighbouring clauses now disagree
/// and to "and" when they agree.
fn rewrite_connectives(review: &mut [String], mentions: &[AspectMention], changed: &BTreeSet<usize>) {
    let cl = clauses(review);
    let targets: BTreeSet<usize> = changed.iter().flat_map(|&c| [c, c + 1]).collect();
    for c in targets {
        if c == 0 || c >= cl.len() {
            continue;
        }
        let Some(conn) = cl[c].connective else { continue };
        if let (Some(prev), Some(cur)) = (
            clause_polarity(&cl, mentions, c - 1),
            clause_polarity(&cl, mentions, c),
        ) {
            review[conn] = if prev == cur { "and" } else { "but" }.to_string();
        }
    }
}

fn target_position(inst: &Instance) -> Result<usize> {
    inst.target_index().ok_or_else(|| Error::InvalidInstance {
        id: inst.id.clone(),
        reason: "target span not listed in all_aspects".into(),
    })
}

fn transform_err(inst: &Instance, reason: impl Into<String>) -> Error {
    Error::Transform {
        id: inst.id.clone(),
        reason: reason.into(),
    }
}

fn variant(inst: &Instance, subset: Subset, suffix: &str) -> Instance {
    Instance {
        id: format!("{}:{suffix}", inst.id),
        source_id: inst.source_id.clone(),
        subset,
        ..inst.clone()
    }
}

/// Replaces the target's adjective by its antonym and flips the label.
pub fn rev_tgt(inst: &Instance, lex: &SentimentLexicon) -> Result<Instance> {
    let flipped = inst
        .label
        .flipped()
        .ok_or_else(|| transform_err(inst, "neutral target has no reversed polarity"))?;
    let t = target_position(inst)?;
    let cl = clauses(&inst.review);
    let adj = find_adjective(&inst.review, lex, &cl, inst.aspect_span)
        .ok_or_else(|| transform_err(inst, "no lexicon adjective found for the target"))?;
    let word = &inst.review[adj];
    let antonym = lex
        .antonym(word)
        .ok_or_else(|| transform_err(inst, format!("adjective `{word}` has no antonym in the lexicon")))?;

    let mut out = variant(inst, Subset::RevTgt, "revtgt");
    out.review[adj] = antonym.to_string();
    out.label = flipped;
    for (j, m) in out.all_aspects.iter_mut().enumerate() {
        let shares = j != t && find_adjective(&inst.review, lex, &cl, m.span) == Some(adj);
        if j == t {
            m.label = flipped;
        } else if shares {
            if let Some(f) = m.label.flipped() {
                m.label = f;
            }
        }
    }
    let changed = clause_of(&cl, adj).into_iter().collect();
    rewrite_connectives(&mut out.review, &out.all_aspects, &changed);
    Ok(out)
}

/// Replaces the adjective of every non-target aspect by its antonym. The
/// target label is untouched.
pub fn rev_non(inst: &Instance, lex: &SentimentLexicon) -> Result<Instance> {
    let t = target_position(inst)?;
    if inst.all_aspects.len() < 2 {
        return Err(transform_err(inst, "no non-target aspects"));
    }
    let cl = clauses(&inst.review);
    let target_adj = find_adjective(&inst.review, lex, &cl, inst.aspect_span);
    let mut out = variant(inst, Subset::RevNon, "revnon");
    let mut replaced = BTreeSet::new();
    for j in 0..inst.all_aspects.len() {
        let m = &inst.all_aspects[j];
        let Some(flipped) = m.label.flipped() else { continue };
        if j == t {
            continue;
        }
        let Some(adj) = find_adjective(&inst.review, lex, &cl, m.span) else { continue };
        if Some(adj) == target_adj {
            continue;
        }
        let Some(antonym) = lex.antonym(&inst.review[adj]) else { continue };
        if replaced.insert(adj) {
            out.review[adj] = antonym.to_string();
        }
        out.all_aspects[j].label = flipped;
    }
    if replaced.is_empty() {
        return Err(transform_err(inst, "no non-target adjective is covered by the lexicon"));
    }
    let changed = replaced.iter().filter_map(|&i| clause_of(&cl, i)).collect();
    rewrite_connectives(&mut out.review, &out.all_aspects, &changed);
    Ok(out)
}

/// Appends a clause introducing `k` unused aspects whose polarity differs
/// from the target's, e.g. "..., but poorest service ever !".
///
/// Aspect nouns and adjectives are picked deterministically from the
/// instance id; nouns from the target's domain are preferred when the
/// lexicon has enough of them.
pub fn add_diff(inst: &Instance, lex: &SentimentLexicon, k: usize) -> Result<Instance> {
    if k == 0 {
        return Err(transform_err(inst, "k must be at least 1"));
    }
    let polarity = match inst.label {
        Polarity::Positive => Polarity::Negative,
        Polarity::Negative | Polarity::Neutral => Polarity::Positive,
    };
    let used: BTreeSet<&str> = inst
        .review
        .iter()
        .map(String::as_str)
        .chain(inst.all_aspects.iter().flat_map(|m| m.term.iter().map(String::as_str)))
        .collect();
    let unused: Vec<_> = lex
        .aspects()
        .iter()
        .filter(|a| a.term.split_whitespace().all(|w| !used.contains(w)))
        .collect();
    let domain = lex.domain_of(&inst.aspect_term).filter(|d| !d.is_empty());
    let same_domain: Vec<_> = unused.iter().copied().filter(|a| Some(a.domain.as_str()) == domain).collect();
    let pool = if same_domain.len() >= k { same_domain } else { unused };
    if pool.len() < k {
        return Err(transform_err(
            inst,
            format!("lexicon has {} unused aspect nouns, {k} needed", pool.len()),
        ));
    }
    let adjectives = lex.adjectives(polarity);
    if adjectives.is_empty() {
        return Err(transform_err(inst, format!("lexicon has no {polarity} adjectives")));
    }

    let h = fnv1a(inst.id.as_bytes());
    let noun_start = (h % pool.len() as u64) as usize;
    let adj_start = ((h >> 32) % adjectives.len() as u64) as usize;
    let mut out = variant(inst, Subset::AddDiff, "adddiff");
    while out.review.last().is_some_and(|w| TERMINALS.contains(&w.as_str())) {
        out.review.pop();
    }
    if out.all_aspects.iter().any(|m| m.span.end > out.review.len()) {
        return Err(transform_err(inst, "an aspect overlaps the trailing punctuation"));
    }
    for j in 0..k {
        let noun = pool[(noun_start + j) % pool.len()];
        let adj = &adjectives[(adj_start + j) % adjectives.len()];
        out.review.push(",".into());
        out.review.push(if j == 0 { "but" } else { "and" }.into());
        out.review.push(adj.clone());
        let term: Vec<String> = noun.term.split_whitespace().map(str::to_string).collect();
        let start = out.review.len();
        out.review.extend(term.iter().cloned());
        out.all_aspects.push(AspectMention {
            term,
            span: Span::new(start, out.review.len()),
            label: polarity,
        });
    }
    out.review.push("ever".into());
    out.review.push("!".into());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tokenize_text;
    use super::*;

    fn inst(text: &str, mentions: &[(&str, Polarity)], target: usize) -> Instance {
        let review = tokenize_text(text);
        let all_aspects: Vec<AspectMention> = mentions
            .iter()
            .map(|(t, l)| {
                let pos = review.iter().position(|w| w == t).unwrap();
                AspectMention {
                    term: vec![t.to_string()],
                    span: Span::new(pos, pos + 1),
                    label: *l,
                }
            })
            .collect();
        let tgt = all_aspects[target].clone();
        Instance {
            id: "x".into(),
            source_id: "x".into(),
            subset: Subset::Original,
            review,
            aspect_term: tgt.term,
            aspect_span: tgt.span,
            label: tgt.label,
            all_aspects,
        }
    }

    use Polarity::*;

    #[test]
    fn clause_split() {
        let r = tokenize_text("tasty burgers , and crispy fries .");
        let c = clauses(&r);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].start, c[0].end, c[0].connective), (0, 2, None));
        assert_eq!((c[1].start, c[1].end, c[1].connective), (4, 6, Some(3)));
    }

    #[test]
    fn adjective_after_the_noun_is_found() {
        let lex = SentimentLexicon::builtin();
        let i = inst("the fries were soggy .", &[("fries", Negative)], 0);
        let out = rev_tgt(&i, &lex).unwrap();
        assert_eq!(out.review_text(), "the fries were crispy .");
        assert_eq!(out.label, Positive);
    }

    #[test]
    fn neutral_target_is_refused() {
        let lex = SentimentLexicon::builtin();
        let i = inst("tasty burgers .", &[("burgers", Neutral)], 0);
        assert!(matches!(rev_tgt(&i, &lex), Err(Error::Transform { .. })));
    }

    #[test]
    fn unknown_adjective_is_refused() {
        let lex = SentimentLexicon::builtin();
        let i = inst("weird burgers .", &[("burgers", Positive)], 0);
        assert!(rev_tgt(&i, &lex).is_err());
    }

    #[test]
    fn rev_non_keeps_shared_target_adjective() {
        let lex = SentimentLexicon::builtin();
        let i = inst(
            "tasty burgers , and crispy fries , and fresh salad .",
            &[("burgers", Positive), ("fries", Positive), ("salad", Positive)],
            1,
        );
        let out = rev_non(&i, &lex).unwrap();
        assert_eq!(out.review_text(), "terrible burgers , but crispy fries , but stale salad .");
        assert_eq!(out.label, Positive);
        let labels: Vec<_> = out.all_aspects.iter().map(|m| m.label).collect();
        assert_eq!(labels, [Negative, Positive, Negative]);
    }

    #[test]
    fn add_diff_prefers_target_domain() {
        let lex = SentimentLexicon::builtin();
        let i = inst("great battery .", &[("battery", Positive)], 0);
        let out = add_diff(&i, &lex, 2).unwrap();
        for m in &out.all_aspects[1..] {
            assert_eq!(lex.domain_of(&m.term), Some("laptop"));
            assert_eq!(m.label, Negative);
        }
        assert_eq!(out.review.last().map(String::as_str), Some("!"));
    }
}
