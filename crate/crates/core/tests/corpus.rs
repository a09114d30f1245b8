use std::collections::BTreeMap;

use absa_core::corpus::*;
use absa_core::Error;
use proptest::prelude::*;

fn mention(review: &[String], term: &str, label: Polarity) -> AspectMention {
    let pos = review.iter().position(|w| w == term).unwrap();
    AspectMention {
        term: vec![term.to_string()],
        span: Span::new(pos, pos + 1),
        label,
    }
}

fn instance(id: &str, text: &str, aspects: &[(&str, Polarity)], target: usize) -> Instance {
    let review = tokenize_text(text);
    let all_aspects: Vec<_> = aspects.iter().map(|(t, l)| mention(&review, t, *l)).collect();
    let t = all_aspects[target].clone();
    Instance {
        id: id.into(),
        source_id: id.into(),
        subset: Subset::Original,
        review,
        aspect_term: t.term,
        aspect_span: t.span,
        label: t.label,
        all_aspects,
    }
}

fn burgers() -> Instance {
    instance(
        "s1",
        "Tasty burgers, and crispy fries.",
        &[("burgers", Polarity::Positive), ("fries", Polarity::Positive)],
        0,
    )
}

#[test]
fn table7_rev_tgt() {
    let lex = SentimentLexicon::builtin();
    let out = rev_tgt(&burgers(), &lex).unwrap();
    assert_eq!(out.review_text(), "terrible burgers , but crispy fries .");
    assert_eq!(out.label, Polarity::Negative);
    assert_eq!(out.subset, Subset::RevTgt);
    assert_eq!(out.source_id, "s1");
    out.validate().unwrap();
}

#[test]
fn table7_rev_non() {
    let lex = SentimentLexicon::builtin();
    let out = rev_non(&burgers(), &lex).unwrap();
    assert_eq!(out.review_text(), "tasty burgers , but soggy fries .");
    assert_eq!(out.label, Polarity::Positive);
    assert_eq!(out.all_aspects[1].label, Polarity::Negative);
    assert_eq!(out.subset, Subset::RevNon);
    out.validate().unwrap();
}

#[test]
fn table7_add_diff() {
    let lex = SentimentLexicon::from_json(
        r#"{"positive":["tasty","crispy"],"negative":["poorest"],
            "antonyms":{"tasty":"terrible"},
            "aspects":["burgers","fries","service"]}"#,
    )
    .unwrap();
    let inst = instance(
        "s2",
        "tasty burgers , crispy fries",
        &[("burgers", Polarity::Positive), ("fries", Polarity::Positive)],
        0,
    );
    let out = add_diff(&inst, &lex, 1).unwrap();
    assert_eq!(out.review_text(), "tasty burgers , crispy fries , but poorest service ever !");
    assert_eq!(out.label, Polarity::Positive);
    assert_eq!(out.all_aspects.len(), 3);
    assert_eq!(out.all_aspects[2].label, Polarity::Negative);
    assert_eq!(out.subset, Subset::AddDiff);
    out.validate().unwrap();

    assert!(matches!(add_diff(&inst, &lex, 0), Err(Error::Transform { .. })));
    assert!(matches!(add_diff(&inst, &lex, 2), Err(Error::Transform { .. })));
}

#[test]
fn rev_non_requires_a_non_target() {
    let lex = SentimentLexicon::builtin();
    let single = instance("s3", "tasty burgers .", &[("burgers", Polarity::Positive)], 0);
    assert!(matches!(rev_non(&single, &lex), Err(Error::Transform { .. })));
}

#[test]
fn template_rev_tgt_matches_hand_applied_rule() {
    let lex = SentimentLexicon::builtin();
    let cfg = BiasConfig {
        n_sources: 30,
        n_aspects: 8,
        aspects_per_review: 3,
        seed: 11,
        ..BiasConfig::default()
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let inst = &corpus.train.instances[0];

    // Hand application: template is "adj noun , conn adj noun , conn adj noun ."
    // so the adjective sits right before the noun and the connective before
    // clause j is token 4j - 1.
    let mut expected = inst.review.clone();
    let t = inst.aspect_span.start;
    expected[t - 1] = lex.antonym(&inst.review[t - 1]).unwrap().to_string();
    let mut labels: Vec<Polarity> = inst.all_aspects.iter().map(|m| m.label).collect();
    let ti = inst.target_index().unwrap();
    labels[ti] = inst.label.flipped().unwrap();
    for j in [ti, ti + 1] {
        if j >= 1 && j < labels.len() {
            expected[4 * j - 1] = if labels[j] == labels[j - 1] { "and" } else { "but" }.to_string();
        }
    }
    let out = rev_tgt(inst, &lex).unwrap();
    assert_eq!(out.review, expected);
}

#[test]
fn synthetic_corpus_is_seed_deterministic() {
    let cfg = BiasConfig {
        n_sources: 200,
        seed: 5,
        ..BiasConfig::default()
    };
    let a = generate_synthetic_corpus(&cfg).unwrap();
    let b = generate_synthetic_corpus(&cfg).unwrap();
    for (x, y) in [(&a.train, &b.train), (&a.test, &b.test), (&a.anti, &b.anti)] {
        assert_eq!(to_jsonl(x).as_bytes(), to_jsonl(y).as_bytes());
    }
    let c = generate_synthetic_corpus(&BiasConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(to_jsonl(&a.train), to_jsonl(&c.train));
}

#[test]
fn forced_correlations_give_unit_fractions() {
    let cfg = BiasConfig {
        n_sources: 300,
        p_aspect_label: 1.0,
        p_context_agree: 1.0,
        seed: 2,
        ..BiasConfig::default()
    };
    let c = generate_synthetic_corpus(&cfg).unwrap();
    let r = analyze_bias(&c.train).unwrap();
    assert_eq!(r.single_polarity_fraction, 1.0);
    assert_eq!(r.all_same_fraction, 1.0);

    // Every anti-split target carries the opposite of its preference.
    let pref: BTreeMap<_, _> = c.preferred.iter().cloned().collect();
    for inst in &c.anti {
        assert_eq!(inst.label, pref[&inst.aspect_key()].flipped().unwrap());
    }
}

#[test]
fn two_single_aspect_positives_give_one_one() {
    let a = instance("a", "tasty burgers .", &[("burgers", Polarity::Positive)], 0);
    let b = instance("b", "crispy fries .", &[("fries", Polarity::Positive)], 0);
    let r = analyze_bias(&Corpus::new(vec![a, b])).unwrap();
    assert_eq!((r.single_polarity_fraction, r.all_same_fraction), (1.0, 1.0));
    assert!(matches!(analyze_bias(&Corpus::default()), Err(Error::Empty(_))));
}

#[test]
fn bias_fractions_match_brute_force_recount() {
    let cfg = BiasConfig {
        n_sources: 400,
        p_aspect_label: 0.7,
        p_context_agree: 0.6,
        aspects_per_review: 3,
        seed: 9,
        ..BiasConfig::default()
    };
    let c = generate_synthetic_corpus(&cfg).unwrap();
    for corpus in [&c.train, &c.test] {
        let r = analyze_bias(corpus).unwrap();
        let terms: Vec<String> = {
            let mut t: Vec<_> = corpus.iter().map(|i| i.aspect_term.join(" ")).collect();
            t.sort();
            t.dedup();
            t
        };
        let single = terms
            .iter()
            .filter(|t| {
                let labels: Vec<_> = corpus
                    .iter()
                    .filter(|i| i.aspect_term.join(" ") == **t)
                    .map(|i| i.label)
                    .collect();
                labels.iter().all(|l| *l == labels[0])
            })
            .count();
        let same = corpus
            .iter()
            .filter(|i| {
                let first = i.all_aspects[0].label;
                i.all_aspects.iter().all(|m| m.label == first)
            })
            .count();
        assert_eq!(r.single_polarity_fraction, single as f64 / terms.len() as f64);
        assert_eq!(r.all_same_fraction, same as f64 / corpus.len() as f64);
    }
}

#[test]
fn test_split_variants_keep_lineage() {
    let c = generate_synthetic_corpus(&BiasConfig {
        n_sources: 100,
        seed: 4,
        ..BiasConfig::default()
    })
    .unwrap();
    let groups = c.test.groups();
    assert_eq!(groups.len(), c.test.filter_subset(Subset::Original).len());
    for (src, members) in groups {
        assert_eq!(members[0].id, src);
        assert_eq!(members[0].subset, Subset::Original);
        for m in &members[1..] {
            assert_ne!(m.subset, Subset::Original);
            m.validate().unwrap();
        }
    }
}

#[test]
fn jsonl_round_trip_through_file() {
    let c = generate_synthetic_corpus(&BiasConfig {
        n_sources: 40,
        seed: 1,
        ..BiasConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    std::fs::write(&path, to_jsonl(&c.test)).unwrap();
    let back = load_dataset(&path, Format::Jsonl).unwrap();
    assert_eq!(back, c.test);
    assert!(matches!(
        load_dataset(&dir.path().join("missing.jsonl"), Format::Jsonl),
        Err(Error::Io { .. })
    ));
}

fn synthetic_instances(seed: u64, per_review: usize) -> Vec<Instance> {
    generate_synthetic_corpus(&BiasConfig {
        n_sources: 20,
        n_aspects: 10,
        aspects_per_review: per_review,
        p_aspect_label: 0.5,
        p_context_agree: 0.5,
        seed,
        ..BiasConfig::default()
    })
    .unwrap()
    .train
    .instances
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rev_tgt_is_an_involution(seed in 0u64..1000, per_review in 2usize..5) {
        let lex = SentimentLexicon::builtin();
        for inst in synthetic_instances(seed, per_review) {
            let once = rev_tgt(&inst, &lex).unwrap();
            prop_assert_eq!(once.label, inst.label.flipped().unwrap());
            once.validate().unwrap();
            let twice = rev_tgt(&once, &lex).unwrap();
            prop_assert_eq!(&twice.review, &inst.review);
            prop_assert_eq!(twice.label, inst.label);
            prop_assert_eq!(&twice.source_id, &inst.source_id);
        }
    }

    #[test]
    fn rev_non_and_add_diff_keep_the_target_label(seed in 0u64..1000, per_review in 2usize..5, k in 1usize..4) {
        let lex = SentimentLexicon::builtin();
        for inst in synthetic_instances(seed, per_review) {
            let non = rev_non(&inst, &lex).unwrap();
            prop_assert_eq!(non.label, inst.label);
            prop_assert_eq!(&non.source_id, &inst.source_id);
            non.validate().unwrap();
            for (a, b) in non.all_aspects.iter().zip(&inst.all_aspects) {
                if a.span != inst.aspect_span {
                    prop_assert_eq!(Some(a.label), b.label.flipped());
                }
            }

            let diff = add_diff(&inst, &lex, k).unwrap();
            prop_assert_eq!(diff.label, inst.label);
            prop_assert_eq!(diff.all_aspects.len(), inst.all_aspects.len() + k);
            prop_assert_eq!(&diff.source_id, &inst.source_id);
            diff.validate().unwrap();
            for m in &diff.all_aspects[inst.all_aspects.len()..] {
                prop_assert_ne!(m.label, inst.label);
            }
            let line = to_jsonl(&Corpus::new(vec![diff.clone()]));
            prop_assert_eq!(parse_jsonl(&line).unwrap().instances[0].clone(), diff);
        }
    }
}
