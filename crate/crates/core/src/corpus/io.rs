use std::collections::HashMap;
use std::path::Path;

use super::{tokenize_text, AspectMention, Corpus, Instance, Polarity, Span, Subset};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    /// Three lines per instance: the sentence with the aspect replaced by
    /// `$T$`, the aspect, and the polarity (`1`/`0`/`-1` or a word). An
    /// optional `# id=.. source=.. subset=..` line before a block sets the
    /// lineage; without it every block is its own Original.
    ArtsTxt,
}

impl Format {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Some(Format::Jsonl),
            "arts-txt" | "arts_txt" | "txt" => Some(Format::ArtsTxt),
            _ => None,
        }
    }
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Jsonl => parse_jsonl(&text),
        Format::ArtsTxt => parse_arts_txt(&text),
    }
}

/// Reorders instances so that each source group is contiguous, groups in
/// order of first appearance.
fn group_by_source(instances: Vec<Instance>) -> Corpus {
    let mut order: HashMap<String, usize> = HashMap::new();
    for inst in &instances {
        let n = order.len();
        order.entry(inst.source_id.clone()).or_insert(n);
    }
    let mut keyed: Vec<(usize, Instance)> = instances.into_iter().map(|i| (order[&i.source_id], i)).collect();
    keyed.sort_by_key(|(k, _)| *k);
    Corpus::new(keyed.into_iter().map(|(_, i)| i).collect())
}

pub fn parse_jsonl(text: &str) -> Result<Corpus> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::NoInstances);
    }
    Ok(group_by_source(out))
}

pub fn to_jsonl(corpus: &Corpus) -> String {
    let mut s = String::new();
    for inst in corpus {
        s.push_str(&serde_json::to_string(inst).expect("instances serialize"));
        s.push('\n');
    }
    s
}

fn parse_polarity(s: &str) -> Option<Polarity> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "positive" => Some(Polarity::Positive),
        "-1" | "negative" => Some(Polarity::Negative),
        "0" | "neutral" => Some(Polarity::Neutral),
        _ => None,
    }
}

struct Directive {
    id: Option<String>,
    source: Option<String>,
    subset: Option<Subset>,
}

fn parse_directive(line: &str, line_no: usize) -> Result<Directive> {
    let mut d = Directive {
        id: None,
        source: None,
        subset: None,
    };
    for field in line.trim_start_matches('#').split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected key=value, found `{field}`"),
        })?;
        match k {
            "id" => d.id = Some(v.to_string()),
            "source" => d.source = Some(v.to_string()),
            "subset" => {
                d.subset = Some(Subset::parse(v).ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("unknown subset `{v}`"),
                })?)
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown directive key `{k}`"),
                })
            }
        }
    }
    Ok(d)
}

/// Parses the three-line `$T$` format. Blocks that share a sentence are
/// merged so that every instance lists all aspects annotated in it.
pub fn parse_arts_txt(text: &str) -> Result<Corpus> {
    let mut instances = Vec::new();
    let mut pending: Option<Directive> = None;
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') && block.is_empty() {
            pending = Some(parse_directive(line, line_no)?);
            continue;
        }
        block.push((line_no, line));
        if block.len() < 3 {
            continue;
        }
        let (l0, sentence) = block[0];
        let (_, aspect) = block[1];
        let (l2, pol) = block[2];
        block.clear();
        let (left, right) = sentence.split_once("$T$").ok_or_else(|| Error::Parse {
            line: l0,
            message: "sentence lacks the $T$ placeholder".into(),
        })?;
        let label = parse_polarity(pol).ok_or_else(|| Error::Parse {
            line: l2,
            message: format!("unknown polarity `{pol}`"),
        })?;
        let term = tokenize_text(aspect);
        if term.is_empty() {
            return Err(Error::Parse {
                line: l0 + 1,
                message: "empty aspect".into(),
            });
        }
        let mut review = tokenize_text(left);
        let span = Span::new(review.len(), review.len() + term.len());
        review.extend(term.iter().cloned());
        review.extend(tokenize_text(&right.replace("$T$", aspect)));

        let d = pending.take().unwrap_or(Directive {
            id: None,
            source: None,
            subset: None,
        });
        let id = d.id.unwrap_or_else(|| format!("line{l0}"));
        let subset = d.subset.unwrap_or(Subset::Original);
        let source_id = d.source.unwrap_or_else(|| id.clone());
        instances.push(Instance {
            all_aspects: vec![AspectMention {
                term: term.clone(),
                span,
                label,
            }],
            id,
            source_id,
            subset,
            review,
            aspect_term: term,
            aspect_span: span,
            label,
        });
    }
    if let Some(&(line, _)) = block.first() {
        return Err(Error::Parse {
            line,
            message: "incomplete block: expected sentence, aspect and polarity lines".into(),
        });
    }
    if instances.is_empty() {
        return Err(Error::NoInstances);
    }
    merge_mentions(&mut instances);
    for inst in &instances {
        inst.validate()?;
    }
    Ok(group_by_source(instances))
}

fn merge_mentions(instances: &mut [Instance]) {
    let mut by_review: HashMap<Vec<String>, Vec<AspectMention>> = HashMap::new();
    for inst in instances.iter() {
        let entry = by_review.entry(inst.review.clone()).or_default();
        for m in &inst.all_aspects {
            if !entry.iter().any(|e| e.span == m.span) {
                entry.push(m.clone());
            }
        }
    }
    for inst in instances.iter_mut() {
        let mut all = by_review[&inst.review].clone();
        all.sort_by_key(|m| m.span);
        inst.all_aspects = all;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_reports_no_instances() {
        assert!(matches!(parse_jsonl(""), Err(Error::NoInstances)));
        assert!(matches!(parse_jsonl("\n  \n"), Err(Error::NoInstances)));
        assert_eq!(parse_jsonl("").unwrap_err().to_string(), "parse error: no instances");
        assert!(matches!(parse_arts_txt(""), Err(Error::NoInstances)));
    }

    #[test]
    fn schema_violation_names_line() {
        let good = r#"{"id":"a","source_id":"a","subset":"Original","review":["good","food"],"aspect_term":["food"],"aspect_span":[1,2],"label":"positive","all_aspects":[{"term":["food"],"span":[1,2],"label":"positive"}]}"#;
        let missing = r#"{"id":"b","source_id":"b","subset":"Original","review":["x"]}"#;
        let bad_span = good.replace("[1,2],\"label\":\"positive\",\"all", "[1,3],\"label\":\"positive\",\"all");
        let e = parse_jsonl(&format!("{good}\n{missing}\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_jsonl(&format!("{good}\n\n{bad_span}\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn arts_txt_blocks_merge_aspects() {
        let text = "\
$T$ is great , but the staff was rude .
food
1
food is great , but the $T$ was rude .
staff
-1
# id=v1 source=line1 subset=revtgt
$T$ is awful , and the staff was rude .
food
negative
";
        let c = parse_arts_txt(text).unwrap();
        assert_eq!(c.len(), 3);
        let first = &c.instances[0];
        assert_eq!(first.id, "line1");
        assert_eq!(first.all_aspects.len(), 2);
        assert_eq!(first.all_aspects[1].label, Polarity::Negative);
        assert_eq!(c.instances[1].source_id, "line1");
        assert_eq!(c.instances[1].subset, Subset::RevTgt);
        assert_eq!(c.subset_counts()[&Subset::Original], 2);
    }

    #[test]
    fn incomplete_arts_block_is_an_error() {
        assert!(matches!(parse_arts_txt("$T$ ok\nfood\n"), Err(Error::Parse { line: 1, .. })));
    }
}
