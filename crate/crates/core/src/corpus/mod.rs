//! Instances, ingestion, the synthetic biased-corpus generator, adversarial
//! rewrites and bias statistics.

mod bias;
mod instance;
mod io;
mod lexicon;
mod synth;
mod transform;

pub use bias::{analyze_bias, BiasReport};
pub use instance::{tokenize_text, AspectMention, Corpus, Instance, Polarity, Span, Subset};
pub use io::{load_dataset, parse_arts_txt, parse_jsonl, to_jsonl, Format};
pub use lexicon::{AspectNoun, SentimentLexicon};
pub use synth::{generate_synthetic_corpus, BiasConfig, SyntheticCorpus, DEV_FRACTION, TRAIN_FRACTION};
pub use transform::{add_diff, rev_non, rev_tgt};
