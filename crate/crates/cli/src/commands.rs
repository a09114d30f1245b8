//! Subcommand implementations behind the `absa` binary.

use std::fs;
use std::path::{Path, PathBuf};

use absa_core::causal::InferenceMode;
use absa_core::checkpoint;
use absa_core::corpus::{analyze_bias, generate_synthetic_corpus, load_dataset, to_jsonl, Corpus, Format};
use absa_core::encoder::Branch;
use absa_core::evaluation::evaluate;
use absa_core::training::train;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::experiments::{
    ablate_fusion, debias_experiment, fusion_csv, probe_csv, probe_experiment, synthetic_splits, Splits,
};

#[derive(Parser, Debug)]
#[command(name = "absa", about = "Causally debiased aspect sentiment classification at toy scale")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataFormat {
    Jsonl,
    Arts,
}

impl From<DataFormat> for Format {
    fn from(f: DataFormat) -> Self {
        match f {
            DataFormat::Jsonl => Format::Jsonl,
            DataFormat::Arts => Format::ArtsTxt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tie,
    Te,
    Literal,
}

impl From<ModeArg> for InferenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Tie => InferenceMode::Tie,
            ModeArg::Te => InferenceMode::Te,
            ModeArg::Literal => InferenceMode::Literal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Aspect,
    Review,
    Both,
}

/// Labeled data on disk: a directory with `train.jsonl`, `test.jsonl` and
/// optionally `anti.jsonl`. Without it the synthetic corpus of each seed
/// is generated from the configuration.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus as JSONL splits plus a manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: DataFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes `<out>.json` and `<out>.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: DataFormat,
        /// Inference mode; repeatable. Defaults to the `eval.modes` key.
        #[arg(long, value_enum)]
        mode: Vec<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train single-branch probes and tabulate per-subset accuracy.
    Probe {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "both")]
        branch: BranchArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all six fusion strategies; writes a CSV.
    AblateFusion {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the debiased three-branch model with the fused-only
    /// baseline on synthetic corpora; writes a JSON report.
    Debias {
        #[arg(long)]
        out: PathBuf,
    },
    /// Report aspect-label and context-label bias statistics.
    AnalyzeBias {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: DataFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the configuration reference, or the resolved configuration
    /// with `--resolved`.
    Config {
        #[arg(long)]
        resolved: bool,
    },
}

/// Parses `args`, resolves the configuration against `env` and runs the
/// subcommand.
pub fn run<I, T>(args: I, env: Vec<(String, String)>) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args)?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), env, &set_flags(&args))?;
    execute(&cli.command, &cfg)
}

/// Every `--set` value in command-line order. Clap keeps only the
/// occurrences on one side of the subcommand for global arguments, so they
/// are collected from the raw (already validated) arguments instead.
fn set_flags(args: &[std::ffi::OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter().skip(1).map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--set" {
            out.extend(it.next().map(|v| v.into_owned()));
        } else if let Some(v) = a.strip_prefix("--set=") {
            out.push(v.to_string());
        }
    }
    out
}

fn provenance(cfg: &RunConfig, inputs: Value) -> Value {
    json!({ "config": cfg.to_map(), "seed": cfg.seed, "inputs": inputs })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn load(path: &Path, format: DataFormat) -> Result<Corpus> {
    Ok(load_dataset(path, format.into())?)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.experiment_seeds as u64).map(|i| cfg.seed + i).collect()
}

fn splits_for(cfg: &RunConfig, data: &DataArgs) -> Result<Vec<(u64, Splits)>> {
    match &data.data {
        Some(dir) => {
            let anti = dir.join("anti.jsonl");
            let shared = Splits {
                train: load(&dir.join("train.jsonl"), DataFormat::Jsonl)?,
                test: load(&dir.join("test.jsonl"), DataFormat::Jsonl)?,
                anti: if anti.exists() { Some(load(&anti, DataFormat::Jsonl)?) } else { None },
            };
            let s = seeds(cfg);
            let mut out = Vec::with_capacity(s.len());
            for seed in s {
                out.push((
                    seed,
                    Splits {
                        train: shared.train.clone(),
                        test: shared.test.clone(),
                        anti: shared.anti.clone(),
                    },
                ));
            }
            Ok(out)
        }
        None => {
            let bias = cfg.bias_config()?;
            seeds(cfg).into_iter().map(|s| Ok((s, synthetic_splits(&bias, s)?))).collect()
        }
    }
}

pub fn execute(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::GenCorpus { out } => {
            let syn = generate_synthetic_corpus(&cfg.bias_config()?)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            for (name, c) in [("train", &syn.train), ("dev", &syn.dev), ("test", &syn.test), ("anti", &syn.anti)] {
                write(&out.join(format!("{name}.jsonl")), to_jsonl(c))?;
            }
            let preferred: Vec<Value> = syn
                .preferred
                .iter()
                .map(|(t, p)| json!({"aspect": t, "polarity": p}))
                .collect();
            let mut manifest = provenance(cfg, Value::Null);
            manifest["counts"] = json!({
                "train": syn.train.len(), "dev": syn.dev.len(), "test": syn.test.len(), "anti": syn.anti.len()
            });
            manifest["preferred"] = Value::Array(preferred);
            write_json(&out.join("manifest.json"), &manifest)?;
            eprintln!("wrote {} train / {} test instances to {}", syn.train.len(), syn.test.len(), out.display());
        }
        Command::Train { train: path, format, out } => {
            let data = load(path, *format)?;
            let tc = cfg.training_config();
            let ckpt = train(&data, &tc)?;
            for e in &ckpt.log {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  l_k {:.5}  l_a {:.5}  l_r {:.5}{}",
                    e.epoch,
                    e.loss,
                    e.l_k,
                    e.l_a,
                    e.l_r,
                    if e.dictionary_built { "  [dictionary]" } else { "" }
                );
            }
            checkpoint::save(&ckpt, out, provenance(cfg, json!({ "train": path })))?;
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::Eval {
            checkpoint: dir,
            test,
            format,
            mode,
            out,
        } => {
            let (ckpt, _) = checkpoint::load(dir)?;
            let data = load(test, *format)?;
            let modes: Vec<InferenceMode> = if mode.is_empty() {
                cfg.eval_modes.clone()
            } else {
                mode.iter().map(|&m| m.into()).collect()
            };
            let report = evaluate(&ckpt, &data, &modes)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                let mut doc = provenance(cfg, json!({ "checkpoint": dir, "test": test }));
                doc["report"] = serde_json::to_value(&report)?;
                write_json(&with_extension(out, "json"), &doc)?;
                let mut csv = report.to_csv();
                for (k, v) in cfg.to_map() {
                    csv.push_str(&format!("config,{k},{v},\n"));
                }
                write(&with_extension(out, "csv"), csv)?;
            }
        }
        Command::Probe { data, branch, out } => {
            let branches = match branch {
                BranchArg::Aspect => vec![Branch::AspectOnly],
                BranchArg::Review => vec![Branch::ReviewOnly],
                BranchArg::Both => vec![Branch::AspectOnly, Branch::ReviewOnly],
            };
            let rows = probe_experiment(&splits_for(cfg, data)?, &branches, &cfg.training_config())?;
            let csv = probe_csv(&rows);
            print!("{csv}");
            write(out, &csv)?;
            let mut doc = provenance(cfg, json!({ "data": data.data }));
            doc["rows"] = serde_json::to_value(&rows)?;
            write_json(&with_extension(out, "json"), &doc)?;
        }
        Command::AblateFusion { data, out } => {
            let rows = ablate_fusion(&splits_for(cfg, data)?, &cfg.training_config())?;
            let csv = fusion_csv(&rows);
            print!("{csv}");
            write(out, &csv)?;
            let mut doc = provenance(cfg, json!({ "data": data.data }));
            doc["rows"] = serde_json::to_value(&rows)?;
            write_json(&with_extension(out, "json"), &doc)?;
        }
        Command::Debias { out } => {
            let report = debias_experiment(&cfg.bias_config()?, &cfg.training_config(), &seeds(cfg))?;
            eprintln!(
                "mean anti-split gain {:+.2}, Original change {:+.2}",
                report.anti_gain, report.original_change
            );
            let mut doc = provenance(cfg, Value::Null);
            doc["report"] = serde_json::to_value(&report)?;
            write_json(out, &doc)?;
        }
        Command::AnalyzeBias { data, format, out } => {
            let report = analyze_bias(&load(data, *format)?)?;
            let mut doc = provenance(cfg, json!({ "data": data }));
            doc["report"] = serde_json::to_value(&report)?;
            let text = serde_json::to_string_pretty(&doc)?;
            match out {
                Some(p) => write(p, text + "\n")?,
                None => println!("{text}"),
            }
        }
        Command::Config { resolved } => {
            if *resolved {
                print!("{}", cfg.to_text());
            } else {
                print!("{}", RunConfig::reference());
            }
        }
    }
    Ok(())
}

/// Exit status of a failed run: 2 for usage and configuration errors, 1
/// otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<clap::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<absa_core::Error>() {
        Some(absa_core::Error::Config { .. }) => 2,
        _ => 1,
    }
}
