//! On-disk checkpoints: a directory with `manifest.json` (configuration,
//! vocabulary, parameter layout, dictionary metadata, training log) and
//! `params.bin`, every parameter and prototype as little-endian f32 in
//! manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use absa_numeric::Tensor;
use serde::{Deserialize, Serialize};

use crate::causal::ConfounderDictionary;
use crate::encoder::Vocab;
use crate::model::Model;
use crate::training::{Checkpoint, EpochLog, TrainingConfig};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "absa-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct DictionaryEntry {
    terms: Vec<String>,
    member_counts: Vec<usize>,
    snapshot_epoch: usize,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    config: TrainingConfig,
    vocab: Vocab,
    params: Vec<TensorEntry>,
    dictionary: Option<DictionaryEntry>,
    log: Vec<EpochLog>,
    /// Free-form provenance supplied by the caller (e.g. the resolved run
    /// configuration).
    #[serde(default)]
    extra: serde_json::Value,
}

fn push_f32(blob: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(blob: &[u8], offset: usize, shape: &[usize], what: &str) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let bytes = blob
        .get(offset * 4..(offset + n) * 4)
        .ok_or_else(|| Error::Checkpoint(format!("{BLOB} too short for `{what}`")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Writes `ckpt` to the directory `dir`, replacing any previous checkpoint
/// there. Files are staged in a sibling directory and moved into place so
/// an interrupted save never leaves a half-written checkpoint. Values are
/// stored as f32; trained checkpoints are already rounded, so they round
/// trip exactly.
pub fn save(ckpt: &Checkpoint, dir: &Path, extra: serde_json::Value) -> Result<()> {
    let model = &ckpt.model;
    let mut blob = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for id in model.params.ids() {
        let t = model.params.get(id);
        params.push(TensorEntry {
            name: model.params.name(id).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += t.len();
        push_f32(&mut blob, t);
    }
    let dictionary = model.dictionary.as_ref().map(|d| {
        push_f32(&mut blob, &d.prototypes);
        DictionaryEntry {
            terms: d.terms.clone(),
            member_counts: d.member_counts.clone(),
            snapshot_epoch: d.snapshot_epoch,
            shape: d.prototypes.shape().to_vec(),
            offset,
        }
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: ckpt.config.seed,
        config: ckpt.config.clone(),
        vocab: model.vocab.clone(),
        params,
        dictionary,
        log: ckpt.log.clone(),
        extra,
    };
    let json = serde_json::to_string_pretty(&manifest)?;

    let staging = sibling(dir, "staging");
    let old = sibling(dir, "old");
    for p in [&staging, &old] {
        if p.exists() {
            fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    fs::write(staging.join(MANIFEST), json).map_err(|e| Error::io(staging.join(MANIFEST), e))?;
    fs::write(staging.join(BLOB), blob).map_err(|e| Error::io(staging.join(BLOB), e))?;
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map_or_else(|| "checkpoint".into(), |n| n.to_string_lossy().into_owned());
    dir.with_file_name(format!(".{name}.{tag}"))
}

/// Loads a checkpoint written by [`save`], returning it with the caller's
/// provenance value.
pub fn load(dir: &Path) -> Result<(Checkpoint, serde_json::Value)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut model = Model::new(m.config.model.clone(), m.vocab, m.seed)?;
    let expected: Vec<_> = model.params.ids().collect();
    if expected.len() != m.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} stored tensors, model layout has {}",
            m.params.len(),
            expected.len()
        )));
    }
    for (id, entry) in expected.into_iter().zip(&m.params) {
        if model.params.name(id) != entry.name || model.params.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("layout mismatch at `{}`", entry.name)));
        }
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {} for `{}`", entry.dtype, entry.name)));
        }
        *model.params.get_mut(id) = read_f32(&blob, entry.offset, &entry.shape, &entry.name)?;
    }
    if let Some(d) = m.dictionary {
        if d.shape.len() != 2 || d.shape[0] != d.terms.len() || d.terms.len() != d.member_counts.len() {
            return Err(Error::Checkpoint("inconsistent dictionary metadata".into()));
        }
        model.dictionary = Some(ConfounderDictionary {
            prototypes: read_f32(&blob, d.offset, &d.shape, "dictionary")?,
            terms: d.terms,
            member_counts: d.member_counts,
            snapshot_epoch: d.snapshot_epoch,
        });
    }
    Ok((
        Checkpoint {
            model,
            config: m.config,
            log: m.log,
        },
        m.extra,
    ))
}
