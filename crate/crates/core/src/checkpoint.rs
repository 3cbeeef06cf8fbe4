//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so loading reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, ParamStore};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelLayout, ModelParams};

pub const FORMAT: &str = "mtl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Blob {
    format: String,
    version: u32,
    layout: ModelLayout,
    vocab: Vec<String>,
    params: Vec<Param>,
}

pub fn to_json(model: &ModelParams) -> Result<String> {
    let blob = Blob {
        format: FORMAT.into(),
        version: VERSION,
        layout: model.layout.clone(),
        vocab: model.vocab.tokens().to_vec(),
        params: model.store.iter().map(|(_, p)| p.clone()).collect(),
    };
    Ok(serde_json::to_string(&blob)?)
}

fn from_blob(blob: Blob) -> Result<ModelParams> {
    if blob.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint (format {:?})",
            blob.format
        )));
    }
    if blob.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            blob.version
        )));
    }
    let mut store = ParamStore::new();
    for p in blob.params {
        store
            .add(p.name.clone(), p.shape, p.values)
            .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))?;
    }
    if blob.vocab.len() != blob.layout.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, layout expects {}",
            blob.vocab.len(),
            blob.layout.config.vocab_size
        )));
    }
    let emb = store.get(blob.layout.encoder.embeddings);
    if emb.shape.rows != blob.vocab.len() {
        return Err(Error::Checkpoint(
            "embedding table does not match the vocabulary".into(),
        ));
    }
    Ok(ModelParams {
        layout: blob.layout,
        store,
        vocab: Vocab::from_tokens(blob.vocab),
    })
}

pub fn from_json(s: &str) -> Result<ModelParams> {
    from_blob(serde_json::from_str(s)?)
}

pub fn save(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_json(model)?.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    from_blob(serde_json::from_reader(BufReader::new(file))?)
}
