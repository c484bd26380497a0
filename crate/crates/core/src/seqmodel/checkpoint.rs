use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SeqModel};
use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, TensorRecord};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "dualvla-model";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
    config_hash: String,
    config: ModelConfig,
    prefix: String,
}

/// Header line, then one JSON tensor record per model parameter.
pub fn write_checkpoint<S: Scalar>(mut out: impl Write, model: &SeqModel, store: &ParamStore<S>) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: CHECKPOINT_FORMAT_VERSION,
        scalar: S::NAME.into(),
        config_hash: model.config().hash(),
        config: model.config().clone(),
        prefix: model.prefix().into(),
    };
    writeln!(out, "{}", json(&header)?)?;
    for id in model.param_ids() {
        writeln!(out, "{}", json(&TensorRecord::of(store.name(id), store.get(id)))?)?;
    }
    Ok(())
}

/// Rebuilds the model in a fresh store and overwrites its weights from `input`.
pub fn read_checkpoint<S: Scalar>(input: impl BufRead) -> Result<(SeqModel, ParamStore<S>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty checkpoint".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    if header.scalar != S::NAME {
        return Err(Error::Format(format!("checkpoint holds {} weights, not {}", header.scalar, S::NAME)));
    }
    if header.config.hash() != header.config_hash {
        return Err(Error::Format("config hash does not match header config".into()));
    }
    let mut store = ParamStore::new();
    let model = SeqModel::new(header.config, &mut store, &header.prefix)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.is_empty() {
            records.push(serde_json::from_str::<TensorRecord>(&line).map_err(|e| Error::Format(e.to_string()))?);
        }
    }
    store.load_records(&records)?;
    Ok((model, store))
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &SeqModel, store: &ParamStore<S>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(SeqModel, ParamStore<S>)> {
    read_checkpoint(BufReader::new(std::fs::File::open(path)?))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}
