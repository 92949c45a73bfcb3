//! Checkpoint container.
//!
//! Layout: the magic line `a2fpn-ckpt-v1\n`, a little-endian `u64` index
//! length, a JSON index (`version`, model `config`, and one
//! `{name, shape, offset}` entry per array, offsets in bytes from the start of
//! the payload), then the payload of little-endian `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::{Buffers, ParamSet, RunningStats, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "a2fpn-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    version: String,
    config: ModelConfig,
    arrays: Vec<Entry>,
}

const PARAM: &str = "param/";
const STATS: &str = "stats/";

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
        arrays.push(Entry {
            name,
            shape,
            offset: payload.len(),
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in model.params.iter() {
        push(format!("{PARAM}{name}"), t.shape().to_vec(), t.data());
    }
    for (name, s) in &model.buffers.stats {
        push(format!("{STATS}{name}/mean"), vec![s.mean.len()], &s.mean);
        push(format!("{STATS}{name}/var"), vec![s.var.len()], &s.var);
    }
    let index = serde_json::to_vec(&Index {
        version: CHECKPOINT_VERSION.into(),
        config: model.config.clone(),
        arrays,
    })
    .expect("index serializes");

    let mut bytes = Vec::with_capacity(payload.len() + index.len() + 32);
    bytes.extend_from_slice(CHECKPOINT_VERSION.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&(index.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&index);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = format!("{CHECKPOINT_VERSION}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(format_err(0, format!("missing '{CHECKPOINT_VERSION}' header")));
    }
    let mut pos = magic.len();
    let len_bytes: [u8; 8] = bytes
        .get(pos..pos + 8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| format_err(pos, "truncated index length"))?;
    let index_len = u64::from_le_bytes(len_bytes) as usize;
    pos += 8;
    let index_bytes = bytes
        .get(pos..pos.saturating_add(index_len))
        .ok_or_else(|| format_err(pos, "truncated index"))?;
    let index: Index =
        serde_json::from_slice(index_bytes).map_err(|e| format_err(pos, format!("bad index: {e}")))?;
    if index.version != CHECKPOINT_VERSION {
        return Err(format_err(pos, format!("unsupported version '{}'", index.version)));
    }
    index.config.validate()?;
    let payload_start = pos + index_len;

    let mut params = ParamSet::new();
    let mut buffers = Buffers::default();
    for entry in &index.arrays {
        let count: usize = entry.shape.iter().product();
        let start = payload_start + entry.offset;
        let raw = bytes
            .get(start..start + 8 * count)
            .ok_or_else(|| format_err(start, format!("truncated payload for '{}'", entry.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(name) = entry.name.strip_prefix(PARAM) {
            params.insert(name, Tensor::from_vec(&entry.shape, data)?);
        } else if let Some(rest) = entry.name.strip_prefix(STATS) {
            let (layer, field) = rest
                .rsplit_once('/')
                .ok_or_else(|| format_err(pos, format!("bad stats entry '{}'", entry.name)))?;
            let stats = buffers
                .stats
                .entry(layer.to_string())
                .or_insert_with(|| RunningStats::new(count));
            match field {
                "mean" => stats.mean = data,
                "var" => stats.var = data,
                _ => return Err(format_err(pos, format!("bad stats field '{field}'"))),
            }
        } else {
            return Err(format_err(pos, format!("unknown array '{}'", entry.name)));
        }
    }

    // every expected tensor must be present with the expected shape
    let reference = Model::init(index.config.clone(), 0)?;
    for (name, t) in reference.params.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::dim("checkpoint parameter", t.shape(), got.shape()));
        }
    }
    Ok(Model {
        config: index.config,
        params,
        buffers,
    })
}
