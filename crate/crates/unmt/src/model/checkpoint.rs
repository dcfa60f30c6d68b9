//! Checkpoint file layout (bit-exact round trip):
//!
//! ```text
//! magic  b"UNMTCKPT"                      8 bytes
//! u32 LE header length                    4 bytes
//! JSON header: version, dtype, model config, vocabulary content tokens,
//!   shape manifest for model and extra tensors, free-form `extra` object
//! raw tensor data: every value as f64 LE, in manifest order
//!   (model parameters first, then extra tensors)
//! ```
//!
//! Values are stored through f64, which is exact for both f32 and f64 models.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::transformer::TransformerModel;
use super::{ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

const MAGIC: &[u8; 8] = b"UNMTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    vocab: Vec<String>,
    params: Vec<TensorMeta>,
    extra_tensors: Vec<TensorMeta>,
    extra: serde_json::Value,
}

/// An additional named tensor stored next to the model (optimizer moments).
#[derive(Debug, Clone)]
pub struct NamedTensor<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

pub struct Checkpoint<T> {
    pub model: TransformerModel<T>,
    pub vocab: Vocabulary,
    pub extra: serde_json::Value,
    pub extra_tensors: Vec<NamedTensor<T>>,
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    extra: serde_json::Value,
    extra_tensors: &[NamedTensor<T>],
) -> Result<()> {
    let header = Header {
        version: VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        vocab: vocab.content_tokens().to_vec(),
        params: model
            .params
            .iter()
            .map(|p| TensorMeta {
                name: p.name.clone(),
                rows: p.rows,
                cols: p.cols,
            })
            .collect(),
        extra_tensors: extra_tensors
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
        extra,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::BadCheckpoint(format!("header encode: {e}")))?;
    let pstr = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&pstr, e))?);
    let io = |e| Error::io(&pstr, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for p in model.params.iter() {
        write_values(&mut w, &p.data, &pstr)?;
    }
    for t in extra_tensors {
        write_values(&mut w, &t.data, &pstr)?;
    }
    w.flush().map_err(|e| Error::io(&pstr, e))?;
    Ok(())
}

fn write_values<T: Scalar, W: Write>(w: &mut W, data: &[T], path: &str) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &v in data {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let pstr = path.display().to_string();
    if !path.exists() {
        return Err(Error::CheckpointNotFound(pstr));
    }
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(&pstr, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(&pstr, e))?;
    if &magic != MAGIC {
        return Err(Error::BadCheckpoint(format!("{pstr}: bad magic")));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|e| Error::io(&pstr, e))?;
    let hlen = u32::from_le_bytes(len_bytes) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(|e| Error::io(&pstr, e))?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::BadCheckpoint(format!("{pstr}: header decode: {e}")))?;
    if header.version != VERSION {
        return Err(Error::BadCheckpoint(format!(
            "{pstr}: version {} unsupported",
            header.version
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::BadCheckpoint(format!(
            "{pstr}: dtype {} but {} requested",
            header.dtype,
            T::DTYPE
        )));
    }

    let mut params: ParamStore<T> = ParamStore::new();
    for meta in &header.params {
        let data = read_values(&mut r, meta.rows * meta.cols, &pstr)?;
        params.add(&meta.name, meta.rows, meta.cols, data);
    }
    let mut extra_tensors = Vec::with_capacity(header.extra_tensors.len());
    for meta in &header.extra_tensors {
        let data = read_values(&mut r, meta.rows * meta.cols, &pstr)?;
        extra_tensors.push(NamedTensor {
            name: meta.name.clone(),
            rows: meta.rows,
            cols: meta.cols,
            data,
        });
    }
    let vocab = Vocabulary::new(header.vocab)?;
    header.config.validate()?;
    Ok(Checkpoint {
        model: TransformerModel {
            config: header.config,
            params,
        },
        vocab,
        extra: header.extra,
        extra_tensors,
    })
}

fn read_values<T: Scalar, R: Read>(r: &mut R, n: usize, path: &str) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::BadCheckpoint(format!("{path}: truncated tensor data: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}
