//! Single-file model container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header, then every parameter's values as little-endian
//! `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PolarModel};
use crate::tagger::Tagset;

pub const MAGIC: &[u8; 8] = b"POLARCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub config_hash: String,
    pub roles: Vec<String>,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
}

/// SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &ModelConfig) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

pub fn to_bytes(model: &PolarModel) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        config_hash: config_hash(&model.config)?,
        roles: model.tagset.roles().to_vec(),
        vocab: model.vocab.tokens().to_vec(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn read_header(mut bytes: &[u8]) -> Result<(Header, &[u8])> {
    let magic = take(&mut bytes, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)?;
    if config_hash(&header.config)? != header.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    Ok((header, bytes))
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolarModel> {
    let (header, mut data) = read_header(bytes)?;
    let tagset = Tagset::new(header.roles)?;
    let vocab = Vocab::from_tokens(header.vocab.iter().cloned());
    if vocab.tokens() != header.vocab.as_slice() {
        return Err(Error::Checkpoint("vocabulary is not in canonical order".into()));
    }
    // the initial values are overwritten below; the seed only fixes shapes
    let mut model = PolarModel::new(header.config, tagset, vocab, &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .store
            .by_name(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let value = model.store.value_mut(id);
        if value.shape() != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                entry.name,
                (entry.rows, entry.cols),
                value.shape()
            )));
        }
        let raw = take(&mut data, 8 * value.len(), &entry.name)?;
        for (dst, chunk) in value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    Ok(model)
}

pub fn save(model: &PolarModel, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model)?)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolarModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
