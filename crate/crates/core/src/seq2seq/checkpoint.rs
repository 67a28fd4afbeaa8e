//! Binary checkpoint: magic, format version, a JSON manifest, then every
//! parameter as little-endian `f64` in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Seq2SeqModel};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LCILCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub vocab_hash: String,
    pub vocab: Vocabulary,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &Seq2SeqModel, path: impl AsRef<Path>) -> Result<()> {
    let manifest = Manifest {
        config: model.config().clone(),
        seed: model.seed(),
        vocab_hash: model.vocab().hash(),
        vocab: (**model.vocab()).clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params() {
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Seq2SeqModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.vocab.hash() != manifest.vocab_hash {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    let mut values = Vec::with_capacity(manifest.params.len());
    let mut buf = [0u8; 8];
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        values.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = Seq2SeqModel::from_parts(
        manifest.config,
        Arc::new(manifest.vocab),
        manifest.seed,
        values,
    )?;
    if model
        .param_names()
        .iter()
        .zip(&manifest.params)
        .any(|(a, b)| *a != b.name)
    {
        return Err(Error::Checkpoint("parameter names differ from layout".into()));
    }
    Ok(model)
}
