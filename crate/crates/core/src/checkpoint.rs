//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CTNETCKP"            8-byte magic
//! u32                    format version (currently 1)
//! u64                    header length in bytes
//! header                 UTF-8 JSON, see `Header`
//! f64 × Σ tensor sizes   tensor data in header order, row-major
//! ```
//!
//! Tensor names are `param/<name>` for network parameters, `adam_m/<name>`
//! and `adam_v/<name>` for Adam moments, and `similarity` for the `k×k`
//! similarity matrix.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Network};
use crate::losses::SimilarityMatrix;
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, Optimizer, OptimizerKind, TrainConfig, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CTNETCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    backbone: BackboneConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    class_names: Vec<String>,
    optimizer: OptimizerKind,
    learning_rate: f64,
    optimizer_step: u64,
    similarity_momentum: f64,
    tensors: Vec<TensorEntry>,
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (name, t) in state.network.params() {
        tensors.push((format!("param/{name}"), t.shape().to_vec(), t.data()));
    }
    let (m, v) = state.optimizer.moments();
    for (prefix, slots) in [("adam_m", m), ("adam_v", v)] {
        for ((name, t), slot) in state.network.params().iter().zip(slots) {
            tensors.push((format!("{prefix}/{name}"), t.shape().to_vec(), slot));
        }
    }
    let sm = state.similarity.as_tensor();
    let k = state.similarity.k();
    let sm_values = sm.data().to_vec();
    tensors.push(("similarity".into(), vec![k, k], &sm_values));

    let header = Header {
        config: state.config.clone(),
        backbone: state.network.config().clone(),
        epoch: state.epoch,
        history: state.history.clone(),
        class_names: state.class_names.clone(),
        optimizer: state.optimizer.kind(),
        learning_rate: state.optimizer.learning_rate(),
        optimizer_step: state.optimizer.steps(),
        similarity_momentum: state.similarity.momentum(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let total: usize = tensors.iter().map(|t| t.2.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| bad("missing version"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| bad("missing header length"))?;
    let len =
        usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header length overflow"))?;
    let json = r.get(..len).ok_or_else(|| bad("header truncated"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut data = &r[len..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = data
            .get(..8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} truncated", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        data = &data[8 * n..];
        let t = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name.as_str(), t));
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    let take = |prefix: &str| -> Vec<(String, Tensor)> {
        tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    };
    let params = take("param/");
    let network = Network::from_params(header.backbone, params)?;
    let moments = |prefix: &str| -> Result<Vec<Vec<f64>>> {
        let slots = take(prefix);
        if !slots.is_empty() && slots.len() != network.params().len() {
            return Err(Error::Checkpoint(format!(
                "{prefix} holds {} of {} tensors",
                slots.len(),
                network.params().len()
            )));
        }
        Ok(slots.into_iter().map(|(_, t)| t.data().to_vec()).collect())
    };
    let optimizer = Optimizer::from_state(
        header.optimizer,
        header.learning_rate,
        header.optimizer_step,
        moments("adam_m/")?,
        moments("adam_v/")?,
    )?;
    let sm = tensors
        .iter()
        .find(|(n, _)| *n == "similarity")
        .map(|(_, t)| t)
        .ok_or_else(|| bad("missing similarity matrix"))?;
    let k = header.class_names.len();
    if sm.shape() != [k, k] {
        return Err(Error::Checkpoint(format!(
            "similarity matrix {:?} for {k} classes",
            sm.shape()
        )));
    }
    let rows: Vec<Vec<f64>> = sm.data().chunks(k).map(<[f64]>::to_vec).collect();
    let similarity = SimilarityMatrix::from_rows(&rows, header.similarity_momentum)?;
    if header.history.len() != header.epoch {
        return Err(Error::Checkpoint(format!(
            "history has {} rows for {} completed epochs",
            header.history.len(),
            header.epoch
        )));
    }
    Ok(TrainState {
        network,
        optimizer,
        similarity,
        epoch: header.epoch,
        history: header.history,
        config: header.config,
        class_names: header.class_names,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ConvBlock;

    fn state(kind: OptimizerKind) -> TrainState {
        let cfg = TrainConfig {
            image_size: (6, 6),
            conv_blocks: vec![ConvBlock::new(3, 3, 1, 2)],
            embedding_dim: 4,
            optimizer_phase1: kind,
            ..TrainConfig::with_epochs(3)
        };
        let mut s = TrainState::new(cfg, 3, vec!["a".into(), "b".into()]).unwrap();
        s.similarity =
            SimilarityMatrix::from_rows(&[vec![0.7, 0.3], vec![0.1 + 0.2, 0.7]], 0.9).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let s = state(kind);
            let back = decode(&encode(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let s = state(OptimizerKind::Adam);
        save(&path, &s).unwrap();
        assert_eq!(load(&path).unwrap(), s);

        let bytes = std::fs::read(&path).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        let mut future = bytes;
        future[8] = 9;
        assert!(decode(&future).unwrap_err().to_string().contains("version"));
    }
}
