//! Checkpoint file format.
//!
//! Layout: a fixed magic, a little-endian u64 header length, a TOML header
//! (format version, resolved experiment config, training state, tensor
//! manifest with names/shapes/offsets) and a raw little-endian f32 blob.
//! The writer is deterministic, so saving a freshly loaded checkpoint
//! reproduces the file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::DenoiserModel;
use crate::tensor::optim::{AdamWState, ParamMap};
use crate::tensor::Tensor;

const MAGIC: &[u8; 12] = b"AMBISEGCKPT\n";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, counted in f32 elements.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    param_count: u64,
    experiment: ExperimentConfig,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a training run exactly where it stopped.
#[derive(Debug)]
pub struct TrainState {
    pub model: DenoiserModel,
    pub adamw: AdamWState<f32>,
    pub rng_word_pos: u128,
}

pub fn save(path: &Path, experiment: &ExperimentConfig, state: &TrainState) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    let mut push = |entries: &mut Vec<TensorEntry>,
                    blob: &mut Vec<u8>,
                    name: String,
                    shape: Vec<usize>,
                    data: &[f32]| {
        entries.push(TensorEntry {
            name,
            shape,
            offset,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len() as u64;
    };

    for (name, p) in &state.model.params {
        push(
            &mut entries,
            &mut blob,
            name.clone(),
            p.shape().to_vec(),
            p.data(),
        );
    }
    for (name, m, v) in state.adamw.moments() {
        push(
            &mut entries,
            &mut blob,
            format!("adamw.m.{name}"),
            vec![m.len()],
            m,
        );
        push(
            &mut entries,
            &mut blob,
            format!("adamw.v.{name}"),
            vec![v.len()],
            v,
        );
    }

    let header = Header {
        version: VERSION,
        step: state.adamw.step,
        rng_word_pos_hi: (state.rng_word_pos >> 64) as u64,
        rng_word_pos_lo: state.rng_word_pos as u64,
        param_count: state.model.param_count() as u64,
        experiment: experiment.clone(),
        tensors: entries,
    };
    let header_text =
        toml::to_string(&header).map_err(|e| Error::Config(format!("header serialize: {e}")))?;

    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    let write = |file: &mut fs::File, bytes: &[u8]| -> Result<()> {
        file.write_all(bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(&mut file, MAGIC)?;
    write(&mut file, &(header_text.len() as u64).to_le_bytes())?;
    write(&mut file, header_text.as_bytes())?;
    write(&mut file, &blob)?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptHeader {
            path: display,
            detail: "missing checkpoint magic".into(),
        });
    }
    let header_len =
        u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 8;
    if bytes.len() < header_start + header_len {
        return Err(Error::TruncatedBlob {
            path: display,
            expected: (header_start + header_len) as u64,
            found: bytes.len() as u64,
        });
    }
    let header_text = std::str::from_utf8(&bytes[header_start..header_start + header_len])
        .map_err(|e| Error::CorruptHeader {
            path: display.clone(),
            detail: format!("header not UTF-8: {e}"),
        })?;
    let header: Header = toml::from_str(header_text).map_err(|e| Error::CorruptHeader {
        path: display.clone(),
        detail: e.to_string(),
    })?;
    if header.version != VERSION {
        return Err(Error::VersionMismatch {
            path: display,
            found: header.version,
            supported: VERSION,
        });
    }

    let blob = &bytes[header_start + header_len..];
    let total_elems: u64 = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() as u64)
        .sum();
    if (blob.len() as u64) < total_elems * 4 {
        return Err(Error::TruncatedBlob {
            path: display,
            expected: total_elems * 4,
            found: blob.len() as u64,
        });
    }

    let read_tensor = |entry: &TensorEntry| -> Result<Vec<f32>> {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize * 4;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::TruncatedBlob {
                path: display.clone(),
                expected: end as u64,
                found: blob.len() as u64,
            });
        }
        Ok(blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let mut params = ParamMap::new();
    let mut moments: Vec<(String, bool, Vec<f32>)> = Vec::new();
    for entry in &header.tensors {
        let data = read_tensor(entry)?;
        if let Some(name) = entry.name.strip_prefix("adamw.m.") {
            moments.push((name.to_string(), true, data));
        } else if let Some(name) = entry.name.strip_prefix("adamw.v.") {
            moments.push((name.to_string(), false, data));
        } else {
            params.insert(entry.name.clone(), Tensor::param(&entry.shape, data)?);
        }
    }

    let model = DenoiserModel {
        config: header.experiment.denoiser_config(),
        params,
    };
    if model.param_count() as u64 != header.param_count {
        return Err(Error::CorruptHeader {
            path: display,
            detail: format!(
                "parameter manifest holds {} elements, header promises {}",
                model.param_count(),
                header.param_count
            ),
        });
    }

    let mut adamw = AdamWState::new(header.experiment.train.lr)
        .with_weight_decay(header.experiment.train.weight_decay);
    adamw.step = header.step;
    let mut pending: std::collections::BTreeMap<String, (Option<Vec<f32>>, Option<Vec<f32>>)> =
        Default::default();
    for (name, is_m, data) in moments {
        let slot = pending.entry(name).or_default();
        if is_m {
            slot.0 = Some(data);
        } else {
            slot.1 = Some(data);
        }
    }
    for (name, (m, v)) in pending {
        match (m, v) {
            (Some(m), Some(v)) => adamw.set_moments(&name, m, v),
            _ => {
                return Err(Error::CorruptHeader {
                    path: path.display().to_string(),
                    detail: format!("optimizer moments for '{name}' incomplete"),
                })
            }
        }
    }

    let rng_word_pos =
        ((header.rng_word_pos_hi as u128) << 64) | header.rng_word_pos_lo as u128;
    Ok((
        header.experiment,
        TrainState {
            model,
            adamw,
            rng_word_pos,
        },
    ))
}
