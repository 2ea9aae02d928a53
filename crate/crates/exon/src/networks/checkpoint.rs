//! Checkpoint persistence: a directory holding a JSON manifest plus the raw
//! parameter payload. Writes go to a temp sibling and are renamed into place.
//!
//! Loading rebuilds the architecture from the manifest and overwrites tensor
//! values by name, then validates the architecture hash.

use super::{ArchitectureSpec, ModelParameters};
use crate::autodiff::Arr;
use crate::error::{ExonError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: String,
    kind: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

/// Run metadata stored alongside the parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch: ArchitectureSpec,
    arch_hash: String,
    beta: f64,
    epoch: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

fn collect<'a>(
    model: &'a ModelParameters,
) -> Vec<(String, &'static str, &'static str, &'a Arr)> {
    let mut out = Vec::new();
    for (role, net) in [
        ("classifier", &model.classifier),
        ("encoder", &model.encoder),
        ("decoder", &model.decoder),
    ] {
        for t in &net.params.tensors {
            out.push((t.name.clone(), role, "param", &t.value));
        }
        for b in &net.params.buffers {
            out.push((b.name.clone(), role, "buffer", &b.value));
        }
    }
    out
}

/// Write `model` to `dir` atomically (temp directory, then rename).
pub fn save_checkpoint(dir: &Path, model: &ModelParameters, meta: CheckpointMeta) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ckpt".into()),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let tensors = collect(model);
    let mut entries = Vec::with_capacity(tensors.len());
    {
        let mut payload = BufWriter::new(fs::File::create(tmp.join(PAYLOAD))?);
        let mut offset = 0usize;
        for (name, role, kind, value) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                role: (*role).into(),
                kind: (*kind).into(),
                shape: value.shape().to_vec(),
                offset,
            });
            for v in value.iter() {
                payload.write_f64::<LittleEndian>(*v)?;
            }
            offset += value.len();
        }
        payload.flush()?;
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        arch_hash: model.arch_hash(),
        beta: model.beta,
        epoch: meta.epoch,
        seed: meta.seed,
        tensors: entries,
    };
    fs::write(
        tmp.join(MANIFEST),
        serde_json::to_vec_pretty(&manifest)
            .map_err(|e| ExonError::Serialization(e.to_string()))?,
    )?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Load a checkpoint. Rebuilds the architecture, restores every tensor by
/// name, and validates the stored architecture hash.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParameters, CheckpointMeta)> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(ExonError::Checkpoint(format!(
            "missing checkpoint manifest at {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| ExonError::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ExonError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }

    let mut payload = Vec::new();
    BufReader::new(fs::File::open(dir.join(PAYLOAD))?).read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(ExonError::Checkpoint("truncated parameter payload".into()));
    }
    let mut values = vec![0.0f64; payload.len() / 8];
    (&payload[..]).read_f64_into::<LittleEndian>(&mut values)?;

    let mut model = ModelParameters::new(manifest.arch.clone(), manifest.beta, manifest.seed)?;
    if model.arch_hash() != manifest.arch_hash {
        return Err(ExonError::Checkpoint(format!(
            "architecture hash mismatch: checkpoint {}, rebuilt {}",
            manifest.arch_hash,
            model.arch_hash()
        )));
    }

    for entry in &manifest.tensors {
        let net = match entry.role.as_str() {
            "classifier" => &mut model.classifier,
            "encoder" => &mut model.encoder,
            "decoder" => &mut model.decoder,
            other => {
                return Err(ExonError::Checkpoint(format!("unknown role {other}")));
            }
        };
        let list = match entry.kind.as_str() {
            "param" => &mut net.params.tensors,
            "buffer" => &mut net.params.buffers,
            other => {
                return Err(ExonError::Checkpoint(format!("unknown kind {other}")));
            }
        };
        let slot = list
            .iter_mut()
            .find(|t| t.name == entry.name)
            .ok_or_else(|| {
                ExonError::Checkpoint(format!("tensor {} not in architecture", entry.name))
            })?;
        let len: usize = entry.shape.iter().product();
        if slot.value.shape() != entry.shape.as_slice() {
            return Err(ExonError::Checkpoint(format!(
                "tensor {} shape mismatch: {:?} vs {:?}",
                entry.name,
                entry.shape,
                slot.value.shape()
            )));
        }
        let end = entry.offset + len;
        if end > values.len() {
            return Err(ExonError::Checkpoint("payload too short".into()));
        }
        slot.value = Arr::from_shape_vec(IxDyn(&entry.shape), values[entry.offset..end].to_vec())
            .map_err(|e| ExonError::Checkpoint(e.to_string()))?;
    }

    Ok((
        model,
        CheckpointMeta {
            epoch: manifest.epoch,
            seed: manifest.seed,
        },
    ))
}

/// Generic named-tensor blob (used for optimizer state).
pub fn write_named_tensors(path: &Path, tensors: &[(String, Arr)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let index: Vec<(String, Vec<usize>)> = tensors
        .iter()
        .map(|(n, a)| (n.clone(), a.shape().to_vec()))
        .collect();
    let header = serde_json::to_vec(&index).map_err(|e| ExonError::Serialization(e.to_string()))?;
    w.write_u64::<LittleEndian>(header.len() as u64)?;
    w.write_all(&header)?;
    for (_, a) in tensors {
        for v in a.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_named_tensors(path: &Path) -> Result<Vec<(String, Arr)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let index: Vec<(String, Vec<usize>)> =
        serde_json::from_slice(&header).map_err(|e| ExonError::Serialization(e.to_string()))?;
    let mut out = Vec::with_capacity(index.len());
    for (name, shape) in index {
        let len: usize = shape.iter().product();
        let mut values = vec![0.0f64; len];
        r.read_f64_into::<LittleEndian>(&mut values)?;
        out.push((
            name,
            Arr::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| ExonError::Serialization(e.to_string()))?,
        ));
    }
    Ok(out)
}
