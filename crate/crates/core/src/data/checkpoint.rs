use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{checksum_hex, read_exact_len, read_manifest, write_file, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{Mactn, ModelConfig, ParameterStore};
use crate::nn::RunningStats;
use crate::tensor::{numel, Tensor};
use crate::train::AdamState;

pub const CHECKPOINT_MANIFEST: &str = "model.manifest";
pub const CHECKPOINT_BLOB: &str = "model.blob";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Mactn,
    pub seed: Option<u64>,
    pub optimizer: Option<AdamState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    BnMean,
    BnVar,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    /// Offset into the blob, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: String,
    config: ModelConfig,
    seed: Option<u64>,
    optimizer_step: Option<u64>,
    arrays: Vec<ArrayEntry>,
    blob_values: usize,
    blob_crc64: String,
}

/// Writes `model.manifest` (name, shape and offset per array) and one
/// contiguous little-endian `f64` blob `model.blob`.
pub fn save_checkpoint(model: &Mactn, seed: Option<u64>, optimizer: Option<&AdamState>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut values: Vec<f64> = Vec::with_capacity(model.params().num_values());
    let mut arrays = Vec::new();
    let mut push = |name: &str, role: Role, shape: Vec<usize>, data: &[f64]| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            role,
            shape,
            offset: values.len(),
        });
        values.extend_from_slice(data);
    };
    for (name, t) in model.params().iter() {
        push(name, Role::Param, t.shape().to_vec(), t.data());
    }
    for (name, rs) in model.bn_stats() {
        push(name, Role::BnMean, vec![rs.mean.len()], &rs.mean);
        push(name, Role::BnVar, vec![rs.var.len()], &rs.var);
    }
    if let Some(opt) = optimizer {
        if opt.m.len() != model.params().len() || opt.v.len() != model.params().len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        for (i, (name, t)) in model.params().iter().enumerate() {
            push(name, Role::AdamM, t.shape().to_vec(), &opt.m[i]);
            push(name, Role::AdamV, t.shape().to_vec(), &opt.v[i]);
        }
    }
    let mut blob = Vec::with_capacity(values.len() * 8);
    for v in &values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION.into(),
        config: model.config().clone(),
        seed,
        optimizer_step: optimizer.map(|o| o.step),
        arrays,
        blob_values: values.len(),
        blob_crc64: checksum_hex(&blob),
    };
    write_file(&dir.join(CHECKPOINT_BLOB), &blob)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(CHECKPOINT_MANIFEST), text.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let m: CheckpointManifest = read_manifest(&mpath)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(m.format_version));
    }
    let bad = |reason: String| Error::Manifest {
        path: mpath.clone(),
        reason,
    };
    let bytes = (m.blob_values as u64)
        .checked_mul(8)
        .ok_or_else(|| bad("blob size overflows".into()))?;
    let blob = read_exact_len(&dir.join(CHECKPOINT_BLOB), bytes, CHECKPOINT_BLOB)?;
    if checksum_hex(&blob) != m.blob_crc64 {
        return Err(Error::Checksum(CHECKPOINT_BLOB.into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut params = ParameterStore::new();
    let mut bn: BTreeMap<String, RunningStats> = BTreeMap::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for a in &m.arrays {
        let len = a
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("array `{}` size overflows", a.name)))?;
        let end = a
            .offset
            .checked_add(len)
            .filter(|&e| e <= values.len())
            .ok_or_else(|| bad(format!("array `{}` runs past the blob", a.name)))?;
        let data = values[a.offset..end].to_vec();
        match a.role {
            Role::Param => {
                if numel(&a.shape) == 0 {
                    return Err(bad(format!("array `{}` is empty", a.name)));
                }
                params.insert(a.name.clone(), Tensor::new(a.shape.clone(), data)?)?;
            }
            Role::BnMean => bn.entry(a.name.clone()).or_insert_with(|| RunningStats::new(0)).mean = data,
            Role::BnVar => bn.entry(a.name.clone()).or_insert_with(|| RunningStats::new(0)).var = data,
            Role::AdamM => adam_m.push(data),
            Role::AdamV => adam_v.push(data),
        }
    }
    let model = Mactn::from_parts(m.config, params, bn)?;
    let optimizer = match m.optimizer_step {
        Some(step) => {
            let n = model.params().len();
            if adam_m.len() != n || adam_v.len() != n {
                return Err(bad("optimizer moments do not cover every parameter".into()));
            }
            Some(AdamState {
                step,
                m: adam_m,
                v: adam_v,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        seed: m.seed,
        optimizer,
    })
}
