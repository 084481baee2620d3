use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PolicyConfig;
use super::model::Policy;
use crate::autodiff::BnRunning;
use crate::error::{Error, Result};
use crate::qonn::PyramidCircuit;

const FORMAT: &str = "qvrp-checkpoint/1";

/// Training context stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Node count of the training instances.
    pub nodes: usize,
    /// Trucks per training instance.
    pub trucks: usize,
    /// Demand clip value used at execution time.
    pub clip: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CircuitEntry {
    param: String,
    circuit: PyramidCircuit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: PolicyConfig,
    config_hash: String,
    meta: CheckpointMeta,
    head_kinds: Vec<String>,
    params: Vec<ParamEntry>,
    circuits: Vec<CircuitEntry>,
    bn_running: Vec<BnRunning>,
    blob: String,
    blob_sha256: String,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `path` (JSON manifest) and a sibling `.bin` blob of little-endian `f64`s.
pub fn save_checkpoint(policy: &Policy, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for (_, name, t) in policy.store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let circuits = policy
        .circuit_params()
        .into_iter()
        .map(|id| {
            let thetas = policy.store.get(id).data().to_vec();
            let n = (1..=64).find(|n| n * (n - 1) / 2 == thetas.len()).unwrap_or(0);
            Ok(CircuitEntry {
                param: policy.store.name(id).to_string(),
                circuit: PyramidCircuit::new(n, thetas)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bp = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        config_hash: policy.config.hash(),
        config: policy.config.clone(),
        meta: meta.clone(),
        head_kinds: policy
            .heads()
            .map(|h| if h.is_quantum() { "quantum" } else { "classical" }.to_string())
            .collect(),
        params,
        circuits,
        bn_running: policy.bn.clone(),
        blob: bp
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: hex(&blob),
    };
    fs::write(&bp, &blob)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. Any mismatch between the
/// manifest, the blob and the layout implied by the stored config is an
/// incompatibility error.
pub fn load_checkpoint(path: &Path) -> Result<(Policy, CheckpointMeta)> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Incompatible(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Incompatible(format!("unknown checkpoint format {}", manifest.format)));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Incompatible("config hash does not match the stored config".into()));
    }
    let blob = fs::read(path.with_file_name(&manifest.blob))?;
    if hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Incompatible("tensor blob checksum mismatch".into()));
    }
    let mut policy =
        Policy::seeded(manifest.config.clone(), 0).map_err(|e| Error::Incompatible(format!("stored config is invalid: {e}")))?;
    if manifest.params.len() != policy.store.len() {
        return Err(Error::Incompatible("parameter count differs from the config layout".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let ids: Vec<_> = policy.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest.params) {
        let t = policy.store.get_mut(id);
        if entry.shape != t.shape() {
            return Err(Error::Incompatible(format!("parameter {} has an unexpected shape", entry.name)));
        }
        let end = entry.offset + t.len();
        if end > values.len() {
            return Err(Error::Incompatible("tensor blob is truncated".into()));
        }
        t.data_mut().copy_from_slice(&values[entry.offset..end]);
    }
    for (id, entry) in policy.store.ids().zip(&manifest.params) {
        if policy.store.name(id) != entry.name {
            return Err(Error::Incompatible(format!("unexpected parameter {}", entry.name)));
        }
    }
    if manifest.bn_running.len() != policy.bn.len()
        || manifest.bn_running.iter().any(|b| b.features() != policy.config.d)
    {
        return Err(Error::Incompatible("batch-norm statistics do not match".into()));
    }
    policy.bn = manifest.bn_running;
    Ok((policy, manifest.meta))
}
