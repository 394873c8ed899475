//! Checkpoints: a JSON manifest naming every tensor plus a flat blob of
//! little-endian `f64`s in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{Architecture, NetConfig, Team};
use crate::env::EnvConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "asnet-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// Index of the network within the team.
    pub net: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub hypothesis: Architecture,
    pub net: NetConfig,
    pub env: EnvConfig,
    pub n_agents: usize,
    pub shared: bool,
    pub view_size: usize,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// A trained team together with the environment it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub team: Team,
    pub env: EnvConfig,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(blob)
}

/// Writes `<path>` (manifest) and a `.bin` blob next to it.
pub fn save_checkpoint(path: &Path, team: &Team, env: &EnvConfig) -> Result<()> {
    let first = &team.nets[0];
    let blob_name = format!(
        "{}.bin",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint")
    );
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (k, net) in team.nets.iter().enumerate() {
        for (name, t) in net.params.iter() {
            tensors.push(TensorEntry {
                net: k,
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        hypothesis: first.arch,
        net: first.config.clone(),
        env: env.clone(),
        n_agents: team.n_agents(),
        shared: team.shared,
        view_size: first.view_size,
        blob: blob_name.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path, &blob_name);
    std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}", m.format)));
    }
    let bp = blob_path(path, &m.blob);
    let bytes = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("checkpoint blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut team = Team::new(m.hypothesis, &m.net, m.view_size, m.n_agents, m.shared, 0)
        .map_err(|e| Error::Format(format!("checkpoint describes an invalid network: {e}")))?;
    let mut offset = 0;
    let mut entries = m.tensors.iter();
    for (k, net) in team.nets.iter_mut().enumerate() {
        for (name, t) in net.params.iter_mut() {
            let entry = entries
                .next()
                .ok_or_else(|| Error::Format("checkpoint lists too few tensors".into()))?;
            if entry.net != k || entry.name != name || entry.shape != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {}:{} {:?} does not match {} parameter {k}:{name} {:?}",
                    entry.net,
                    entry.name,
                    entry.shape,
                    m.hypothesis,
                    t.shape()
                )));
            }
            let n = t.numel();
            let src = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::Format("checkpoint blob is too short".into()))?;
            t.data_mut().copy_from_slice(src);
            offset += n;
        }
    }
    if entries.next().is_some() || offset != values.len() {
        return Err(Error::Format("checkpoint has extra tensors or data".into()));
    }
    Ok(Checkpoint { team, env: m.env })
}
