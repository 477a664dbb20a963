//! Checkpoint files: a JSON manifest followed by raw little-endian `f32`
//! blocks in manifest order.
//!
//! Layout: magic `WCP1`, little-endian `u32` manifest length, the manifest
//! JSON, then the blocks (parameters and both optimizer moments). The
//! manifest records the architecture, step/epoch counters, the stream seed
//! (counter-based streams make the seed the entire RNG state), loss history,
//! dynamic weights, token scales and training SNR points — everything needed
//! to resume bit-exactly or to evaluate.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamLayout, Scalar};
use crate::train::TrainState;

const MAGIC: &[u8; 4] = b"WCP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDesc {
    pub name: String,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    /// Counter-based streams: the seed plus the (step, epoch) counters in
    /// the manifest fully determine every future draw.
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub blocks: Vec<BlockDesc>,
    pub dwa_weights: [f64; 3],
    pub loss_history: Vec<[f64; 3]>,
    pub norm_scales: [f64; 3],
    pub train_snrs_db: Vec<f64>,
}

/// Serializes a training state. Parameters and moments are written as `f32`
/// (lossless for `f32` training states).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    state: &TrainState<T>,
    seed: u64,
) -> Result<()> {
    let manifest = CheckpointManifest {
        version: 1,
        model: state.params.cfg.clone(),
        step: state.step as u64,
        epoch: state.epoch as u64,
        rng: RngState { seed },
        blocks: vec![
            BlockDesc {
                name: "params".into(),
                len: state.params.data.len() as u64,
            },
            BlockDesc {
                name: "adam_m".into(),
                len: state.adam_m.len() as u64,
            },
            BlockDesc {
                name: "adam_v".into(),
                len: state.adam_v.len() as u64,
            },
        ],
        dwa_weights: state.dwa_weights,
        loss_history: state.loss_history.clone(),
        norm_scales: state.norm_scales,
        train_snrs_db: state.train_snrs_db.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * 3 * state.params.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for block in [&state.params.data, &state.adam_m, &state.adam_v] {
        for v in block.iter() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back as an `f32` training state plus its manifest.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState<f32>, CheckpointManifest)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let json_len = u32::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
    if manifest.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }

    let layout = ParamLayout::new(&manifest.model);
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for desc in &manifest.blocks {
        let mut raw = vec![0u8; desc.len as usize * 4];
        file.read_exact(&mut raw).map_err(|e| {
            Error::Checkpoint(format!("truncated block '{}': {e}", desc.name))
        })?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        blocks.push((desc.name.clone(), vals));
    }
    let take = |name: &str| -> Result<Vec<f32>> {
        blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing block '{name}'")))
    };
    let params_data = take("params")?;
    if params_data.len() != layout.total {
        return Err(Error::Checkpoint(format!(
            "params block has {} values, layout expects {}",
            params_data.len(),
            layout.total
        )));
    }
    let params = ModelParams {
        cfg: manifest.model.clone(),
        layout,
        data: params_data,
    };
    let state = TrainState::from_parts(
        params,
        take("adam_m")?,
        take("adam_v")?,
        manifest.step as usize,
        manifest.epoch as usize,
        manifest.loss_history.clone(),
        manifest.dwa_weights,
        manifest.norm_scales,
        manifest.train_snrs_db.clone(),
    );
    Ok((state, manifest))
}

/// Convenience writer used by tools that only need inference parameters.
pub fn save_params_only(path: &Path, params: &ModelParams<f32>, seed: u64) -> Result<()> {
    let n = params.n_params();
    let state = TrainState::from_parts(
        params.clone(),
        vec![0.0; n],
        vec![0.0; n],
        0,
        0,
        Vec::new(),
        [1.0; 3],
        [1.0; 3],
        Vec::new(),
    );
    save_checkpoint(path, &state, seed)
}
