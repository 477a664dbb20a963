//! The `WDS1` binary dataset format.
//!
//! Layout: bytes 0-3 magic `WDS1`; bytes 4-7 little-endian `u32` header
//! length; a JSON header; then a raw little-endian `f32` payload. Each slot
//! matrix is stored column-major, real block then imaginary block, slots in
//! order (slot-major). Optional label blocks follow the channel block, as
//! described by the header's block table.
//!
//! Files produced by external generators are accepted as long as they carry
//! the required header fields; the optional metadata (task tag, per-sample
//! velocities and SNRs, normalization scalar, block table) defaults
//! sensibly.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSample, SystemConfig};
use crate::error::{Error, Result};
use crate::sequence::{pack_complex, unpack_complex, IclSequence, Task, Token, TokenRole};

const MAGIC: &[u8; 4] = b"WDS1";

/// The payload layout contract, verbatim in every header.
pub const LAYOUT: &str = "slot-major, column-major per matrix, real block then imaginary block";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDesc {
    pub name: String,
    pub floats_per_sample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdsHeader {
    pub version: u32,
    pub cfg: SystemConfig,
    pub n_samples: u32,
    pub t_history: u32,
    pub dtype: String,
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_scalar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snrs_db: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BlockDesc>>,
}

/// A dataset file in memory: channel trajectories plus optional precoder
/// labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: WdsHeader,
    pub samples: Vec<ChannelSample>,
    pub labels: Option<Vec<DMatrix<Complex64>>>,
}

impl Dataset {
    pub fn new(
        cfg: &SystemConfig,
        task: Option<Task>,
        t_history: usize,
        seed: u64,
        norm_scalar: f64,
        samples: Vec<ChannelSample>,
        labels: Option<Vec<DMatrix<Complex64>>>,
    ) -> Result<Self> {
        let slots = t_history + 1;
        let floats_per_matrix = (2 * cfg.n_t() * cfg.k_users) as u64;
        for s in &samples {
            if s.history.len() != slots {
                return Err(Error::Dataset(format!(
                    "sample has {} slots, expected {slots}",
                    s.history.len()
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::Dataset("labels must match sample count".into()));
            }
        }
        let mut blocks = vec![BlockDesc {
            name: "history".into(),
            floats_per_sample: slots as u64 * floats_per_matrix,
        }];
        if labels.is_some() {
            blocks.push(BlockDesc {
                name: "labels".into(),
                floats_per_sample: floats_per_matrix,
            });
        }
        let header = WdsHeader {
            version: 1,
            cfg: cfg.clone(),
            n_samples: samples.len() as u32,
            t_history: t_history as u32,
            dtype: "f32".into(),
            layout: LAYOUT.into(),
            task,
            seed: Some(seed),
            norm_scalar: Some(norm_scalar),
            velocities: Some(samples.iter().map(|s| s.velocity).collect()),
            snrs_db: Some(samples.iter().map(|s| s.snr_db).collect()),
            blocks: Some(blocks),
        };
        Ok(Dataset {
            header,
            samples,
            labels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push_matrix = |m: &DMatrix<Complex64>| {
            for v in pack_complex(m) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for s in &self.samples {
            for slot in &s.history {
                push_matrix(slot);
            }
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                push_matrix(l);
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Dataset(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let mut json = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        file.read_exact(&mut json)?;
        let header: WdsHeader = serde_json::from_slice(&json)?;
        if header.dtype != "f32" {
            return Err(Error::Dataset(format!("unsupported dtype '{}'", header.dtype)));
        }

        let cfg = &header.cfg;
        cfg.validate()?;
        let n = header.n_samples as usize;
        let slots = header.t_history as usize + 1;
        let per_matrix = 2 * cfg.n_t() * cfg.k_users;
        let default_blocks = vec![BlockDesc {
            name: "history".into(),
            floats_per_sample: (slots * per_matrix) as u64,
        }];
        let blocks = header.blocks.clone().unwrap_or(default_blocks);

        let mut read_block = |floats: usize| -> Result<Vec<f32>> {
            let mut raw = vec![0u8; floats * 4];
            file.read_exact(&mut raw)
                .map_err(|e| Error::Dataset(format!("truncated payload: {e}")))?;
            Ok(raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };

        let mut samples: Option<Vec<ChannelSample>> = None;
        let mut labels: Option<Vec<DMatrix<Complex64>>> = None;
        for block in &blocks {
            let values = read_block(block.floats_per_sample as usize * n)?;
            match block.name.as_str() {
                "history" => {
                    if block.floats_per_sample as usize != slots * per_matrix {
                        return Err(Error::Dataset("history block size mismatch".into()));
                    }
                    let velocities = header.velocities.clone().unwrap_or(vec![0.0; n]);
                    let snrs = header.snrs_db.clone().unwrap_or(vec![0.0; n]);
                    if velocities.len() != n || snrs.len() != n {
                        return Err(Error::Dataset("metadata arrays must match n_samples".into()));
                    }
                    let mut out = Vec::with_capacity(n);
                    for i in 0..n {
                        let base = i * slots * per_matrix;
                        let history = (0..slots)
                            .map(|j| {
                                let chunk: Vec<f64> = values
                                    [base + j * per_matrix..base + (j + 1) * per_matrix]
                                    .iter()
                                    .map(|&v| v as f64)
                                    .collect();
                                unpack_complex(&chunk, cfg.n_t(), cfg.k_users)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        out.push(ChannelSample {
                            history,
                            velocity: velocities[i],
                            snr_db: snrs[i],
                            seed: i as u64,
                        });
                    }
                    samples = Some(out);
                }
                "labels" => {
                    if block.floats_per_sample as usize != per_matrix {
                        return Err(Error::Dataset("label block size mismatch".into()));
                    }
                    let mut out = Vec::with_capacity(n);
                    for i in 0..n {
                        let chunk: Vec<f64> = values[i * per_matrix..(i + 1) * per_matrix]
                            .iter()
                            .map(|&v| v as f64)
                            .collect();
                        out.push(unpack_complex(&chunk, cfg.n_t(), cfg.k_users)?);
                    }
                    labels = Some(out);
                }
                other => {
                    return Err(Error::Dataset(format!("unknown block '{other}'")));
                }
            }
        }
        let samples =
            samples.ok_or_else(|| Error::Dataset("file carries no history block".into()))?;
        Ok(Dataset {
            header,
            samples,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFileHeader {
    pub version: u32,
    pub task: Task,
    pub shots: u32,
    pub token_dim: u32,
    pub n_sequences: u32,
    pub seq_len: u32,
    pub loss_positions: Vec<u32>,
    pub norm_scalar: f64,
    pub has_query_target: bool,
    pub dtype: String,
    pub layout: String,
}

/// Serializes uniformly-shaped sequences as a `WDS1` payload: per sequence,
/// all tokens in order, then the out-of-band query target when present.
pub fn write_sequences(path: &Path, seqs: &[IclSequence], norm_scalar: f64) -> Result<()> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Dataset("no sequences to write".into()))?;
    let has_target = first.query_target.is_some();
    for s in seqs {
        if s.task != first.task
            || s.shots != first.shots
            || s.len() != first.len()
            || s.loss_positions != first.loss_positions
            || s.token_dim() != first.token_dim()
            || s.query_target.is_some() != has_target
        {
            return Err(Error::Dataset(
                "sequences in one file must share task, shape and loss layout".into(),
            ));
        }
    }
    let header = SequenceFileHeader {
        version: 1,
        task: first.task,
        shots: first.shots as u32,
        token_dim: first.token_dim() as u32,
        n_sequences: seqs.len() as u32,
        seq_len: first.len() as u32,
        loss_positions: first.loss_positions.iter().map(|&p| p as u32).collect(),
        norm_scalar,
        has_query_target: has_target,
        dtype: "f32".into(),
        layout: "tokens in order per sequence, query target last when present".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for s in seqs {
        for tok in &s.tokens {
            for &v in &tok.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if let Some(t) = &s.query_target {
            for &v in t {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<(Vec<IclSequence>, SequenceFileHeader)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Dataset(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let mut json = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut json)?;
    let header: SequenceFileHeader = serde_json::from_slice(&json)?;
    let dim = header.token_dim as usize;
    let len = header.seq_len as usize;
    let per_seq = len * dim + if header.has_query_target { dim } else { 0 };
    let mut raw = vec![0u8; header.n_sequences as usize * per_seq * 4];
    file.read_exact(&mut raw)
        .map_err(|e| Error::Dataset(format!("truncated payload: {e}")))?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let loss_positions: Vec<usize> = header.loss_positions.iter().map(|&p| p as usize).collect();
    let mut seqs = Vec::with_capacity(header.n_sequences as usize);
    for i in 0..header.n_sequences as usize {
        let base = i * per_seq;
        let tokens = (0..len)
            .map(|p| Token {
                values: values[base + p * dim..base + (p + 1) * dim].to_vec(),
                role: if p % 2 == 0 { TokenRole::Input } else { TokenRole::Label },
            })
            .collect();
        let query_target = header
            .has_query_target
            .then(|| values[base + len * dim..base + per_seq].to_vec());
        seqs.push(IclSequence {
            task: header.task,
            tokens,
            shots: header.shots as usize,
            loss_positions: loss_positions.clone(),
            query_target,
        });
    }
    Ok((seqs, header))
}

/// SHA-256 of a file, hex-encoded; dataset manifests record these.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
