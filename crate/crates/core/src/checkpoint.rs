//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ANCHFREE"
//! version    u32
//! length     u64      byte length of the JSON manifest
//! manifest   JSON     configs, epoch, RNG state, history, tensor table
//! blobs      f32 LE   each tensor at manifest offset, in manifest order
//! ```
//!
//! Parameters come first, then the matching momentum buffers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Real, Tensor};
use crate::train::{EpochLog, RunConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"ANCHFREE";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

/// Where the next epoch's generator starts: ChaCha8 keyed by `seed`, on `stream`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// `param` or `velocity`.
    pub group: String,
    pub shape: [usize; 4],
    /// Byte offset from the start of the blob section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: String,
    pub config: RunConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochLog>,
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    for (group, set) in [("param", &state.params), ("velocity", &state.velocity)] {
        for (name, t) in set.names().iter().zip(set.tensors()) {
            tensors.push(TensorEntry {
                name: name.clone(),
                group: group.into(),
                shape: t.shape(),
                offset: blobs.len() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut blobs);
            }
        }
    }
    let manifest = Manifest {
        dtype: f32::DTYPE.into(),
        config: state.config.clone(),
        epoch: state.epoch,
        rng: RngState {
            algorithm: "chacha8".into(),
            seed: state.config.train.seed,
            stream: state.epoch as u64 + 1,
        },
        history: state.history.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < HEADER {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(HEADER..HEADER.saturating_add(len))
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.dtype != f32::DTYPE {
        return Err(bad(format!("dtype {} not supported", manifest.dtype)));
    }
    if manifest.rng.algorithm != "chacha8" {
        return Err(bad(format!("unknown rng {}", manifest.rng.algorithm)));
    }
    let blobs = &bytes[HEADER + len..];
    let mut params = ParamSet::default();
    let mut velocity = ParamSet::default();
    let mut expected_offset = 0usize;
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if start != expected_offset {
            return Err(bad(format!("tensor {} at offset {start}, expected {expected_offset}", e.name)));
        }
        let end = start + count * f32::BYTES;
        let raw = blobs.get(start..end).ok_or_else(|| bad(format!("truncated data for {}", e.name)))?;
        let data: Vec<f32> = raw.chunks_exact(f32::BYTES).map(f32::read_le).collect();
        let t = Tensor::from_vec(e.shape, data)?;
        match e.group.as_str() {
            "param" => params.push(e.name.clone(), t),
            "velocity" => velocity.push(e.name.clone(), t),
            g => return Err(bad(format!("unknown tensor group {g}"))),
        };
        expected_offset = end;
    }
    if expected_offset != blobs.len() {
        return Err(bad(format!("{} trailing bytes", blobs.len() - expected_offset)));
    }
    params.check_layout(&velocity)?;
    manifest.config.validate()?;
    Ok(TrainState {
        config: manifest.config,
        params,
        velocity,
        epoch: manifest.epoch,
        history: manifest.history,
    })
}

/// Write via a temporary file in the same directory, then rename.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| bad("checkpoint path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::PyramidConfig;

    fn state() -> TrainState {
        let mut c = RunConfig::default();
        c.pyramid = PyramidConfig::default().with_widths(6, 6, 6);
        let mut s = TrainState::new(c).unwrap();
        s.velocity.get_mut(3).fill(-0.25);
        s.epoch = 4;
        s.history.push(EpochLog {
            epoch: 4,
            loss: 1.0 / 3.0,
            loc_loss: 0.1,
            cls_loss: 0.2,
            lr: 1e-4,
            val_f1: Some(0.5),
            val_threshold: None,
        });
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let s = state();
        save(&s, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, s);
        let again = dir.path().join("b.ckpt");
        save(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&state()).unwrap();
        for cut in [0, 5, 19, 100, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(decode(&b).unwrap_err().to_string().contains("magic"));
        let mut b = bytes.clone();
        b[8] = 9;
        assert!(decode(&b).unwrap_err().to_string().contains("version"));
        let mut b = bytes;
        b.push(0);
        assert!(decode(&b).is_err());
    }
}
