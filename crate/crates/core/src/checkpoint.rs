//! Checkpoint files: `AJEPACKP`, format version (u32 LE), header length
//! (u64 LE), UTF-8 JSON header, then little-endian f32 tensor data in
//! header order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ajepa_tensor::Tensor;

use crate::error::{Error, Result};
use crate::frontend::NormStats;
use crate::fsutil;
use crate::model::{ModelParams, ParamSet};
use crate::train::{LossStats, Moments, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"AJEPACKP";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

/// Everything needed to continue a run or use its encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: TrainConfig,
    pub norm: NormStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
    /// Byte length.
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    rng: ChaCha8Rng,
    loss_stats: LossStats,
    norm: NormStats,
    config: TrainConfig,
    tensor_count: usize,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 7] = [
    "theta", "theta_bar", "phi", "theta.m", "theta.v", "phi.m", "phi.v",
];

fn groups(s: &TrainState) -> [&ParamSet<f32>; 7] {
    [
        &s.params.theta,
        &s.params.theta_bar,
        &s.params.phi,
        &s.theta_moments.m,
        &s.theta_moments.v,
        &s.phi_moments.m,
        &s.phi_moments.v,
    ]
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (g, set) in GROUPS.iter().zip(groups(&ckpt.state)) {
        for (name, t) in set.iter() {
            let offset = data.len() as u64;
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: format!("{g}/{name}"),
                shape: t.shape().to_vec(),
                offset,
                len: data.len() as u64 - offset,
            });
        }
    }
    let header = Header {
        step: ckpt.state.step,
        rng: ckpt.state.rng.clone(),
        loss_stats: ckpt.state.loss_stats,
        norm: ckpt.norm,
        config: ckpt.config.clone(),
        tensor_count: entries.len(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path, &encode(ckpt))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < PREAMBLE {
        return Err(fail(format!(
            "file is {} bytes, shorter than the {PREAMBLE}-byte preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("missing AJEPACKP magic at offset 0".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!(
            "format version {version} at offset 8, this build reads version {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            fail(format!(
                "header of {header_len} bytes at offset {PREAMBLE} runs past the end of the {}-byte file",
                bytes.len()
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
        .map_err(|e| fail(format!("unreadable header at offset {PREAMBLE}: {e}")))?;
    if header.tensor_count != header.tensors.len() {
        return Err(fail(format!(
            "header declares {} tensors but lists {}",
            header.tensor_count,
            header.tensors.len()
        )));
    }
    let data = &bytes[data_start..];
    let mut sets: Vec<ParamSet<f32>> = (0..GROUPS.len()).map(|_| ParamSet::new()).collect();
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let (group, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| fail(format!("tensor name {:?} lacks a group prefix", e.name)))?;
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| fail(format!("unknown tensor group {group:?}")))?;
        let numel: usize = e.shape.iter().product();
        if e.len != 4 * numel as u64 || e.offset != expected_offset {
            return Err(fail(format!(
                "tensor {} declares {} bytes at data offset {}, expected {} bytes at {}",
                e.name,
                e.len,
                e.offset,
                4 * numel,
                expected_offset
            )));
        }
        let end = e.offset + e.len;
        if end > data.len() as u64 {
            return Err(fail(format!(
                "truncated: tensor {} needs bytes {}..{} of the data section starting at file offset {data_start}, but only {} are present",
                e.name,
                e.offset,
                end,
                data.len()
            )));
        }
        let raw = &data[e.offset as usize..end as usize];
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|err| fail(err.to_string()))?;
        if sets[gi].position(name).is_some() {
            return Err(fail(format!("duplicate tensor {}", e.name)));
        }
        sets[gi].push(name, t);
        expected_offset = end;
    }
    if expected_offset != data.len() as u64 {
        return Err(fail(format!(
            "{} trailing bytes after the last tensor",
            data.len() as u64 - expected_offset
        )));
    }
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("seven groups");
    let (theta, theta_bar, phi) = (next(), next(), next());
    let theta_moments = Moments { m: next(), v: next() };
    let phi_moments = Moments { m: next(), v: next() };
    let layout_ok = theta.same_layout(&theta_bar)
        && theta.same_layout(&theta_moments.m)
        && theta.same_layout(&theta_moments.v)
        && phi.same_layout(&phi_moments.m)
        && phi.same_layout(&phi_moments.v);
    if !layout_ok || theta.is_empty() || phi.is_empty() {
        return Err(fail("weight and moment tensors do not line up".into()));
    }
    header.config.validate().map_err(|e| fail(e.to_string()))?;
    Ok(Checkpoint {
        state: TrainState {
            step: header.step,
            params: ModelParams {
                theta,
                theta_bar,
                phi,
            },
            theta_moments,
            phi_moments,
            rng: header.rng,
            loss_stats: header.loss_stats,
        },
        config: header.config,
        norm: header.norm,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fsutil::read(path)?, path)
}
