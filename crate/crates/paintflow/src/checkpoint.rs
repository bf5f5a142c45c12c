//! Checkpoint container: a single binary file holding everything needed to
//! resume training bit-exactly or to run inference.
//!
//! Layout:
//!   magic `UNIM` | u32 version | u64 header_len | header text (configs + state)
//!   | u32 tensor count | tensor table (name, dtype, shape, offset)
//!   | f32 LE payload | trailing u64 FNV-1a checksum of all preceding bytes

use std::fs;
use std::path::Path;

use crate::codec::CodecConfig;
use crate::config::{self, CodecSpec, RunConfig};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::backbone::ModelConfig;
use crate::nn::{AdamState, ParamStore};
use crate::painted::CanvasSpec;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UNIM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub canvas: CanvasSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub codec: CodecConfig,
    /// Codec settings as written in the config file (training budget etc).
    pub codec_spec: CodecSpec,
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub rng_state: RngState,
}

impl Checkpoint {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            canvas: self.canvas.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            codec: self.codec_spec.clone(),
        }
    }
}

fn hex_bytes(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex_bytes(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::CorruptData("odd-length hex string".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::CorruptData("invalid hex".into()))
        })
        .collect()
}

fn header_text(ckpt: &Checkpoint) -> String {
    let mut s = config::to_text(&ckpt.run_config());
    s.push_str("\n[state]\n");
    s.push_str(&format!("step = {}\n", ckpt.step));
    s.push_str(&format!("adam_step = {}\n", ckpt.adam.step));
    s.push_str(&format!("rng_seed = {}\n", hex_bytes(&ckpt.rng_state.seed)));
    s.push_str(&format!("rng_stream = {}\n", ckpt.rng_state.stream));
    s.push_str(&format!("rng_word_pos = {}\n", ckpt.rng_state.word_pos));
    s
}

struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in ckpt.params.iter() {
        tensors.push((name.to_string(), t));
    }
    // Adam moments ride along as tensors shaped like their parameters.
    let moment_shapes: Vec<(String, Vec<usize>)> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let m_tensors: Vec<(String, Tensor)> = moment_shapes
        .iter()
        .enumerate()
        .map(|(i, (n, shape))| {
            (format!("adam.m.{n}"), Tensor::from_vec(shape, ckpt.adam.m[i].clone()).expect("aligned"))
        })
        .collect();
    let v_tensors: Vec<(String, Tensor)> = moment_shapes
        .iter()
        .enumerate()
        .map(|(i, (n, shape))| {
            (format!("adam.v.{n}"), Tensor::from_vec(shape, ckpt.adam.v[i].clone()).expect("aligned"))
        })
        .collect();
    for (n, t) in &m_tensors {
        tensors.push((n.clone(), t));
    }
    for (n, t) in &v_tensors {
        tensors.push((n.clone(), t));
    }
    if let CodecConfig::TinyAutoencoder { weights: Some(w), .. } = &ckpt.codec {
        for (name, t) in w.iter() {
            tensors.push((format!("codec.{name}"), t));
        }
    }

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = header_text(ckpt);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());

    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(0); // dtype f32
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.len() * 4) as u64;
    }
    for (_, t) in &tensors {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut hasher = Fnv1a::new();
    hasher.update(&out);
    out.extend_from_slice(&hasher.finish().to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::CorruptData("checkpoint too short".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptData("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("sized"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let body_len = bytes.len() - 8;
    let mut hasher = Fnv1a::new();
    hasher.update(&bytes[..body_len]);
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("sized"));
    if hasher.finish() != stored {
        return Err(Error::ChecksumMismatch(format!("checkpoint {}", path.display())));
    }

    let mut cur = 8usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > body_len {
            return Err(Error::CorruptData("checkpoint truncated".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };

    let header_len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("sized")) as usize;
    let header = std::str::from_utf8(take(&mut cur, header_len)?)
        .map_err(|_| Error::CorruptData("checkpoint header is not utf-8".into()))?
        .to_string();

    // Header = run config + [state] section; split the state part off.
    let state_pos = header
        .find("[state]")
        .ok_or_else(|| Error::CorruptData("checkpoint header missing [state]".into()))?;
    let run_cfg = config::from_text(&header[..state_pos])?;
    let mut step = None;
    let mut adam_step = None;
    let mut rng_seed = None;
    let mut rng_stream = None;
    let mut rng_word_pos = None;
    for line in header[state_pos..].lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptData(format!("bad state line {line:?}")))?;
        match (k.trim(), v.trim()) {
            ("step", v) => step = v.parse::<u64>().ok(),
            ("adam_step", v) => adam_step = v.parse::<u64>().ok(),
            ("rng_seed", v) => rng_seed = Some(unhex_bytes(v)?),
            ("rng_stream", v) => rng_stream = v.parse::<u64>().ok(),
            ("rng_word_pos", v) => rng_word_pos = v.parse::<u128>().ok(),
            (k, _) => return Err(Error::CorruptData(format!("unknown state key {k:?}"))),
        }
    }
    let step = step.ok_or_else(|| Error::CorruptData("missing state.step".into()))?;
    let adam_step = adam_step.ok_or_else(|| Error::CorruptData("missing state.adam_step".into()))?;
    let seed_vec = rng_seed.ok_or_else(|| Error::CorruptData("missing state.rng_seed".into()))?;
    let seed: [u8; 32] = seed_vec
        .try_into()
        .map_err(|_| Error::CorruptData("rng seed must be 32 bytes".into()))?;
    let rng_state = RngState {
        seed,
        stream: rng_stream.ok_or_else(|| Error::CorruptData("missing state.rng_stream".into()))?,
        word_pos: rng_word_pos.ok_or_else(|| Error::CorruptData("missing state.rng_word_pos".into()))?,
    };

    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("sized")) as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().expect("sized")) as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::CorruptData("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = take(&mut cur, 1)?[0];
        if dtype != 0 {
            return Err(Error::CorruptData(format!("unsupported dtype {dtype}")));
        }
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("sized")) as usize);
        }
        let offset = u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("sized"));
        table.push(TableEntry { name, shape, offset });
    }

    let payload_start = cur;
    let payload = &bytes[payload_start..body_len];
    let read_tensor = |entry: &TableEntry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(Error::CorruptData(format!("tensor {} outside payload", entry.name)));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().expect("sized")));
        }
        Tensor::from_vec(&entry.shape, data)
    };

    let mut params = ParamStore::new();
    let mut codec_weights = ParamStore::new();
    let mut m_map: Vec<(String, Vec<f32>)> = Vec::new();
    let mut v_map: Vec<(String, Vec<f32>)> = Vec::new();
    for entry in &table {
        if let Some(rest) = entry.name.strip_prefix("adam.m.") {
            m_map.push((rest.to_string(), read_tensor(entry)?.into_data()));
        } else if let Some(rest) = entry.name.strip_prefix("adam.v.") {
            v_map.push((rest.to_string(), read_tensor(entry)?.into_data()));
        } else if let Some(rest) = entry.name.strip_prefix("codec.") {
            codec_weights.add(rest, read_tensor(entry)?);
        } else {
            params.add(entry.name.clone(), read_tensor(entry)?);
        }
    }

    let mut adam = AdamState::new(&params);
    adam.step = adam_step;
    for (name, data) in m_map {
        let idx = params
            .id_of(&name)
            .ok_or_else(|| Error::CorruptData(format!("adam.m for unknown parameter {name}")))?;
        adam.m[idx] = data;
    }
    for (name, data) in v_map {
        let idx = params
            .id_of(&name)
            .ok_or_else(|| Error::CorruptData(format!("adam.v for unknown parameter {name}")))?;
        adam.v[idx] = data;
    }

    let codec = match &run_cfg.codec {
        CodecSpec::IdentityPatch { patch_size } => CodecConfig::IdentityPatch { patch_size: *patch_size },
        CodecSpec::TinyAutoencoder { latent_channels, downsample_factor, .. } => CodecConfig::TinyAutoencoder {
            latent_channels: *latent_channels,
            downsample_factor: *downsample_factor,
            weights: if codec_weights.is_empty() { None } else { Some(codec_weights) },
        },
    };

    Ok(Checkpoint {
        canvas: run_cfg.canvas,
        model: run_cfg.model,
        train: run_cfg.train,
        codec,
        codec_spec: run_cfg.codec,
        params,
        adam,
        step,
        rng_state,
    })
}
