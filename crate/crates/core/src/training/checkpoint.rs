//! Single-file checkpoint archive.
//!
//! Layout: magic `UIERLCK1`, `u32` version, `u64` header length, canonical
//! JSON header (sorted keys), raw little-endian tensor data, and a trailing
//! SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::network::{build_model, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UIERLCK1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex.
    pub seed: String,
    pub stream: u64,
    /// Word position (a `u128`), decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Training progress stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Iterations completed.
    pub iteration: u64,
    pub adam_t: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    config: serde_json::Value,
    state: Option<TrainState>,
    tensors: Vec<TensorEntry>,
}

/// Contents of an archive.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    /// Snapshot of the full run configuration.
    pub config: serde_json::Value,
    pub params: ParamStore<T>,
    /// Adam moments `(m, v)` in parameter order.
    pub moments: Option<(Vec<Tensor<T>>, Vec<Tensor<T>>)>,
    pub state: Option<TrainState>,
}

pub const GROUP_PARAM: &str = "param";
pub const GROUP_M: &str = "adam_m";
pub const GROUP_V: &str = "adam_v";

/// Writes an archive. `moments` must follow the parameter order of `params`.
pub fn save<T: Scalar>(
    path: &Path,
    model: &ModelConfig,
    config: &serde_json::Value,
    params: &ParamStore<T>,
    moments: Option<(&[Tensor<T>], &[Tensor<T>])>,
    state: Option<&TrainState>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut push = |group: &str, name: &str, t: &Tensor<T>| {
        let bytes = T::to_le_bytes_vec(t.data());
        entries.push(TensorEntry {
            group: group.into(),
            name: name.into(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    };
    for (_, p) in params.iter() {
        push(GROUP_PARAM, &p.name, &p.value);
    }
    if let Some((m, v)) = moments {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer moments do not match the parameter list".into()));
        }
        for ((_, p), t) in params.iter().zip(m) {
            push(GROUP_M, &p.name, t);
        }
        for ((_, p), t) in params.iter().zip(v) {
            push(GROUP_V, &p.name, t);
        }
    }
    let header = Header {
        version: VERSION,
        dtype: T::DTYPE.into(),
        model: model.clone(),
        config: config.clone(),
        state: state.cloned(),
        tensors: entries,
    };
    // round-tripping through Value sorts object keys
    let header_json = serde_json::to_string(&serde_json::to_value(&header)?)?.into_bytes();
    let mut out = Vec::with_capacity(blob.len() + header_json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never leaves a truncated archive
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn decode<T: Scalar>(dtype: &str, bytes: &[u8]) -> Result<Vec<T>> {
    match dtype {
        d if d == T::DTYPE => Ok(T::from_le_bytes_slice(bytes)),
        "f32" => Ok(f32::from_le_bytes_slice(bytes).into_iter().map(|v| T::c(v as f64)).collect()),
        "f64" => Ok(f64::from_le_bytes_slice(bytes).into_iter().map(T::c).collect()),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

/// Reads and verifies an archive, converting tensors to `T` when the stored dtype differs.
pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint archive"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_bytes = body.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let blob = &body[20 + hlen..];
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(corrupt(&format!("unsupported dtype {other}"))),
    };

    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for e in &header.tensors {
        let (o, l) = (e.offset as usize, e.len as usize);
        let raw = blob.get(o..o + l).ok_or_else(|| corrupt("tensor data out of range"))?;
        if l != e.shape.iter().product::<usize>() * width {
            return Err(corrupt(&format!("tensor {} has inconsistent size", e.name)));
        }
        let t = Tensor::from_vec(&e.shape, decode::<T>(&header.dtype, raw)?)?;
        match e.group.as_str() {
            GROUP_PARAM => params.insert_loaded(&e.name, t),
            GROUP_M => m.push(t),
            GROUP_V => v.push(t),
            g => return Err(corrupt(&format!("unknown tensor group {g}"))),
        }
    }
    let moments = match (m.len(), v.len()) {
        (0, 0) => None,
        (a, b) if a == params.len() && b == params.len() => Some((m, v)),
        _ => return Err(corrupt("optimizer moments incomplete")),
    };
    Ok(Checkpoint { model: header.model, config: header.config, params, moments, state: header.state })
}

/// Rebuilds the model described by the archive and installs its parameters.
pub fn load_model<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Model<T>> {
    let mut model = build_model::<T>(&ckpt.model, 0)?;
    if model.params.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {} parameters, variant {} needs {}",
            ckpt.params.len(),
            ckpt.model.variant,
            model.params.len()
        )));
    }
    for (_, p) in ckpt.params.iter() {
        model.params.assign(&p.name, p.value.clone())?;
    }
    Ok(model)
}
