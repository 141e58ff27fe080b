//! Binary checkpoints of a full training state.
//!
//! Layout: the 8-byte magic `SPRCCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every tensor
//! payload back to back as little-endian floats of the manifest's dtype.
//! Tensor names are the model paths (`prompt_gen/...`), the EMA shadow under
//! `ema/`, and the AdamW moments under `optim/m/` and `optim/v/`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::encoders::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Mat, Real};
use crate::training::{AdamState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SPRCCKPT";
pub const FORMAT_VERSION: u32 = 1;

const EMA: &str = "ema/";
const OPT_M: &str = "optim/m/";
const OPT_V: &str = "optim/v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string, since JSON numbers cannot hold a `u128`.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    dtype: String,
    step: u64,
    adam_t: u64,
    config: TrainConfig,
    model: ModelConfig,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn entries<'a, T: Real>(prefix: &str, set: &'a ParamSet<T>) -> impl Iterator<Item = (String, &'a Mat<T>)> + 'a {
    let prefix = prefix.to_string();
    set.iter().map(move |(k, m)| (format!("{prefix}{k}"), m))
}

/// Serializes a training state into checkpoint bytes.
pub fn encode<T: Real>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let tensors: Vec<(String, &Mat<T>)> = entries("", &state.params.set)
        .chain(entries(EMA, &state.ema))
        .chain(entries(OPT_M, &state.adam.m))
        .chain(entries(OPT_V, &state.adam.v))
        .collect();
    let manifest = Manifest {
        dtype: T::DTYPE.to_string(),
        step: state.step,
        adam_t: state.adam.t,
        config: state.config.clone(),
        model: state.params.config.clone(),
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        tensors: tensors.iter().map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows(), cols: m.cols() }).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(json.len() + 20 + tensors.iter().map(|(_, m)| m.len() * T::BYTES).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for &x in m.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated {
        expected: at.saturating_add(n),
        found: bytes.len(),
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_payload<T: Real, S: Real>(raw: &[u8], n: usize) -> Vec<T> {
    (0..n).map(|i| T::from_f64_lossy(S::read_le(&raw[i * S::BYTES..]).to_f64().unwrap_or(f64::NAN))).collect()
}

fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut at, len)?)?;
    Ok((manifest, at))
}

/// Stored dtype tag and training configuration, without reading tensors.
pub fn read_header(bytes: &[u8]) -> Result<(String, TrainConfig)> {
    let (m, _) = read_manifest(bytes)?;
    Ok((m.dtype, m.config))
}

/// Parses checkpoint bytes. Payloads stored in the other precision are
/// converted to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<TrainState<T>> {
    let (manifest, mut at) = read_manifest(bytes)?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        d => return Err(Error::Format(format!("unknown dtype {d:?}"))),
    };

    let (mut params, mut ema, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new(), ParamSet::new());
    for e in &manifest.tensors {
        let n = e.rows.checked_mul(e.cols).ok_or_else(|| Error::Format(format!("tensor {} is too large", e.name)))?;
        let raw = take(bytes, &mut at, n * width)?;
        let data: Vec<T> = if width == 4 { read_payload::<T, f32>(raw, n) } else { read_payload::<T, f64>(raw, n) };
        let mat = Mat::from_vec(e.rows, e.cols, data)?;
        if let Some(k) = e.name.strip_prefix(EMA) {
            ema.insert(k, mat);
        } else if let Some(k) = e.name.strip_prefix(OPT_M) {
            m.insert(k, mat);
        } else if let Some(k) = e.name.strip_prefix(OPT_V) {
            v.insert(k, mat);
        } else {
            params.insert(e.name.clone(), mat);
        }
    }
    if at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - at)));
    }
    let word_pos: u128 =
        manifest.rng.word_pos.parse().map_err(|_| Error::Format(format!("bad rng position {:?}", manifest.rng.word_pos)))?;
    let mut rng = ChaCha8Rng::from_seed(manifest.rng.seed);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        config: manifest.config,
        params: ModelParams { config: manifest.model, set: params },
        ema,
        adam: AdamState { m, v, t: manifest.adam_t },
        step: manifest.step,
        rng,
    })
}

/// Writes a checkpoint atomically.
pub fn save<T: Real>(path: &Path, state: &TrainState<T>) -> Result<()> {
    write_atomic(path, &encode(state)?)
}

pub fn load<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;

    fn state() -> TrainState<f64> {
        let mut model = ModelConfig::new(10, 3, 4);
        model.d_model = 8;
        model.d_embed = 8;
        model.d_ff = 8;
        model.mlp_hidden = 8;
        model.inv_hidden = 8;
        model.prompt_length = 2;
        let cfg = TrainConfig { prompt_length: 2, steps: 10, ..TrainConfig::default() };
        TrainState::init(cfg, model).unwrap()
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let s = state();
        let bytes = encode(&s).unwrap();
        let back: TrainState<f64> = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&state()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode::<f64>(&newer), Err(Error::Version { found: 2, expected: 1 })));
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        assert!(matches!(decode::<f64>(&bytes[..5]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn loads_into_other_precision() {
        let s = state();
        let back: TrainState<f32> = decode(&encode(&s).unwrap()).unwrap();
        let w = s.params.set.get("target_head/w").unwrap();
        let w32 = back.params.set.get("target_head/w").unwrap();
        assert_eq!(w32.data()[0], w.data()[0] as f32);
    }
}
