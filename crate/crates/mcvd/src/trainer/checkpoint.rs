//! Checkpoint container: magic "MCVDCKPT", version byte, u32-length-prefixed
//! UTF-8 metadata (JSON: step, rng state, config fingerprint, full flat
//! config text), then a named-tensor section. Each tensor: u16 name length,
//! name bytes, u8 rank, u32 dims, little-endian f32 data.
//!
//! Saving a loaded state re-encodes byte-identically: tensor order is the
//! parameter-store insertion order, which the loader preserves.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{McvdError, Result};
use crate::nn::ParamStore;

pub const CKPT_MAGIC: &[u8; 8] = b"MCVDCKPT";
const CKPT_VERSION: u8 = 1;
const MAX_TENSOR_ELEMS: u64 = 1 << 31;

/// Everything needed to resume training bit-exactly or to sample.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub step: usize,
    pub run: RunConfig,
    pub params: ParamStore<f32>,
    pub opt_m: ParamStore<f32>,
    pub opt_v: ParamStore<f32>,
    pub ema: Option<ParamStore<f32>>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    step: u64,
    fingerprint: String,
    rng_seed_hex: String,
    rng_word_pos: String,
    ema: bool,
    config: String,
}

impl CheckpointState {
    /// Parameters to sample with: the EMA mirror when maintained, otherwise
    /// the raw parameters.
    pub fn sampling_params(&self) -> &ParamStore<f32> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            version: CKPT_VERSION as u32,
            step: self.step as u64,
            fingerprint: self.run.fingerprint(),
            rng_seed_hex: self.rng_seed.iter().map(|b| format!("{b:02x}")).collect(),
            rng_word_pos: self.rng_word_pos.to_string(),
            ema: self.ema.is_some(),
            config: self.run.to_flat_text(),
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .map_err(|e| McvdError::numeric(format!("metadata encode: {e}")))?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&[CKPT_VERSION])?;
        f.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&meta_bytes)?;

        let sections: Vec<(&str, &ParamStore<f32>)> = {
            let mut s = vec![
                ("param", &self.params),
                ("opt_m", &self.opt_m),
                ("opt_v", &self.opt_v),
            ];
            if let Some(ema) = &self.ema {
                s.push(("ema", ema));
            }
            s
        };
        let count: usize = sections.iter().map(|(_, st)| st.len()).sum();
        f.write_all(&(count as u32).to_le_bytes())?;
        for (prefix, store) in sections {
            for (name, tensor) in store.iter() {
                let full = format!("{prefix}.{name}");
                let name_bytes = full.as_bytes();
                f.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
                f.write_all(name_bytes)?;
                f.write_all(&[tensor.ndim() as u8])?;
                for &d in tensor.shape() {
                    f.write_all(&(d as u32).to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(tensor.len() * 4);
                for v in tensor.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                f.write_all(&buf)?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        let magic = rd.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(McvdError::BadMagic {
                expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = rd.u8()?;
        if version != CKPT_VERSION {
            return Err(McvdError::Version(version));
        }
        let meta_len = rd.u32()? as usize;
        let meta_bytes = rd.take(meta_len)?;
        let meta: Meta = serde_json::from_slice(meta_bytes)
            .map_err(|e| McvdError::config(format!("metadata decode: {e}")))?;
        let run = RunConfig::from_flat_text(&meta.config)?;
        if run.fingerprint() != meta.fingerprint {
            return Err(McvdError::config(
                "checkpoint fingerprint does not match its embedded config",
            ));
        }
        let mut rng_seed = [0u8; 32];
        if meta.rng_seed_hex.len() != 64 {
            return Err(McvdError::config("rng seed must be 32 hex bytes"));
        }
        for (i, chunk) in meta.rng_seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk)
                .map_err(|_| McvdError::config("rng seed hex is not utf-8"))?;
            rng_seed[i] = u8::from_str_radix(s, 16)
                .map_err(|_| McvdError::config("rng seed hex digit invalid"))?;
        }
        let rng_word_pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| McvdError::config("rng word position invalid"))?;

        let count = rd.u32()? as usize;
        let mut params = ParamStore::new();
        let mut opt_m = ParamStore::new();
        let mut opt_v = ParamStore::new();
        let mut ema = meta.ema.then(ParamStore::new);
        for _ in 0..count {
            let name_len = rd.u16()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| McvdError::config("tensor name is not utf-8"))?
                .to_string();
            let rank = rd.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(rd.u32()? as usize);
            }
            let elems = dims.iter().try_fold(1u64, |acc, &d| {
                acc.checked_mul(d as u64)
                    .filter(|&n| n <= MAX_TENSOR_ELEMS)
                    .ok_or_else(|| McvdError::DimOverflow(format!("tensor {name}: {dims:?}")))
            })?;
            let raw = rd.take(elems as usize * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| McvdError::shape(e.to_string()))?;
            let (prefix, rest) = name.split_once('.').ok_or_else(|| {
                McvdError::config(format!("tensor name {name:?} missing section prefix"))
            })?;
            match prefix {
                "param" => params.insert(rest, tensor),
                "opt_m" => opt_m.insert(rest, tensor),
                "opt_v" => opt_v.insert(rest, tensor),
                "ema" => match &mut ema {
                    Some(store) => store.insert(rest, tensor),
                    None => {
                        return Err(McvdError::config(
                            "ema tensors present but metadata says ema = false",
                        ))
                    }
                },
                other => {
                    return Err(McvdError::config(format!(
                        "unknown tensor section {other:?}"
                    )))
                }
            }
        }
        if !rd.is_empty() {
            return Err(McvdError::Truncated {
                expected: rd.consumed() as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(CheckpointState {
            step: meta.step as usize,
            run,
            params,
            opt_m,
            opt_v,
            ema,
            rng_seed,
            rng_word_pos,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(McvdError::Truncated {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        b.copy_from_slice(self.take(2)?);
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        b.copy_from_slice(self.take(4)?);
        Ok(u32::from_le_bytes(b))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn consumed(&self) -> usize {
        self.pos
    }
}
