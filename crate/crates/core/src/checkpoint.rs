//! Training checkpoints and their binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BPLM"            magic
//! u32               format version
//! u64 + bytes       header: UTF-8 TOML with the model config, schedule,
//!                   global step, objective history, seed and AdamW settings
//! u32               tensor count
//! per tensor:
//!   u32 + bytes     name
//!   u32             rank
//!   u64 × rank      dims
//!   f64 × numel     payload
//!   u32             CRC32 of the payload bytes
//! u32               CRC32 of everything above
//! ```
//!
//! Tensors are named `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::objectives::Objective;
use crate::optim::{AdamWConfig, AdamWState, WsdSchedule};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BPLM";
pub const FORMAT_VERSION: u32 = 1;

/// A contiguous stretch of training under one objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub objective: Objective,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Parameters,
    pub optimizer: AdamWState,
    /// Steps completed under `schedule`.
    pub step: u64,
    pub schedule: WsdSchedule,
    /// Every phase this model has been trained through, oldest first,
    /// including phases of the base model for continued pretraining.
    pub history: Vec<PhaseRecord>,
    /// Run seed; masking randomness is derived from it and the step index.
    pub seed: u64,
}

impl Checkpoint {
    /// True once the schedule's decay window has run to completion.
    pub fn is_decayed(&self) -> bool {
        self.schedule.decay_steps > 0 && self.step >= self.schedule.total_steps
    }

    pub fn is_complete(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.params.check_against(&self.model)?;
        self.schedule.validate()?;
        if self.step > self.schedule.total_steps {
            return Err(Error::Checkpoint(format!(
                "step {} beyond schedule total {}",
                self.step, self.schedule.total_steps
            )));
        }
        for (name, t) in self.params.iter() {
            for (kind, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
                if moments.get(name).map(Vec::len) != Some(t.numel()) {
                    return Err(Error::Checkpoint(format!("adam.{kind} for '{name}' missing or misshapen")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    // TOML integers are signed 64-bit, so the seed travels as text.
    seed: String,
    adam_steps: u64,
    schedule: WsdSchedule,
    adam: AdamWConfig,
    model: ModelConfig,
    #[serde(default)]
    history: Vec<PhaseRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    let start = out.len();
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    put_u32(out, crc);
}

/// Serialises a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let header = Header {
        step: ckpt.step,
        seed: ckpt.seed.to_string(),
        adam_steps: ckpt.optimizer.step_count,
        schedule: ckpt.schedule,
        adam: ckpt.optimizer.config,
        model: ckpt.model.clone(),
        history: ckpt.history.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, 3 * ckpt.params.len() as u32);
    for (name, t) in ckpt.params.iter() {
        put_tensor(&mut out, &format!("param/{name}"), t.shape(), t.data());
    }
    for (prefix, moments) in [("adam.m", &ckpt.optimizer.m), ("adam.v", &ckpt.optimizer.v)] {
        for (name, t) in ckpt.params.iter() {
            put_tensor(&mut out, &format!("{prefix}/{name}"), t.shape(), &moments[name]);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("{what} length {n} exceeds file size")))
    }
}

/// Parses bytes written by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let header_len = r.len("header")?;
    let text = std::str::from_utf8(r.take(header_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let seed = header
        .seed
        .parse()
        .map_err(|_| Error::Checkpoint(format!("header: bad seed '{}'", header.seed)))?;

    let count = r.u32()?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible shape {shape:?}")))?;
        let payload = r.take(numel * 8)?;
        let crc = r.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum { name });
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let body_end = r.pos;
    let file_crc = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if crc32fast::hash(&bytes[..body_end]) != file_crc {
        return Err(Error::Checksum { name: "<file>".into() });
    }

    let mut params = Parameters::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (full, t) in tensors {
        match full.split_once('/') {
            Some(("param", name)) => params.insert(name, t),
            Some(("adam.m", name)) => {
                m.insert(name.to_string(), t.into_data());
            }
            Some(("adam.v", name)) => {
                v.insert(name.to_string(), t.into_data());
            }
            _ => return Err(Error::Checkpoint(format!("unknown tensor {full}"))),
        }
    }
    let ckpt = Checkpoint {
        model: header.model,
        params,
        optimizer: AdamWState { config: header.adam, m, v, step_count: header.adam_steps },
        step: header.step,
        schedule: header.schedule,
        history: header.history,
        seed,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

/// Writes atomically: the bytes go to a sibling temporary file that is then
/// renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, AttentionMode};

    fn sample() -> Checkpoint {
        let model = ModelConfig { layers: 1, embed_dim: 8, ffn_dim: 12, heads: 2, kv_heads: 1, vocab_size: 10, max_seq_len: 8, ..ModelConfig::desk() };
        let params = init_params(&model, 3).unwrap();
        let mut optimizer = AdamWState::new(AdamWConfig::default(), &params);
        for (i, m) in optimizer.m.values_mut().enumerate() {
            m.iter_mut().for_each(|x| *x = 0.1 * i as f64 + 1e-300);
        }
        optimizer.step_count = 7;
        Checkpoint {
            model,
            params,
            optimizer,
            step: 7,
            schedule: WsdSchedule::new(1e-3, 2, 10, 1).unwrap(),
            history: vec![PhaseRecord { objective: Objective::Clm, steps: 7 }],
            seed: u64::MAX,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let tokens = [3, 4, 5, 6];
        let pad = [false; 4];
        let a = forward(&c.params, &c.model, &tokens, AttentionMode::Causal, &pad).unwrap();
        let b = forward(&back.params, &back.model, &tokens, AttentionMode::Causal, &pad).unwrap();
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        // The last tensor's payload ends 8 bytes before the file CRC.
        let mut flipped = bytes.clone();
        let i = bytes.len() - 4 - 4 - 3;
        flipped[i] ^= 0x40;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum { .. })));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(Error::Checkpoint(m)) if m.contains("version")));

        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
    }

    #[test]
    fn decayed_status_follows_schedule_position() {
        let mut c = sample();
        assert!(!c.is_decayed());
        c.step = 10;
        assert!(c.is_decayed());
        c.schedule = c.schedule.without_decay();
        assert!(!c.is_decayed());
    }
}
