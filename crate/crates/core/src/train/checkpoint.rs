//! Binary checkpoint format.
//!
//! ```text
//! "MFLW"            magic
//! u32               format version
//! [u8; 32]          SHA-256 of the resolved run configuration
//! u64               optimizer step
//! [u8; 32] u64 u128 RNG seed, stream and word position
//! u32 + bytes       resolved configuration (TOML text)
//! u32               tensor count
//! per tensor:
//!   u16 + bytes     name
//!   u8              dtype code (1 = f64)
//!   u8              rank
//!   u64 * rank      dims
//!   f64 * len       data
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFLW";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub step: u64,
    pub rng: RngState,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let cfg_len = u32::try_from(self.config.len()).map_err(|_| Error::Checkpoint("config too large".into()))?;
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let config_digest = r.array()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let cfg_len = r.u32()? as usize;
        let config = r.string(cfg_len)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor `{name}`: unknown dtype code {dtype}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: size overflow")))?;
            let bytes = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config_digest,
            step,
            rng,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }
}
