//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GSSL" | u32 version | u32 len, config text | u64 step
//! | [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! | u64 optimizer step | u32 tensor count
//! | per tensor: u32 len, name | u32 rank | u64 dims… | f64 values…
//! ```
//!
//! Adam moments are stored as tensors named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OptimizerState, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSSL";
pub const VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

/// Position of a [`ChaCha8Rng`] stream.
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
    pub config_echo: String,
    pub step: u64,
    pub rng: RngState,
    pub optimizer_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(
        config_echo: String,
        step: u64,
        rng: &ChaCha8Rng,
        params: &ParamStore,
        optimizer: &OptimizerState,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for ((name, _), m) in params.iter().zip(&optimizer.first_moment) {
            tensors.push((format!("{FIRST_MOMENT}{name}"), m.clone()));
        }
        for ((name, _), v) in params.iter().zip(&optimizer.second_moment) {
            tensors.push((format!("{SECOND_MOMENT}{name}"), v.clone()));
        }
        Self {
            config_echo,
            step,
            rng: RngState::capture(rng),
            optimizer_step: optimizer.step,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Copies every parameter of `params` whose name starts with `prefix`
    /// from the checkpoint; all of them must be present with equal shapes.
    pub fn restore_params(&self, params: &mut ParamStore, prefix: &str) -> Result<()> {
        let names: Vec<String> = params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with(prefix))
            .collect();
        let values = names
            .iter()
            .map(|n| self.tensor(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        for (n, v) in names.iter().zip(values) {
            if params.get(params.id(n).expect("listed")).shape() != v.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "{n}: checkpoint shape {:?}, model shape {:?}",
                    v.shape(),
                    params.get(params.id(n).expect("listed")).shape()
                )));
            }
        }
        for n in &names {
            params.set(n, self.tensor(n)?.clone())?;
        }
        Ok(())
    }

    /// Adam state for `params`, which must match the stored parameters.
    pub fn restore_optimizer(&self, params: &ParamStore) -> Result<OptimizerState> {
        let mut state = OptimizerState::new(params);
        for (k, (name, p)) in params.iter().enumerate() {
            let m = self.tensor(&format!("{FIRST_MOMENT}{name}"))?;
            let v = self.tensor(&format!("{SECOND_MOMENT}{name}"))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "optimizer moments for {name} have the wrong shape"
                )));
            }
            state.first_moment[k] = m.clone();
            state.second_moment[k] = v.clone();
        }
        state.step = self.optimizer_step;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config_echo.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptPayload("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let config_echo = r.string()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let optimizer_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CorruptPayload(format!("{name}: rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::CorruptPayload(format!("{name}: payload shorter than shape {shape:?}")))?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors.iter().any(|(n, _): &(String, Tensor)| n == &name) {
                return Err(Error::CorruptPayload(format!("duplicate tensor {name}")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptPayload(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config_echo,
            step,
            rng: RngState { seed, stream, word_pos },
            optimizer_step,
            tensors,
        })
    }

    /// Writes through a temporary sibling so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::CorruptPayload(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptPayload("name is not UTF-8".into()))
    }
}
