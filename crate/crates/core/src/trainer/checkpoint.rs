//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `SLAMCKPT`, u32 version, length-prefixed
//! fingerprint, length-prefixed JSON metadata, count-prefixed parameter
//! records `(name, shape, f32 payload)`, optimizer block, rng block and an
//! end marker.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerConfig, RunState, TrainConfig, Trainer};
use crate::config::model_fingerprint;
use crate::error::{Result, SlamError};
use crate::model::ModelConfig;
use crate::tensor::NdArray;

const MAGIC: &[u8; 8] = b"SLAMCKPT";
const END: &[u8; 8] = b"SLAMEND\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    state: RunState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<NdArray<f32>>,
    pub v: Vec<NdArray<f32>>,
}

/// Serialized ChaCha stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub state: RunState,
    pub params: Vec<(String, NdArray<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub rng: Option<RngState>,
}

/// How [`Trainer::restore`] treats a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Accept a fingerprint that differs from the model's.
    pub force: bool,
    /// Copy parameters whose name and shape match and leave the rest;
    /// optimizer, rng and run position are not restored.
    pub partial: bool,
}

impl Checkpoint {
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, self.version);
        put_bytes(&mut w, self.fingerprint.as_bytes())?;
        let meta = Meta { model: self.model.clone(), train: self.train.clone(), seed: self.seed, state: self.state.clone() };
        put_bytes(&mut w, serde_json::to_string(&meta)?.as_bytes())?;
        put_u32(&mut w, len_u32(self.params.len())?);
        for (name, value) in &self.params {
            put_bytes(&mut w, name.as_bytes())?;
            put_u32(&mut w, len_u32(value.ndim())?);
            for &d in value.shape() {
                put_u32(&mut w, len_u32(d)?);
            }
            put_f32s(&mut w, value.data());
        }
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                put_bytes(&mut w, serde_json::to_string(&o.config)?.as_bytes())?;
                w.extend_from_slice(&o.step.to_le_bytes());
                put_u32(&mut w, len_u32(o.m.len())?);
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_u32(&mut w, len_u32(m.numel())?);
                    put_f32s(&mut w, m.data());
                    put_f32s(&mut w, v.data());
                }
            }
        }
        match &self.rng {
            None => w.push(0),
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                w.extend_from_slice(&r.stream.to_le_bytes());
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        w.extend_from_slice(END);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(SlamError::Corrupt("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(SlamError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let fingerprint = r.string()?;
        let meta: Meta = serde_json::from_str(&r.string()?).map_err(|e| SlamError::Corrupt(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| SlamError::Corrupt("shape overflow".into()))?;
            params.push((name, NdArray::new(&shape, r.f32s(n)?)?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config: OptimizerConfig =
                    serde_json::from_str(&r.string()?).map_err(|e| SlamError::Corrupt(format!("optimizer config: {e}")))?;
                let step = r.u64()?;
                let count = r.u32()? as usize;
                if count != params.len() {
                    return Err(SlamError::Corrupt("optimizer block does not match parameter count".into()));
                }
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (_, p) in &params {
                    let n = r.u32()? as usize;
                    if n != p.numel() {
                        return Err(SlamError::Corrupt("optimizer moment size mismatch".into()));
                    }
                    m.push(NdArray::new(p.shape(), r.f32s(n)?)?);
                    v.push(NdArray::new(p.shape(), r.f32s(n)?)?);
                }
                Some(OptimizerSnapshot { config, step, m, v })
            }
            t => return Err(SlamError::Corrupt(format!("optimizer block tag {t}"))),
        };
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            t => return Err(SlamError::Corrupt(format!("rng block tag {t}"))),
        };
        if r.take(8)? != END {
            return Err(SlamError::Corrupt("missing end marker".into()));
        }
        if r.pos != bytes.len() {
            return Err(SlamError::Corrupt("trailing bytes after end marker".into()));
        }
        Ok(Checkpoint {
            version,
            fingerprint,
            model: meta.model,
            train: meta.train,
            seed: meta.seed,
            state: meta.state,
            params,
            optimizer,
            rng,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.optimizer.moments();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            fingerprint: model_fingerprint(&self.model.config),
            model: self.model.config.clone(),
            train: self.train.clone(),
            seed: self.seed,
            state: self.state.clone(),
            params: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: Some(OptimizerSnapshot {
                config: self.optimizer.config.clone(),
                step: self.optimizer.step_count(),
                m: m.to_vec(),
                v: v.to_vec(),
            }),
            rng: Some(self.rng_state()),
        }
    }

    /// Loads parameters (and, unless partial, the full training state) from
    /// `ckpt`. Returns the names that could not be matched in partial mode.
    pub fn restore(&mut self, ckpt: &Checkpoint, opts: LoadOptions) -> Result<Vec<String>> {
        let expected = model_fingerprint(&self.model.config);
        if ckpt.fingerprint != expected && !opts.force {
            return Err(SlamError::Fingerprint { found: ckpt.fingerprint.clone(), expected });
        }
        let mut unmatched = Vec::new();
        let mut seen = vec![false; self.store.len()];
        for (name, value) in &ckpt.params {
            match self.store.id_of(name) {
                Some(id) if self.store.value(id).shape() == value.shape() => {
                    *self.store.value_mut(id) = value.clone();
                    seen[id.index()] = true;
                }
                _ if opts.partial => unmatched.push(name.clone()),
                Some(id) => {
                    return Err(SlamError::Shape(format!(
                        "parameter {name}: checkpoint {:?} vs model {:?}",
                        value.shape(),
                        self.store.value(id).shape()
                    )))
                }
                None => return Err(SlamError::Corrupt(format!("unknown parameter {name} in checkpoint"))),
            }
        }
        for (id, p) in self.store.iter() {
            if !seen[id.index()] {
                if !opts.partial {
                    return Err(SlamError::Corrupt(format!("checkpoint lacks parameter {}", p.name)));
                }
                unmatched.push(p.name.clone());
            }
        }
        if opts.partial {
            if !unmatched.is_empty() {
                log::warn!("partial load left {} parameter(s) unmatched: {}", unmatched.len(), unmatched.join(", "));
            }
            return Ok(unmatched);
        }
        if let Some(o) = &ckpt.optimizer {
            self.optimizer.config = o.config.clone();
            self.optimizer.restore(o.step, o.m.clone(), o.v.clone())?;
        }
        if let Some(r) = &ckpt.rng {
            self.set_rng(r);
        }
        self.state = ckpt.state.clone();
        self.seed = ckpt.seed;
        Ok(unmatched)
    }

    /// Rebuilds a trainer exactly as saved.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let opt = ckpt.optimizer.as_ref().map(|o| o.config.clone()).unwrap_or_default();
        let mut t = Trainer::new(ckpt.model.clone(), opt, ckpt.train.clone(), ckpt.seed)?;
        t.restore(ckpt, LoadOptions::default())?;
        Ok(t)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| SlamError::InvalidArgument(format!("length {n} does not fit in u32")))
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(w, len_u32(b.len())?);
    w.extend_from_slice(b);
    Ok(())
}

fn put_f32s(w: &mut Vec<u8>, xs: &[f32]) {
    w.reserve(xs.len() * 4);
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            SlamError::Corrupt(format!("checkpoint truncated: need {n} bytes at offset {}, have {}", self.pos, self.buf.len() - self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SlamError::Corrupt("invalid utf-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| SlamError::Corrupt("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
