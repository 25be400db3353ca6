//! Single-file binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, a length-prefixed JSON header
//! (scalar type, architecture, training config, counters and tensor shapes),
//! the raw little-endian parameter and optimizer-moment data, and a trailing
//! CRC-32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ArchConfig, ModelBundle, Network, ParamSet};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"STXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub bundle: ModelBundle<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub format_version: u32,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fresh checkpoint of an untrained bundle.
    pub fn initial(bundle: ModelBundle<T>, config: TrainConfig) -> Self {
        let optimizer = OptimizerState::new(&bundle);
        Self { bundle, optimizer, config, epoch: 0, format_version: FORMAT_VERSION }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    arch: ArchConfig,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    rng_seed: u64,
    /// Tensor shapes of G1, G2, D1, D2 and S.
    shapes: Vec<Vec<Vec<usize>>>,
    optimizer_steps: Vec<u64>,
}

fn write_values<T: Scalar>(out: &mut Vec<u8>, vals: &[T]) {
    for &v in vals {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let b = &ckpt.bundle;
    let header = Header {
        dtype: T::DTYPE.into(),
        arch: b.arch.clone(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        step: b.step,
        rng_seed: b.rng_seed,
        shapes: b.groups().iter().map(|g| g.tensors.iter().map(|t| t.shape().to_vec()).collect()).collect(),
        optimizer_steps: ckpt.optimizer.groups().iter().map(|o| o.step).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.format_version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for g in b.groups() {
        for t in &g.tensors {
            write_values(&mut out, t.data());
        }
    }
    for o in ckpt.optimizer.groups() {
        for (m, v) in o.m.iter().zip(&o.v) {
            write_values(&mut out, m);
            write_values(&mut out, v);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(footer.try_into().expect("4 bytes")) {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::CorruptCheckpoint(format!("stored as {}, loading as {}", header.dtype, T::DTYPE)));
    }
    if header.shapes.len() != 5 || header.optimizer_steps.len() != 5 {
        return Err(Error::CorruptCheckpoint("expected five parameter groups".into()));
    }
    let nets = [Network::Generator, Network::Generator, Network::Discriminator, Network::Discriminator, Network::Segmentor];
    let mut groups = Vec::with_capacity(5);
    for (shapes, network) in header.shapes.iter().zip(nets) {
        let mut tensors = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n = s.iter().product();
            tensors.push(Tensor::from_vec(s, r.values(n)?)?);
        }
        let set = ParamSet { network, tensors };
        set.check_layout(&header.arch).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        groups.push(set);
    }
    let mut opts = Vec::with_capacity(5);
    for (g, &step) in groups.iter().zip(&header.optimizer_steps) {
        let mut m = Vec::with_capacity(g.tensors.len());
        let mut v = Vec::with_capacity(g.tensors.len());
        for t in &g.tensors {
            m.push(r.values(t.len())?);
            v.push(r.values(t.len())?);
        }
        opts.push(Adam { step, m, v });
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut groups = groups.into_iter();
    let mut opts = opts.into_iter();
    let mut next = || groups.next().expect("five groups");
    let bundle = ModelBundle {
        g1: next(),
        g2: next(),
        d1: next(),
        d2: next(),
        s: next(),
        arch: header.arch,
        step: header.step,
        rng_seed: header.rng_seed,
    };
    let mut next_opt = || opts.next().expect("five groups");
    let optimizer =
        OptimizerState { g1: next_opt(), g2: next_opt(), d1: next_opt(), d2: next_opt(), s: next_opt() };
    Ok(Checkpoint { bundle, optimizer, config: header.config, epoch: header.epoch, format_version: version })
}

pub fn save<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::CorruptCheckpoint(r) => Error::CorruptCheckpoint(format!("{}: {r}", path.display())),
        other => other,
    })
}
