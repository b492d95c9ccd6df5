//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u32` version, a `u32` length
//! and that many bytes of JSON header (field config, frame count, tensor
//! shapes, optional training config), then every parameter tensor as
//! little-endian `f64` in [`FieldSet::params`] order (network layers, then
//! the latent table, then `log s`). A trainer checkpoint continues with the
//! iteration, the Adam step count and moments, and the RNG position.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::scene::{FieldConfig, FieldSet};

use super::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UB4DCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    frames: usize,
    field: FieldConfig,
    shapes: Vec<(usize, usize)>,
    train: Option<TrainConfig>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &Matrix) {
        for x in m.as_slice() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

fn encode(fs: &FieldSet, trainer: Option<&Trainer>) -> Result<Vec<u8>> {
    let params = fs.params();
    let header = Header {
        frames: fs.frame_count(),
        field: fs.config.clone(),
        shapes: params.iter().map(|p| p.shape()).collect(),
        train: trainer.map(|t| t.config.clone()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(json.len() as u32);
    w.0.extend_from_slice(&json);
    for p in &params {
        w.matrix(p);
    }
    if let Some(t) = trainer {
        w.u64(t.iteration as u64);
        let adam = &t.optimizer;
        w.u64(adam.t);
        w.u32(adam.m.len() as u32);
        for m in adam.m.iter().chain(&adam.v) {
            w.matrix(m);
        }
        w.0.extend_from_slice(&t.rng.get_seed());
        w.u64(t.rng.get_stream());
        w.0.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());
    }
    Ok(w.0)
}

fn decode(bytes: &[u8]) -> Result<(FieldSet, Option<Trainer>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut fs = FieldSet::zeros(header.field, header.frames)?;
    let expected: Vec<(usize, usize)> = fs.params().iter().map(|p| p.shape()).collect();
    if expected != header.shapes {
        return Err(Error::Checkpoint(
            "tensor shapes do not match the field configuration".into(),
        ));
    }
    for p in fs.params_mut() {
        let (rows, cols) = p.shape();
        *p = r.matrix(rows, cols)?;
    }
    let trainer = match header.train {
        None => None,
        Some(config) => {
            let iteration = r.u64()? as usize;
            let mut optimizer = Adam::new(config.beta1, config.beta2, config.epsilon);
            optimizer.t = r.u64()?;
            let k = r.u32()? as usize;
            if k != 0 && k != expected.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            for buf in [&mut optimizer.m, &mut optimizer.v] {
                for &(rows, cols) in &expected[..k] {
                    buf.push(r.matrix(rows, cols)?);
                }
            }
            let mut rng = ChaCha8Rng::from_seed(r.array()?);
            rng.set_stream(r.u64()?);
            rng.set_word_pos(u128::from_le_bytes(r.array()?));
            Some(Trainer {
                config,
                fields: fs.clone(),
                optimizer,
                iteration,
                rng,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((fs, trainer))
}

/// Write only the fields.
pub fn save_fields(fs: &FieldSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(fs, None)?)?;
    Ok(())
}

/// Read the fields of a field-only or trainer checkpoint.
pub fn load_fields(path: &Path) -> Result<FieldSet> {
    Ok(decode(&std::fs::read(path)?)?.0)
}

impl Trainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.fields, Some(self))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)?
            .1
            .ok_or_else(|| Error::Checkpoint("no training state in this checkpoint".into()))
    }

    /// Fields, config, optimizer moments, iteration and RNG position.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
