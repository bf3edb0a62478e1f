//! Binary checkpoints: a JSON metadata block followed by named f32 arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMRL" | version u32 | meta_len u64 | meta (UTF-8 JSON)
//! array_count u64 | per array: name_len u64 | name | ndim u64 | dims u64.. | data f32..
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::Tensor2;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"MMRL";
pub const VERSION: u32 = 1;

/// Upper bound on any length field, to reject corrupt headers before allocating.
const MAX_LEN: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub alpha_ema: f64,
    pub nmd_des_min: f64,
    pub nmd_des_max: f64,
    /// True for single-query ablation runs.
    pub ablation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        let meta = CheckpointMeta {
            task: tr.task.clone(),
            model: tr.model_config.clone(),
            train: tr.config.clone(),
            seed: tr.config.seed,
            env_steps: tr.env_steps,
            updates: tr.updates,
            alpha_ema: tr.alpha_ema,
            nmd_des_min: tr.config.nmd_des_min,
            nmd_des_max: tr.config.nmd_des_max,
            ablation: tr.config.single_query,
        };
        Self::from_model(&tr.model, meta)
    }

    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        let arrays = model
            .tensors()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name,
                dims: vec![t.rows() as u64, t.cols() as u64],
                data: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self { meta, arrays }
    }

    /// Rebuilds the model described by the metadata and loads every array.
    pub fn to_model(&self) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::init(&mut rng, &self.meta.model, self.meta.task.obs_width(), self.meta.task.agents)?;
        let tensors = self
            .arrays
            .iter()
            .map(|a| {
                let (rows, cols) = match a.dims.as_slice() {
                    [r, c] => (*r as usize, *c as usize),
                    [n] => (1, *n as usize),
                    _ => return Err(Error::Format(format!("array `{}` has {} dimensions", a.name, a.dims.len()))),
                };
                let data = a.data.iter().map(|&v| v as f64).collect();
                Ok((a.name.clone(), Tensor2::from_vec(rows, cols, data)))
            })
            .collect::<Result<Vec<_>>>()?;
        model.load_tensors(&tensors)?;
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.arrays.len() as u64).to_le_bytes())?;
        for a in &self.arrays {
            let expected: u64 = a.dims.iter().product();
            if expected != a.data.len() as u64 {
                return Err(Error::Format(format!(
                    "array `{}` holds {} values for dims {:?}",
                    a.name,
                    a.data.len(),
                    a.dims
                )));
            }
            w.write_all(&(a.name.len() as u64).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&(a.dims.len() as u64).to_le_bytes())?;
            for d in &a.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for v in &a.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an MMRL checkpoint".into()));
        }
        let mut v = [0u8; 4];
        read_exact(r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let meta_len = read_len(r)?;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let count = read_len(r)?;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = read_len(r)?;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = read_len(r)?;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(read_len(r)? as u64);
            }
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= MAX_LEN)
                .ok_or_else(|| Error::Format(format!("array `{name}` is too large")))?;
            let mut bytes = vec![0u8; n as usize * 4];
            read_exact(r, &mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, dims, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last array".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_len(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let n = u64::from_le_bytes(b);
    if n > MAX_LEN {
        return Err(Error::Format(format!("length field {n} exceeds the format limit")));
    }
    Ok(n as usize)
}
