//! Binary model checkpoints.
//!
//! Layout, little-endian throughout: the 8-byte magic `TNETCKPT`, a `u32`
//! format version, a length-prefixed canonical config text block, a `u32`
//! array count, then each named array as `name (u16 length + bytes)`,
//! `dtype u8` (0 = f32, 1 = f64, 2 = i64), `rank u8`, one `u64` per
//! dimension, and the raw values. Parameters, Adam moments, and scheduler
//! state are all plain named arrays, so `save(load(save(x)))` is
//! byte-identical and a restored model resumes training bit-exactly.

use std::path::Path;

use thiserror::Error;

use crate::io::config::{canonical_config_text, parse_config_text, FullConfig};
use crate::model::Model;
use crate::params::ParamStore;
use crate::train::{OptimState, TrainConfig, TrainState};
use crate::Real;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a TNETCKPT file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Raw values of one named array.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::I64(_) => 2,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: ArrayData,
}

impl NamedArray {
    /// Build an array, checking that the dimensions multiply out to the
    /// value count (rank 0 means a single scalar) and fit the wire format.
    pub fn new(name: &str, dims: Vec<u64>, data: ArrayData) -> Result<Self, CheckpointError> {
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!("array name too long: {name}")));
        }
        if dims.len() > u8::MAX as usize {
            return Err(CheckpointError::Malformed(format!("rank {} exceeds 255", dims.len())));
        }
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed("dimension overflow".into()))?;
        if numel != data.len() as u64 {
            return Err(CheckpointError::Malformed(format!(
                "array {name}: {} values but dims {:?} imply {numel}",
                data.len(),
                dims
            )));
        }
        Ok(Self { name: name.to_string(), dims, data })
    }

    /// Number of values the dimensions imply; the empty product (rank 0) is 1.
    pub fn numel(&self) -> u64 {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Canonical `key = value` text; enough to rebuild the architecture.
    pub config_text: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        let cfg_len: u32 = cfg.len().try_into().expect("config text fits in u32");
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(cfg);
        let count: u32 = self.arrays.len().try_into().expect("array count fits in u32");
        out.extend_from_slice(&count.to_le_bytes());
        for array in &self.arrays {
            let name = array.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(array.data.dtype_code());
            out.push(array.dims.len() as u8);
            for &d in &array.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &array.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let cfg_len = r.u32("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(cfg_len, "config text")?)
            .map_err(|_| CheckpointError::Malformed("config text is not UTF-8".into()))?
            .to_string();
        let count = r.u32("array count")?;
        let mut arrays = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name_len = r.u16("array name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "array name")?)
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dimension")?);
            }
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed("dimension overflow".into()))?;
            let data = match dtype {
                0 => ArrayData::F32(r.elems(numel, "f32 values", f32::from_le_bytes)?),
                1 => ArrayData::F64(r.elems(numel, "f64 values", f64::from_le_bytes)?),
                2 => ArrayData::I64(r.elems(numel, "i64 values", i64::from_le_bytes)?),
                other => return Err(CheckpointError::BadDtype(other)),
            };
            arrays.push(NamedArray { name, dims, data });
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after the last array",
                buf.len() - r.pos
            )));
        }
        Ok(Self { version, config_text, arrays })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn elems<T, const W: usize>(
        &mut self,
        numel: u64,
        what: &'static str,
        decode: fn([u8; W]) -> T,
    ) -> Result<Vec<T>, CheckpointError> {
        let bytes = numel
            .checked_mul(W as u64)
            .filter(|&b| b <= (self.buf.len() - self.pos) as u64)
            .ok_or(CheckpointError::Truncated(what))?;
        let raw = self.take(bytes as usize, what)?;
        Ok(raw.chunks_exact(W).map(|c| decode(c.try_into().unwrap())).collect())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Package a model (plus optional optimizer/scheduler state and run
/// metrics) as a checkpoint ready to serialize.
pub fn build_checkpoint(
    model: &Model,
    train: &TrainConfig,
    state: Option<&TrainState>,
    metrics: Vec<(String, String)>,
) -> Checkpoint {
    let full = FullConfig {
        model: model.config.clone(),
        train: train.clone(),
        init_seed: model.params.rng_seed,
        metrics,
    };
    let mut arrays = Vec::new();
    let real_array = |name: &str, shape: &[usize], values: &[Real]| {
        let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        let data = ArrayData::F64(values.iter().map(|&v| v as f64).collect());
        NamedArray::new(name, dims, data).expect("shape matches values")
    };
    for entry in model.params.entries() {
        arrays.push(real_array(&format!("param.{}", entry.name), &entry.shape, &entry.values));
    }
    if let Some(state) = state {
        let scalar_i64 = |name: &str, v: i64| {
            NamedArray::new(name, Vec::new(), ArrayData::I64(vec![v])).expect("scalar")
        };
        arrays.push(scalar_i64("optim.step", state.opt.step as i64));
        for (i, entry) in model.params.entries().iter().enumerate() {
            arrays.push(real_array(&format!("optim.m.{}", entry.name), &entry.shape, &state.opt.m[i]));
            arrays.push(real_array(&format!("optim.v.{}", entry.name), &entry.shape, &state.opt.v[i]));
        }
        arrays.push(scalar_i64("sched.epoch", state.epoch as i64));
        arrays.push(real_array("sched.val_history", &[state.val_history.len()], &state.val_history));
        if let Some(ema) = state.ema_energy {
            arrays.push(real_array("sched.ema_energy", &[], &[ema]));
        }
    }
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config_text: canonical_config_text(&full),
        arrays,
    }
}

/// A checkpoint turned back into live objects.
pub struct Restored {
    pub model: Model,
    pub config: FullConfig,
    pub train_state: Option<TrainState>,
}

/// Rebuild the model (and training state, when present) from a checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<Restored, CheckpointError> {
    let malformed = |msg: String| CheckpointError::Malformed(msg);
    let config =
        parse_config_text(&ckpt.config_text).map_err(|e| malformed(format!("config block: {e}")))?;

    let real_values = |array: &NamedArray| -> Result<Vec<Real>, CheckpointError> {
        match &array.data {
            ArrayData::F64(v) => Ok(v.iter().map(|&x| x as Real).collect()),
            other => Err(malformed(format!(
                "array {} has dtype {}, expected f64",
                array.name,
                other.dtype_name()
            ))),
        }
    };

    let mut params = ParamStore::new(config.init_seed);
    for array in &ckpt.arrays {
        let Some(name) = array.name.strip_prefix("param.") else { continue };
        let shape: Vec<usize> = array.dims.iter().map(|&d| d as usize).collect();
        params
            .add(name, shape, real_values(array)?)
            .map_err(|e| malformed(e.to_string()))?;
    }
    let model = Model::from_parts(config.model.clone(), params)
        .map_err(|e| malformed(format!("parameters do not match the config: {e}")))?;

    let train_state = match ckpt.get("optim.step") {
        None => None,
        Some(step_array) => {
            let step = match &step_array.data {
                ArrayData::I64(v) if v.len() == 1 => v[0] as u64,
                _ => return Err(malformed("optim.step must be a single i64".into())),
            };
            let mut m = Vec::new();
            let mut v = Vec::new();
            for entry in model.params.entries() {
                for (slot, prefix) in [(&mut m, "optim.m."), (&mut v, "optim.v.")] {
                    let name = format!("{prefix}{}", entry.name);
                    let array = ckpt
                        .get(&name)
                        .ok_or_else(|| malformed(format!("missing array {name}")))?;
                    let values = real_values(array)?;
                    if values.len() != entry.values.len() {
                        return Err(malformed(format!("array {name} has the wrong length")));
                    }
                    slot.push(values);
                }
            }
            let epoch = match ckpt.get("sched.epoch").map(|a| &a.data) {
                Some(ArrayData::I64(v)) if v.len() == 1 => v[0] as usize,
                _ => return Err(malformed("missing or malformed sched.epoch".into())),
            };
            let val_history = match ckpt.get("sched.val_history") {
                Some(a) => real_values(a)?,
                None => return Err(malformed("missing sched.val_history".into())),
            };
            let ema_energy = match ckpt.get("sched.ema_energy") {
                None => None,
                Some(a) => {
                    let values = real_values(a)?;
                    if values.len() != 1 {
                        return Err(malformed("sched.ema_energy must be a scalar".into()));
                    }
                    Some(values[0])
                }
            };
            Some(TrainState { opt: OptimState { step, m, v }, epoch, val_history, ema_energy })
        }
    };

    Ok(Restored { model, config, train_state })
}
