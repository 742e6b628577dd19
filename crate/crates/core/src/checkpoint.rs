//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "UIEUNFCK"
//! version      u32
//! dtype        u8       0 = f32, 1 = f64
//! seed         u64
//! step         u64
//! config       u32 length + UTF-8 JSON of the model config
//! params       u32 count, then per parameter (sorted by name):
//!                u32 name length + UTF-8 name
//!                u32 rank + rank x u64 dims
//!                raw little-endian values
//! optimizer    u8 present flag; when 1:
//!                u64 optimizer step
//!                u32 count, then per parameter: name, first moment, second moment
//!                (moments use the same rank/dims/values encoding)
//! ```
//!
//! Encoding is a pure function of the contents, so save, load and save again
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"UIEUNFCK";
pub const SCHEMA_VERSION: u32 = 1;

/// Adam moment estimates keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub dtype: DType,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, optimizer: Option<OptimizerState>) -> Result<Self> {
        let params = model
            .store
            .iter()
            .map(|(name, var)| Ok((name.clone(), var.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: model.config.clone(),
            seed: model.seed,
            step,
            dtype: model.dtype(),
            params,
            optimizer,
        })
    }

    /// Rebuilds the model and overwrites every parameter with the stored values.
    pub fn to_model(&self) -> Result<Model> {
        let model = Model::build(&self.config, self.seed, self.dtype)?;
        let expected: Vec<&String> = model.store.iter().map(|(n, _)| n).collect();
        let stored: Vec<&String> = self.params.keys().collect();
        if expected != stored {
            return Err(Error::Checkpoint(
                "parameter names do not match the stored model config".into(),
            ));
        }
        for (name, var) in model.store.iter() {
            let t = &self.params[name];
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.push(dtype_code(self.dtype)?);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.config)?.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_tensor(&mut out, t, self.dtype)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                out.extend_from_slice(&(opt.first.len() as u32).to_le_bytes());
                for (name, m) in &opt.first {
                    let v = opt
                        .second
                        .get(name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
                    put_bytes(&mut out, name.as_bytes());
                    put_tensor(&mut out, m, self.dtype)?;
                    put_tensor(&mut out, v, self.dtype)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        };
        let seed = r.u64()?;
        let step = r.u64()?;
        let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            params.insert(name, r.tensor(dtype)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let opt_step = r.u64()?;
                let n = r.u32()?;
                let mut first = BTreeMap::new();
                let mut second = BTreeMap::new();
                for _ in 0..n {
                    let name = r.string()?;
                    first.insert(name.clone(), r.tensor(dtype)?);
                    second.insert(name, r.tensor(dtype)?);
                }
                Some(OptimizerState {
                    step: opt_step,
                    first,
                    second,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            seed,
            step,
            dtype,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary sibling file and renames, so a crash never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
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
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor, dtype: DType) -> Result<()> {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let flat = t.to_dtype(dtype)?.flatten_all()?;
    match dtype {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
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

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn tensor(&mut self, dtype: DType) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            DType::F32 => {
                let raw = self.take(n * 4)?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            _ => {
                let raw = self.take(n * 8)?;
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
        };
        Ok(t)
    }
}
