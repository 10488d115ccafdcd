//! Binary checkpoints of model weights and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HIFTCKPT" u32 version
//! u32 arch_len, arch as TOML text
//! u32 record_count, then per record:
//!   u32 name_len, name, u8 dtype, u32 ndim, u64 dims[ndim],
//!   u64 byte_len, raw values in the record's dtype
//! ```
//!
//! Model parameters are stored under their own names and optimizer records
//! under `<param>::<slot>`, so a checkpoint restores bit-exactly.

use std::fs;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::model::{Arch, LayeredModel};
use crate::optim::OptimizerState;
use crate::tensor::{numel, DType, Tensor};

const MAGIC: &[u8; 8] = b"HIFTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &LayeredModel, state: Option<&OptimizerState>) -> Self {
        Checkpoint {
            arch: model.arch().clone(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            optimizer: state.map(OptimizerState::to_records).unwrap_or_default(),
        }
    }

    pub fn restore_model(&self) -> Result<LayeredModel> {
        LayeredModel::from_tensors(&self.arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = toml::to_string(&self.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_len(&mut out, arch.len())?;
        out.extend_from_slice(arch.as_bytes());
        put_len(&mut out, self.params.len() + self.optimizer.len())?;
        for (name, t) in self.params.iter().chain(&self.optimizer) {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            put_len(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.size_bytes() as u64).to_le_bytes());
            for &v in t.data() {
                match t.dtype() {
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let arch_len = r.u32()? as usize;
        let arch_text =
            std::str::from_utf8(r.take(arch_len)?).map_err(|e| Error::Checkpoint(format!("arch is not utf-8: {e}")))?;
        let arch: Arch = toml::from_str(arch_text).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let count = r.u32()? as usize;
        let (mut params, mut optimizer) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("record name is not utf-8: {e}")))?;
            let code = r.u8()?;
            let dtype =
                DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64()? as usize;
            if shape.is_empty() || byte_len != numel(&shape) * dtype.size_bytes() {
                return Err(Error::Checkpoint(format!("record {name} has inconsistent size")));
            }
            let raw = r.take(byte_len)?;
            let data: Vec<f64> = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                    .collect(),
                DType::F16 => raw
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().expect("chunk of 2")).to_f64())
                    .collect(),
            };
            let t = Tensor::new(shape, dtype, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if name.contains("::") {
                optimizer.push((name, t));
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            arch,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
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
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
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
}
