//! Dense row-major tensors.
//!
//! Values are held in an `f64` buffer but always quantized to the tensor's
//! storage dtype, so an `F32` tensor only ever holds values exactly
//! representable in `f32`, and an `F16` tensor only values representable in
//! IEEE binary16. Byte accounting uses the storage dtype.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    /// Half precision, simulated by round-tripping through binary16.
    F16,
}

impl DType {
    pub const fn size_bytes(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            DType::F64 => x,
            DType::F32 => x as f32 as f64,
            DType::F16 => half::f16::from_f64(x).to_f64(),
        }
    }

    pub fn quantize_slice(self, xs: &mut [f64]) {
        if self != DType::F64 {
            for x in xs {
                *x = self.quantize(*x);
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
            DType::F16 => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            2 => Some(DType::F16),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    trainable: bool,
    grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, dtype: DType, mut data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        if data.len() != numel(&shape) {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        dtype.quantize_slice(&mut data);
        Ok(Tensor {
            shape,
            dtype,
            data,
            trainable: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = numel(&shape);
        Tensor::new(shape, dtype, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Tensor::new(vec![1], dtype, vec![value]).expect("scalar shape is valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype.size_bytes()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Overwrites the values, quantizing to the storage dtype.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Shape {
                op: "assign",
                lhs: self.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        for (dst, &v) in self.data.iter_mut().zip(values) {
            *dst = self.dtype.quantize(v);
        }
        Ok(())
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    /// Frozen tensors never receive a buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.trainable {
            return Err(Error::contract("gradient written to a frozen tensor"));
        }
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let dtype = self.dtype;
        match &mut self.grad {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b = dtype.quantize(*b + x);
                }
            }
            None => self.grad = Some(g.iter().map(|&x| dtype.quantize(x)).collect()),
        }
        Ok(())
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Drops the gradient buffer, returning the bytes it occupied.
    pub fn clear_grad(&mut self) -> usize {
        match self.grad.take() {
            Some(g) => g.len() * self.dtype.size_bytes(),
            None => 0,
        }
    }

    /// Order-sensitive checksum over the raw bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the f64 bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Indexed parameter storage that a tape can read from and write gradients to.
pub trait ParamStore {
    fn param(&self, id: usize) -> Option<&Tensor>;
    fn param_mut(&mut self, id: usize) -> Option<&mut Tensor>;
}

impl ParamStore for Vec<Tensor> {
    fn param(&self, id: usize) -> Option<&Tensor> {
        self.get(id)
    }

    fn param_mut(&mut self, id: usize) -> Option<&mut Tensor> {
        self.get_mut(id)
    }
}
