//! Blockwise affine 4-bit weight quantization.
//!
//! The flattened weight is cut into blocks of `block_size`. Each block keeps
//! its minimum and a step `(max - min) / 15`; values are stored as the
//! nearest grid index, two per byte. Dequantization error per element is at
//! most half a step, and a block whose values are all equal round-trips exactly.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEVELS: u8 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub enabled: bool,
    pub bits: u8,
    pub block_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bits: 4,
            block_size: 64,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits != 4 {
            return Err(Error::Config(format!("only 4-bit quantization is supported, got {}", self.bits)));
        }
        if self.block_size < 2 {
            return Err(Error::Config("quantization block_size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    block_size: usize,
    mins: Vec<f32>,
    scales: Vec<f32>,
    packed: Vec<u8>,
}

impl QuantizedTensor {
    pub fn quantize(values: &[f32], shape: &[usize], block_size: usize) -> Result<Self> {
        if block_size < 2 {
            return Err(Error::invalid("block_size must be >= 2"));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(format!("{shape:?}"), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cannot quantize non-finite weights"));
        }
        let mut mins = Vec::new();
        let mut scales = Vec::new();
        let mut codes = Vec::with_capacity(values.len());
        for block in values.chunks(block_size) {
            let lo = block.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = block.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let scale = (hi - lo) / LEVELS as f32;
            mins.push(lo);
            scales.push(scale);
            for &v in block {
                let q = if scale > 0.0 {
                    ((v - lo) / scale).round().clamp(0.0, LEVELS as f32) as u8
                } else {
                    0
                };
                codes.push(q);
            }
        }
        let packed = codes
            .chunks(2)
            .map(|p| p[0] | (p.get(1).copied().unwrap_or(0) << 4))
            .collect();
        Ok(Self {
            shape: shape.to_vec(),
            block_size,
            mins,
            scales,
            packed,
        })
    }

    pub fn from_tensor(t: &Tensor, block_size: usize) -> Result<Self> {
        let v: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        Self::quantize(&v, t.dims(), block_size)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn mins(&self) -> &[f32] {
        &self.mins
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn code(&self, i: usize) -> u8 {
        let b = self.packed[i / 2];
        if i % 2 == 0 {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        (0..self.len())
            .map(|i| {
                let b = i / self.block_size;
                self.mins[b] + self.scales[b] * self.code(i) as f32
            })
            .collect()
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.dequantize(), self.shape.as_slice(), device)?)
    }

    /// Bytes held: packed codes plus an f32 min and step per block.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 8 * self.mins.len()
    }

    pub fn bits_per_weight(&self) -> f64 {
        self.storage_bytes() as f64 * 8.0 / self.len() as f64
    }
}

/// Round-trip statistics for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantError {
    pub max_abs: f64,
    /// Largest half-step over all blocks.
    pub bound: f64,
}

pub fn round_trip_error(values: &[f32], block_size: usize) -> Result<QuantError> {
    let q = QuantizedTensor::quantize(values, &[values.len()], block_size)?;
    let back = q.dequantize();
    let max_abs = values
        .iter()
        .zip(&back)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0, f64::max);
    let bound = q.scales.iter().map(|&s| s as f64 / 2.0).fold(0.0, f64::max);
    Ok(QuantError { max_abs, bound })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_exact() {
        let v = vec![0.0f32; 130];
        let q = QuantizedTensor::quantize(&v, &[10, 13], 64).unwrap();
        assert_eq!(q.dequantize(), v);
    }

    #[test]
    fn constant_block_exact() {
        let v = vec![0.37f32; 64];
        let q = QuantizedTensor::quantize(&v, &[64], 64).unwrap();
        assert_eq!(q.dequantize(), v);
    }

    #[test]
    fn extremes_exact_and_packing() {
        let v: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let q = QuantizedTensor::quantize(&v, &[16], 16).unwrap();
        assert_eq!(q.dequantize(), v);
        assert_eq!(q.packed.len(), 8);
        assert!(q.bits_per_weight() <= 4.0 + 64.0 / 16.0);
    }

    #[test]
    fn rejects_nan() {
        assert!(QuantizedTensor::quantize(&[f32::NAN, 0.0], &[2], 2).is_err());
    }
}
