//! Binary checkpoint format.
//!
//! Layout (little-endian): magic "CASP", u32 version, u32 tensor count;
//! per tensor a u16 name length, the name bytes, u8 ndim, ndim u32 dims and
//! the f32 payload; then a trailing RNG state block of u64 words (seed and
//! counter). Encoding preserves insertion order, so save→load→save is
//! byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CASP_MAGIC: [u8; 4] = *b"CASP";
pub const CASP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub rng_seed: u64,
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn new(rng_seed: u64, rng_state: u64) -> Self {
        Self {
            tensors: Vec::new(),
            rng_seed,
            rng_state,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    /// Store a UTF-8 string as one f32 per byte, so text metadata rides the
    /// tensor table without extending the wire format.
    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        let data: Vec<f32> = text.bytes().map(|b| b as f32).collect();
        let t = Tensor::from_vec(vec![data.len().max(1)], if data.is_empty() {
            vec![0.0]
        } else {
            data
        })
        .expect("byte payload is consistent");
        self.push(name, t);
    }

    pub fn get_text(&self, name: &str) -> Option<String> {
        let t = self.get(name)?;
        let bytes: Vec<u8> = t.data().iter().map(|&f| f as u8).collect();
        String::from_utf8(bytes).ok()
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CASP_MAGIC);
    out.extend_from_slice(&CASP_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&ckpt.rng_seed.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_state.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn need(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}",
                self.off
            )));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.need(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.need(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.need(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.need(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, off: 0 };
    let magic: [u8; 4] = r.need(4, "magic")?.try_into().unwrap();
    if magic != CASP_MAGIC {
        return Err(Error::BadMagic {
            expected: CASP_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CASP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.need(name_len, "name")?.to_vec())
            .map_err(|_| Error::Truncated("tensor name is not UTF-8".into()))?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.need(numel * 4, "tensor payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            name,
            Tensor::from_vec(shape.clone(), data).map_err(|_| Error::InvalidShape {
                shape,
                reason: "tensor entry inconsistent".into(),
            })?,
        ));
    }
    let rng_seed = r.u64("rng seed")?;
    let rng_state = r.u64("rng state")?;
    if r.off != bytes.len() {
        return Err(Error::Truncated(format!(
            "{} trailing bytes after rng block",
            bytes.len() - r.off
        )));
    }
    Ok(Checkpoint {
        tensors,
        rng_seed,
        rng_state,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
