//! Binary checkpoint container. All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CAPSRTE\0"
//! version    u8       1
//! width      u8       bytes per scalar (4 = f32, 8 = f64)
//! reserved   u16      0
//! config     u32 length + UTF-8 text (resolved key = value snapshot)
//! count      u32      number of tensors
//! per tensor u16 name length + name, u8 rank, rank × u32 extents, data
//! ```
//!
//! The routing matrix B, when present, is stored as `routing.b`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CapsNetParams, ModelConfig};
use crate::rng::SeedStream;
use crate::routing::RoutingCoefficients;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CAPSRTE\0";
pub const VERSION: u8 = 1;
pub const COEFFICIENTS: &str = "routing.b";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_params(config_text: String, params: &CapsNetParams<T>) -> Self {
        let mut tensors: Vec<(String, Tensor<T>)> = params
            .weight_tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(b) = &params.coefficients {
            tensors.push((COEFFICIENTS.to_string(), b.tensor().clone()));
        }
        Checkpoint {
            config_text,
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(T::WIDTH);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            T::to_le_bytes_vec(t.data(), &mut out);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, 0, "not a checkpoint (bad magic)"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                8,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let width = r.u8()?;
        if width != T::WIDTH {
            return Err(Error::Incompatible(format!(
                "checkpoint stores {width}-byte scalars, expected {}",
                T::WIDTH
            )));
        }
        r.take(2)?;
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, 16, "config text is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos as u64;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, at, "tensor name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.pos as u64;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * T::WIDTH as usize)?
                .chunks_exact(T::WIDTH as usize)
                .map(T::from_le_chunk)
                .collect();
            let t =
                Tensor::new(&shape, data).map_err(|e| Error::format(path, at, e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                r.pos as u64,
                "trailing bytes after last tensor",
            ));
        }
        Ok(Checkpoint {
            config_text,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Rebuilds parameters for `model`, checking every tensor name and shape.
    pub fn into_params(
        self,
        model: &ModelConfig,
        with_coefficients: bool,
    ) -> Result<CapsNetParams<T>> {
        // shapes come from a throwaway initialisation of the expected model
        let mut params = CapsNetParams::<T>::init(model, with_coefficients, SeedStream::new(0))?;
        let mut found = vec![false; self.tensors.len()];
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let idx = self
                .tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor `{name}`")))?;
            let t = &self.tensors[idx].1;
            if t.shape() != shape {
                return Err(Error::Incompatible(format!(
                    "`{name}` is {:?} in the checkpoint but the config needs {shape:?}",
                    t.shape()
                )));
            }
            found[idx] = true;
            Ok(t.clone())
        };
        let names: Vec<&'static str> = params.weight_tensors().iter().map(|(n, _)| *n).collect();
        for (name, slot) in names.into_iter().zip(params.weight_tensors_mut()) {
            *slot = take(name, slot.shape())?;
        }
        if let Some(b) = params.coefficients.as_mut() {
            let shape = b.tensor().shape().to_vec();
            *b = RoutingCoefficients::new(take(COEFFICIENTS, &shape)?)?;
        }
        if let Some(i) = found.iter().position(|f| !f) {
            return Err(Error::Incompatible(format!(
                "checkpoint tensor `{}` is not used by this config",
                self.tensors[i].0
            )));
        }
        Ok(params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
