//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Training runs in `f32`; gradient-check tests instantiate the same code
//! in `f64`. The precision is fixed per `Graph`, not per tensor.

mod graph;

pub use graph::{BnMode, Graph, NodeId};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Element type for all numeric computation.
pub trait Scalar:
    num_traits::Float
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
    fn byte_width() -> usize {
        8
    }
}

/// Dense n-dimensional value. Scalars have an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Concatenate along `axis`. All other dimensions must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {} out of rank {}", axis, rank)));
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = 0;
        for p in parts {
            if p.shape.len() != rank {
                return Err(Error::Shape("concat rank mismatch".into()));
            }
            for (d, (&a, &b)) in first.shape.iter().zip(p.shape.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Shape(format!(
                        "concat dim {} mismatch: {} vs {}",
                        d, a, b
                    )));
                }
            }
            out_shape[axis] += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Split along `axis` into pieces of the given sizes. Inverse of `concat`.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!(
                "split axis {} out of rank {}",
                axis,
                self.shape.len()
            )));
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::Shape("split sizes do not cover the axis".into()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let axis_len = self.shape[axis];
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = s;
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let base = (o * axis_len + offset) * inner;
                data.extend_from_slice(&self.data[base..base + s * inner]);
            }
            out.push(Tensor::new(shape, data)?);
            offset += s;
        }
        Ok(out)
    }

    /// Select a subset of indices along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Shape("index_select axis out of rank".into()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let axis_len = self.shape[axis];
        for &i in indices {
            if i >= axis_len {
                return Err(Error::Shape(format!(
                    "index {} out of axis length {}",
                    i, axis_len
                )));
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * axis_len + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Tensor::new(shape, data)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
}

impl<T: Scalar> Tensor<T> {
    /// Write raw little-endian values to `path` plus a `<path>.json` sidecar
    /// carrying shape and dtype.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * T::byte_width());
        for &v in &self.data {
            v.to_le_bytes(&mut bytes);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar { shape: self.shape.clone(), dtype: T::DTYPE.to_string() };
        let sc_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Json { path: sc_path.clone(), source: e })?;
        std::fs::write(&sc_path, json).map_err(|e| Error::io(&sc_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sc_path = sidecar_path(path);
        let json = std::fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&json)
            .map_err(|e| Error::Json { path: sc_path.clone(), source: e })?;
        if sidecar.dtype != T::DTYPE {
            return Err(Error::format(
                path,
                format!("dtype mismatch: file is {}, expected {}", sidecar.dtype, T::DTYPE),
            ));
        }
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let n: usize = sidecar.shape.iter().product();
        let w = T::byte_width();
        if bytes.len() != n * w {
            return Err(Error::format(
                path,
                format!("expected {} bytes, found {}", n * w, bytes.len()),
            ));
        }
        let data = bytes.chunks_exact(w).map(T::from_le_slice).collect();
        Tensor::new(sidecar.shape, data)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}
