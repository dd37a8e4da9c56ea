//! Named-tensor checkpoints and their on-disk container.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of UTF-8
//! JSON mapping each tensor name to `{"data_offsets":[begin,end],"dtype":..,
//! "shape":[..]}` (offsets relative to the data region), then the raw
//! little-endian data region. An optional `"__metadata__"` entry holds a
//! string map. The writer emits sorted keys, no whitespace and no padding,
//! with tensor data laid out contiguously in checkpoint order; the reader
//! recovers that order from the offsets, so write∘read is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A vector or matrix of floats, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_values<T: Scalar>(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let data = match T::DTYPE {
            Dtype::F32 => TensorData::F32(values.into_iter().map(|x| x.to_f32().unwrap()).collect()),
            Dtype::F64 => TensorData::F64(values.into_iter().map(|x| x.to_f64_lossless()).collect()),
        };
        Self::new(shape, data)
    }

    /// Builds a tensor of the given dtype from `f64` values, rounding if narrower.
    pub fn from_f64(dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(values.to_vec()),
        };
        Self::new(shape, data)
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    /// Rows of the matrix view (1 for vectors).
    pub fn view_rows(&self) -> usize {
        if self.is_vector() {
            1
        } else {
            self.shape[0]
        }
    }

    /// Columns of the matrix view (length for vectors).
    pub fn view_cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn values_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Matrix view; a vector becomes a single row.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let values = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64_rounded(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64_rounded(x)).collect(),
        };
        Matrix::from_vec(self.view_rows(), self.view_cols(), values)
    }

    /// Overwrites the contents from a same-shaped matrix view, rounding to this dtype.
    pub fn assign_matrix(&mut self, m: &Matrix<f64>) -> Result<()> {
        if m.shape() != (self.view_rows(), self.view_cols()) {
            return Err(Error::Engine(format!(
                "cannot assign {:?} matrix to tensor of shape {:?}",
                m.shape(),
                self.shape
            )));
        }
        match &mut self.data {
            TensorData::F32(v) => v.iter_mut().zip(m.as_slice()).for_each(|(d, &s)| *d = s as f32),
            TensorData::F64(v) => v.copy_from_slice(m.as_slice()),
        }
        Ok(())
    }

    /// Applies `f` to every element in `f64` and stores the rounded result.
    pub fn map_in_place(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        match &mut self.data {
            TensorData::F32(v) => v.iter_mut().enumerate().for_each(|(i, x)| *x = f(i, *x as f64) as f32),
            TensorData::F64(v) => v.iter_mut().enumerate().for_each(|(i, x)| *x = f(i, *x)),
        }
    }

    fn write_le_bytes(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn byte_len(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::Format(format!(
            "only rank-1 and rank-2 tensors are supported, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Format(format!("shape {shape:?} has a zero dimension")));
    }
    Ok(())
}

/// Population statistics of a tensor, accumulated in `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn tensor_stats(t: &Tensor) -> Result<TensorStats> {
    slice_stats(&t.values_f64())
}

/// Single-pass (Welford) statistics over a slice.
pub fn slice_stats(values: &[f64]) -> Result<TensorStats> {
    if values.is_empty() {
        return Err(Error::Domain("statistics of an empty tensor".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        min = min.min(x);
        max = max.max(x);
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok(TensorStats {
        min,
        max,
        mean,
        std: (m2 / values.len() as f64).sqrt(),
    })
}

/// Ordered collection of named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: IndexMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    data_offsets: [usize; 2],
    dtype: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::Format(format!("`{METADATA_KEY}` is reserved")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor `{name}`")))
    }

    /// Position of a tensor in serialization order.
    pub fn ordinal(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Canonical serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let end = offset + t.byte_len();
            let entry = HeaderEntry {
                data_offsets: [offset, end],
                dtype: t.dtype().as_str().to_string(),
                shape: t.shape.clone(),
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("header entry"));
            offset = end;
        }
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("metadata"),
            );
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header json");

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            t.write_le_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("file shorter than the 8-byte header length".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64
            .checked_add(n)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Format(format!("header length {n} exceeds file size")))?
            as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::Format("header is not a JSON object".into()));
        };
        let data = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut entries = Vec::with_capacity(header.len());
        for (name, value) in header {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| Error::Format(format!("bad metadata: {e}")))?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("bad header entry `{name}`: {e}")))?;
            let dtype = Dtype::parse(&entry.dtype)?;
            check_shape(&entry.shape)?;
            entries.push((name, dtype, entry));
        }

        // Data must tile the region exactly, in offset order.
        entries.sort_by_key(|(_, _, e)| e.data_offsets);
        let mut cursor = 0usize;
        let mut tensors = IndexMap::with_capacity(entries.len());
        for (name, dtype, entry) in entries {
            let [begin, end] = entry.data_offsets;
            if begin != cursor || end < begin || end > data.len() {
                return Err(Error::Corruption(format!(
                    "tensor `{name}` offsets [{begin}, {end}) overlap, leave a gap or exceed the {}-byte data region",
                    data.len()
                )));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .ok_or_else(|| Error::Corruption(format!("tensor `{name}` shape overflows")))?;
            if numel.checked_mul(dtype.size_bytes()) != Some(end - begin) {
                return Err(Error::Corruption(format!(
                    "tensor `{name}` spans {} bytes but shape {:?} of {} needs {}",
                    end - begin,
                    entry.shape,
                    dtype.as_str(),
                    numel * dtype.size_bytes()
                )));
            }
            let raw = &data[begin..end];
            let values = match dtype {
                Dtype::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.insert(name, Tensor { shape: entry.shape, data: values });
            cursor = end;
        }
        if cursor != data.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after the last tensor",
                data.len() - cursor
            )));
        }
        Ok(Self { tensors, metadata })
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}
