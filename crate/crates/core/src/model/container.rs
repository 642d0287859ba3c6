//! Shared on-disk container for weight files: a JSON manifest describing
//! named tensors (dtype, shape, byte offset) plus one raw little-endian blob.
//!
//! Model bundles store `f32` tensors; probe files reuse the same container
//! with `f64` tensors so training output survives a save/load round trip
//! bit-exactly. Layout is row-major, offsets are bytes from the start of the
//! blob, and entries must tile the blob without overlap (see
//! `docs/FORMATS.md`).

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.elements() * self.dtype.size()
    }
}

/// Accumulates tensors into a blob, assigning offsets in push order.
#[derive(Debug, Default)]
pub struct BlobBuilder {
    pub entries: Vec<TensorEntry>,
    pub bytes: Vec<u8>,
}

impl BlobBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, dtype: Dtype, shape: &[usize], data: &[f64]) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape does not cover the buffer"
        );
        let offset = self.bytes.len();
        match dtype {
            Dtype::F32 => {
                for &v in data {
                    self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in data {
                    self.bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset,
        });
    }
}

/// A loaded blob with its manifest entries; tensors are fetched by name and
/// widened to `f64`.
#[derive(Debug)]
pub struct BlobReader {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
    consumed: Vec<bool>,
}

impl BlobReader {
    pub fn new(entries: Vec<TensorEntry>, bytes: Vec<u8>) -> Self {
        let consumed = vec![false; entries.len()];
        Self { entries, bytes, consumed }
    }

    /// Fetch `name`, enforcing dtype, declared shape, and blob bounds.
    /// Finiteness is checked so corrupt blobs fail with the tensor named.
    pub fn take(
        &mut self,
        name: &str,
        dtype: Dtype,
        expected_shape: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        let idx = self
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        let entry = &self.entries[idx];
        if entry.shape != expected_shape {
            return Err(ModelError::ShapeMismatch {
                tensor: name.to_string(),
                expected: expected_shape.to_vec(),
                declared: entry.shape.clone(),
            });
        }
        if entry.dtype != dtype {
            return Err(ModelError::DtypeMismatch {
                tensor: name.to_string(),
                expected: dtype,
                declared: entry.dtype,
            });
        }
        let end = entry.offset + entry.byte_len();
        if end > self.bytes.len() {
            return Err(ModelError::BlobOverrun {
                tensor: name.to_string(),
                offset: entry.offset,
                len: entry.byte_len(),
                blob: self.bytes.len(),
            });
        }
        let raw = &self.bytes[entry.offset..end];
        let values: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        };
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteWeight {
                tensor: name.to_string(),
                index: bad,
            });
        }
        self.consumed[idx] = true;
        Ok(values)
    }

    /// Error if any manifest entry was never fetched — catches both stray
    /// extras and misspelled names.
    pub fn finish(self) -> Result<(), ModelError> {
        for (entry, used) in self.entries.iter().zip(&self.consumed) {
            if !used {
                return Err(ModelError::UnknownTensor(entry.name.clone()));
            }
        }
        Ok(())
    }
}
