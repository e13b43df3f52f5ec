//! Dense binary32 tensors in row-major order.
//!
//! Feature-map tensors use a `(C, H, W)` layout; flat tensors are `(1, N)`.
//! Raw files are little-endian `f32` with no header, the shape being kept
//! alongside in a manifest.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data under a different shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Bitwise equality, so NaN payloads and signed zeros are distinguished.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::InvalidTensor(format!(
                "raw buffer length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn read_raw(path: &Path, shape: Vec<usize>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_le_bytes(shape, &bytes).map_err(|e| match e {
            Error::InvalidTensor(msg) => {
                Error::InvalidTensor(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_le_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the shape and raw little-endian contents.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(self.to_le_bytes());
        hex(&h.finalize())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidTensor("empty shape".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} has a zero extent"
        )));
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// The `(C, H, W)` view used for spatial reasoning about a tensor.
///
/// Rank-3 shapes map directly. Rank-1 and rank-2 shapes are flat and become a
/// single row `(1, 1, N)`; the same holds for any shape explicitly marked flat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MapShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        MapShape { c, h, w }
    }

    pub fn of(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        match shape.len() {
            1 | 2 => Ok(Self::flat(shape.iter().product())),
            3 => Ok(MapShape::new(shape[0], shape[1], shape[2])),
            _ => Err(Error::InvalidTensor(format!(
                "shape {shape:?} has no (C, H, W) interpretation"
            ))),
        }
    }

    pub fn flat(len: usize) -> Self {
        MapShape::new(1, 1, len)
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, loc: Loc) -> usize {
        (loc.c * self.h + loc.y) * self.w + loc.x
    }

    pub fn loc(&self, index: usize) -> Loc {
        let x = index % self.w;
        let y = (index / self.w) % self.h;
        let c = index / (self.w * self.h);
        Loc { c, y, x }
    }

    pub fn contains(&self, loc: Loc) -> bool {
        loc.c < self.c && loc.y < self.h && loc.x < self.w
    }
}

/// A `(c, y, x)` coordinate inside a [`MapShape`]. Serialized as `[c, y, x]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Loc {
    pub c: usize,
    pub y: usize,
    pub x: usize,
}

impl From<[usize; 3]> for Loc {
    fn from([c, y, x]: [usize; 3]) -> Self {
        Loc { c, y, x }
    }
}

impl From<Loc> for [usize; 3] {
    fn from(l: Loc) -> Self {
        [l.c, l.y, l.x]
    }
}

impl Loc {
    pub fn new(c: usize, y: usize, x: usize) -> Self {
        Loc { c, y, x }
    }
}
