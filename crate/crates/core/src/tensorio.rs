//! Binary tensor container shared by every persisted model artifact.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "MIFLTNS1"
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   data     f64 × prod(dims), row-major
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"MIFLTNS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(v: &DVector<f64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.as_slice().to_vec(),
        }
    }

    pub fn matrix(m: &DMatrix<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        match (self.shape.as_slice(), self.data.as_slice()) {
            ([], [v]) => Ok(*v),
            _ => Err(Error::format(
                "tensor",
                format!("expected scalar, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        match self.shape.as_slice() {
            [_] => Ok(DVector::from_vec(self.data.clone())),
            s => Err(Error::format("tensor", format!("expected vector, got shape {s:?}"))),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &self.data)),
            s => Err(Error::format("tensor", format!("expected matrix, got shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.tensors.push((name.to_string(), t));
        self
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("tensor file", format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = TENSOR_MAGIC.to_vec();
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "tensor file");
        if r.take(8)? != TENSOR_MAGIC {
            return Err(Error::format("tensor file", "bad magic"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("tensor file", "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            tensors.push((name, Tensor { shape, data }));
        }
        r.finish()?;
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.what, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.what,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>(), s in -1e6f64..1e6) {
            let m = DMatrix::from_fn(rows, cols, |i, j| (seed as f64).sin() * (i * 7 + j) as f64);
            let mut f = TensorFile::new();
            f.push("m", Tensor::matrix(&m)).push("s", Tensor::scalar(s));
            let back = TensorFile::from_bytes(&f.to_bytes()).unwrap();
            prop_assert_eq!(back.get("m").unwrap().to_matrix().unwrap(), m);
            prop_assert_eq!(back.get("s").unwrap().to_scalar().unwrap(), s);
        }
    }

    #[test]
    fn matrix_is_row_major_on_disk() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::matrix(&m).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut f = TensorFile::new();
        f.push("v", Tensor::vector(&DVector::from_vec(vec![1.0, 2.0])));
        let bytes = f.to_bytes();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorFile::from_bytes(&bad).is_err());
        assert!(f.get("missing").is_err());
    }
}
