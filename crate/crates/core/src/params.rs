//! Named parameter storage and the `NCLP` parameter file.
//!
//! File layout (little-endian): `"NCLP"`, u32 version, u32 tensor count, then
//! per tensor u32 name length, UTF-8 name, u32 rows, u32 cols, f64 data.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Gradients, Matrix, Tape, Tensor};
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 4] = b"NCLP";
pub const PARAM_FORMAT_VERSION: u32 = 1;

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_entries(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            tensors: self.values.iter().map(|v| tape.param(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Fails unless `other` holds the same names with the same shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Version(format!(
                "parameter names differ: expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, a), b) in self.iter().zip(other.values()) {
            if a.shape() != b.shape() {
                return Err(Error::Version(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAM_MAGIC);
        buf.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, m) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| fail("truncated parameter file"))?;
            let out = &bytes[pos..end];
            pos = end;
            Ok(out)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        if take(4)? != PARAM_MAGIC {
            return Err(fail("bad magic, expected NCLP"));
        }
        let version = u32_at(take(4)?);
        if version != PARAM_FORMAT_VERSION {
            return Err(Error::Version(format!(
                "{}: parameter format version {version}, expected {PARAM_FORMAT_VERSION}",
                path.display()
            )));
        }
        let count = u32_at(take(4)?) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u32_at(take(4)?) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| fail("parameter name is not UTF-8"))?
                .to_string();
            let rows = u32_at(take(4)?) as usize;
            let cols = u32_at(take(4)?) as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| fail("tensor size overflow"))?;
            let data = take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.get(&name).is_some() {
                return Err(fail("duplicate parameter name"));
            }
            store.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        if pos != bytes.len() {
            return Err(fail("trailing bytes after last tensor"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Pairs existing tape leaves with names, in store order.
    pub fn from_parts(names: &[String], tensors: &[Tensor]) -> Self {
        assert_eq!(names.len(), tensors.len(), "one tensor per name");
        BoundParams {
            tensors: tensors.to_vec(),
            index: names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect(),
        }
    }

    /// Panics on an unknown name: parameter names are fixed by the model code.
    pub fn get(&self, name: &str) -> Tensor {
        match self.index.get(name) {
            Some(&i) => self.tensors[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradients in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.tensors.iter().map(|&t| grads.wrt(t)).collect()
    }
}

/// Uniform init with variance 1/fan_in.
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let bound = (3.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_and_layout_checks() {
        let mut s = ParamStore::new();
        s.insert("a.w", Matrix::from_rows(&[[1.0, 2.0], [3.0, -4.5]]));
        s.insert("b", Matrix::scalar(f64::MIN_POSITIVE));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nclp");
        s.save(&p).unwrap();
        let back = ParamStore::load(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), s.to_bytes());
        assert!(s.check_layout(&back).is_ok());

        let mut other = s.clone();
        other.insert("b", Matrix::zeros(2, 1));
        assert!(matches!(s.check_layout(&other), Err(Error::Version(_))));
    }

    #[test]
    fn header_and_corruption() {
        let mut s = ParamStore::new();
        s.insert("x", Matrix::scalar(1.0));
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"NCLP");
        assert_eq!(b.len(), 4 + 4 + 4 + 4 + 1 + 4 + 4 + 8);
        let p = Path::new("mem");
        assert!(ParamStore::from_bytes(&b[..b.len() - 2], p).is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(ParamStore::from_bytes(&v, p), Err(Error::Version(_))));
    }
}
