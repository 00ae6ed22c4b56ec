//! Dense row-major `f64` tensors and the `GATN` binary snapshot container.
//!
//! A [`Tensor`] is a plain value: a shape plus a flat data buffer. Gradient
//! bookkeeping lives on the [`Tape`](crate::tape::Tape), never on the tensor.
//!
//! The snapshot layout is
//!
//! ```text
//! b"GATN" | version: u8 | rank: u8 | dims: rank x u32 LE | payload: f64 LE
//! ```

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const GATN_MAGIC: &[u8; 4] = b"GATN";
pub const GATN_VERSION: u8 = 1;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` holds exactly `product(shape)` values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {:?} holds {} values but data has {}",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Fills a tensor by calling `f` with each flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("Tensor::stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "Tensor::stack",
                    format!("item {} has shape {:?}, expected {:?}", i, t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Splits off the leading axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        let inner = self.shape[1..].to_vec();
        (0..self.shape[0])
            .map(|i| Tensor {
                shape: inner.clone(),
                data: self.row(i).to_vec(),
            })
            .collect()
    }

    /// Writes the `GATN` container.
    pub fn write_gatn<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::invalid("write_gatn", "rank exceeds 255"));
        }
        w.write_all(GATN_MAGIC)?;
        w.write_all(&[GATN_VERSION, self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid("write_gatn", format!("axis length {} exceeds u32", d)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Encoded size of the `GATN` container in bytes.
    pub fn gatn_len(&self) -> usize {
        4 + 2 + 4 * self.shape.len() + 8 * self.data.len()
    }

    pub fn to_gatn_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.gatn_len());
        self.write_gatn(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads one `GATN` container.
    pub fn read_gatn<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..4] != GATN_MAGIC {
            return Err(Error::format("GATN", format!("bad magic {:?}", &head[..4])));
        }
        if head[4] != GATN_VERSION {
            return Err(Error::format("GATN", format!("unsupported version {}", head[4])));
        }
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut word = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} more)", self.data.len() - SHOWN)?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn gatn_header_layout() {
        let t = Tensor::new([2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_gatn_bytes();
        assert_eq!(&bytes[..4], b"GATN");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..22], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), t.gatn_len());
    }

    #[test]
    fn gatn_rejects_bad_magic() {
        let mut bytes = Tensor::scalar(1.0).to_gatn_bytes();
        bytes[0] = b'X';
        assert!(Tensor::read_gatn(&mut bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn gatn_round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::read_gatn(&mut t.to_gatn_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
