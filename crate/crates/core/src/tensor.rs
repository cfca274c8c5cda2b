//! Dense row-major tensors and the NTF on-disk format.
//!
//! NTF layout: 8-byte magic `NTENSOR1`, little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major `f32` payload, also
//! little-endian.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

pub const NTF_MAGIC: &[u8; 8] = b"NTENSOR1";

/// Element type for tensors: `f32` for normal compute, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(shape_err!("rank-0 tensors are not supported"));
        }
        if let Some(d) = shape.iter().position(|&e| e == 0) {
            return Err(shape_err!("extent {d} of {shape:?} is zero"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(v: S) -> Self {
        Self::full(&[1], v)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Extents of a rank-4 tensor as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(shape_err!("expected a rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Value at a rank-4 index.
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        let (_, cs, h, w) = self.dims4().expect("rank-4 tensor");
        self.data[((b * cs + c) * h + y) * w + x]
    }

    /// Copy of channels `[start, start + count)` of a rank-4 tensor.
    pub fn channels(&self, start: usize, count: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if count == 0 || start + count > c {
            return Err(shape_err!("channel range {start}+{count} outside {c}"));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * count * plane);
        for bi in 0..b {
            let off = (bi * c + start) * plane;
            data.extend_from_slice(&self.data[off..off + count * plane]);
        }
        Tensor::from_vec(&[b, count, h, w], data)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let (b, _, h, w) = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err!(
                    "concat: {:?} incompatible with {:?}",
                    p.shape,
                    first.shape
                ));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                let off = bi * pc * plane;
                data.extend_from_slice(&p.data[off..off + pc * plane]);
            }
        }
        Tensor::from_vec(&[b, total, h, w], data)
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("stack of zero tensors"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(shape_err!("stack: {:?} vs {:?}", p.shape, first.shape));
            }
            b += pb;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&[b, c, h, w], data)
    }

    /// Single batch element `b` of a rank-4 tensor, keeping the batch axis.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if b >= n {
            return Err(shape_err!("batch index {b} outside {n}"));
        }
        let sz = c * h * w;
        Tensor::from_vec(&[1, c, h, w], self.data[b * sz..(b + 1) * sz].to_vec())
    }
}

impl Tensor<f32> {
    pub fn write_ntf<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let rank = u32::try_from(self.shape.len()).expect("rank fits u32");
        let mut buf = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        buf.extend_from_slice(NTF_MAGIC);
        buf.extend_from_slice(&rank.to_le_bytes());
        for &e in &self.shape {
            let e = u32::try_from(e).expect("extent fits u32");
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Parses an NTF byte stream. `origin` names the source in diagnostics.
    pub fn read_ntf<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: origin.to_path_buf(),
            msg,
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io(origin, e))?;
        if bytes.len() < 12 || &bytes[..8] != NTF_MAGIC {
            return Err(fmt("missing NTENSOR1 magic".into()));
        }
        let u32_at = |off: usize| -> Option<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let rank = u32_at(8).unwrap() as usize;
        if rank == 0 {
            return Err(fmt("rank 0".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let e = u32_at(12 + 4 * i).ok_or_else(|| fmt("truncated header".into()))?;
            shape.push(e as usize);
        }
        let payload = &bytes[12 + 4 * rank..];
        let n: usize = shape.iter().product();
        if payload.len() != 4 * n {
            return Err(fmt(format!(
                "payload is {} bytes, shape {shape:?} needs {}",
                payload.len(),
                4 * n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(&shape, data).map_err(|e| fmt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_ntf(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ntf(std::io::BufReader::new(f), path)
    }
}
