//! Dense row-major f64 tensor. The storage is shared via `Arc` so clones are
//! cheap and a tensor can sit in several computation graphs at once; data is
//! immutable unless the holder is the unique owner.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row-major offset for a rank-4 NCHW index.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    /// Row-major offset for a rank-3 CHW index.
    #[inline]
    pub fn idx3(&self, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + h) * self.shape[2] + w
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }
}

// ---------------------------------------------------------------------------
// Raw Tensor File format
//
// magic "RTF1" | u8 dtype (0 = f64, 1 = f32) | u8 rank
// | rank x u64 LE extents | payload, little-endian row-major
// ---------------------------------------------------------------------------

pub const RTF_MAGIC: &[u8; 4] = b"RTF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    fn elem_size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Serialized byte length of a tensor in RTF form.
pub fn rtf_len(shape: &[usize], dtype: Dtype) -> usize {
    let numel: usize = shape.iter().product();
    4 + 1 + 1 + 8 * shape.len() + numel * dtype.elem_size()
}

pub fn write_rtf<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype, path: &str) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    w.write_all(RTF_MAGIC).map_err(io_err)?;
    w.write_all(&[dtype.code(), t.shape().len() as u8]).map_err(io_err)?;
    for &ext in t.shape() {
        w.write_all(&(ext as u64).to_le_bytes()).map_err(io_err)?;
    }
    match dtype {
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// Reads one RTF record. f32 payloads are promoted to f64 in memory.
pub fn read_rtf<R: Read>(r: &mut R, path: &str) -> Result<(Tensor, Dtype)> {
    let mut header = [0u8; 6];
    read_exact(r, &mut header, path)?;
    if &header[..4] != RTF_MAGIC {
        return Err(Error::format(path, format!("bad RTF magic {:?}", &header[..4])));
    }
    let dtype = Dtype::from_code(header[4])
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {}", header[4])))?;
    let rank = header[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        read_exact(r, &mut ext, path)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                read_exact(r, &mut buf, path)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                read_exact(r, &mut buf, path)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated RTF payload")
        } else {
            Error::io(path, e)
        }
    })
}

pub fn save_rtf(path: &std::path::Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let name = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(&name, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_rtf(&mut w, t, dtype, &name)?;
    w.flush().map_err(|e| Error::io(&name, e))
}

pub fn load_rtf(path: &std::path::Path) -> Result<(Tensor, Dtype)> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&name, e))?;
    let mut r = std::io::BufReader::new(file);
    read_rtf(&mut r, &name)
}
