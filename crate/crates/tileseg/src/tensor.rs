//! Dense n-dimensional tensors and their on-disk container.
//!
//! Storage is `f64` row-major. The wire format (`TNS1`) stores 32-bit floats,
//! so anything persisted through it is quantized once at the boundary.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("bad tensor file: {0}")]
    BadFormat(String),
    #[error("checkpoint arch fingerprint mismatch: file has {found:?}, expected {expected:?}")]
    FingerprintMismatch { found: String, expected: String },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {:?} tensor", self.shape);
        self.data[0]
    }

    /// Quantize every element through `f32` and back. This is what a trip
    /// through the `TNS1` format does to values; applying it eagerly keeps
    /// in-memory data bit-equal to a reloaded copy.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

const MAGIC: &[u8; 4] = b"TNS1";

/// Write one `TNS1` record: magic, u32 rank, u64 extents, then the data as
/// little-endian 32-bit floats.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read one `TNS1` record.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::BadFormat(format!(
            "bad magic {:?}, want TNS1",
            magic
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(TensorError::BadFormat(format!("rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Checkpoint container: a text header naming the sections and the arch
/// fingerprint, a blank line, then one `TNS1` record per listed name.
pub fn save_checkpoint(
    path: &Path,
    fingerprint: &str,
    tensors: &[(String, &Tensor)],
) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "tileseg-checkpoint")?;
    writeln!(w, "arch = {fingerprint}")?;
    for (name, _) in tensors {
        writeln!(w, "tensor = {name}")?;
    }
    writeln!(w)?;
    for (_, t) in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint, rejecting it unless the arch fingerprint matches.
pub fn load_checkpoint(
    path: &Path,
    expected_fingerprint: &str,
) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // Read byte-wise up to the blank line so the reader is positioned at the
    // first TNS1 record.
    let mut line = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        if b[0] == b'\n' {
            if line.is_empty() {
                break;
            }
            header.push(String::from_utf8_lossy(&line).into_owned());
            line.clear();
        } else {
            line.push(b[0]);
        }
    }
    if header.first().map(String::as_str) != Some("tileseg-checkpoint") {
        return Err(TensorError::BadFormat("not a tileseg checkpoint".into()));
    }
    let mut fingerprint = None;
    let mut names = Vec::new();
    for l in &header[1..] {
        if let Some(v) = l.strip_prefix("arch = ") {
            fingerprint = Some(v.to_string());
        } else if let Some(v) = l.strip_prefix("tensor = ") {
            names.push(v.to_string());
        } else {
            return Err(TensorError::BadFormat(format!("bad header line {l:?}")));
        }
    }
    let found = fingerprint.ok_or_else(|| TensorError::BadFormat("missing arch line".into()))?;
    if found != expected_fingerprint {
        return Err(TensorError::FingerprintMismatch {
            found,
            expected: expected_fingerprint.to_string(),
        });
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        out.push((name, read_tensor(&mut r)?));
    }
    Ok(out)
}
