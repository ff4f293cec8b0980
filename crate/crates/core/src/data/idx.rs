//! Big-endian IDX files as used by MNIST.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

/// Parsed unsigned-byte IDX payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX buffer. `source` names the input in errors.
pub fn parse_idx(bytes: &[u8], source: &Path) -> Result<IdxArray> {
    let fail = |detail: String| Error::format(source, detail);
    if bytes.len() < 4 {
        return Err(fail(format!("truncated header: {} bytes", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != UBYTE {
        return Err(fail(format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fail("rank 0".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fail(format!("truncated header: need {header} bytes, got {}", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(format!("dimensions {dims:?} overflow")))?;
    let body = bytes.len() - header;
    if body != numel {
        let what = if body < numel { "truncated body" } else { "trailing bytes" };
        return Err(fail(format!("{what}: dims {dims:?} need {numel} bytes, got {body}")));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Image file: magic `0x00000803`, dims `(N, H, W)`. Returns `[N, H, W, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor<f32>> {
    let arr = parse_idx(&read(path)?, path)?;
    if arr.dims.len() != 3 {
        return Err(Error::format(path, format!("image file must have 3 dims, got {:?}", arr.dims)));
    }
    let shape = [arr.dims[0], arr.dims[1], arr.dims[2], 1];
    Tensor::new(&shape, arr.data.into_iter().map(f32::from).collect())
}

/// Label file: magic `0x00000801`, dims `(N)`.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let arr = parse_idx(&read(path)?, path)?;
    if arr.dims.len() != 1 {
        return Err(Error::format(path, format!("label file must have 1 dim, got {:?}", arr.dims)));
    }
    Ok(arr.data.into_iter().map(usize::from).collect())
}

/// Pairs an image file with its label file.
pub fn load_idx_pair(images: &Path, labels: &Path, classes: usize, split: &str) -> Result<Dataset> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if x.shape()[0] != y.len() {
        return Err(Error::format(
            labels,
            format!("label count {} does not match image count {} in {}", y.len(), x.shape()[0], images.display()),
        ));
    }
    let mut ds = Dataset::new(x, y, classes, split).map_err(|e| Error::format(labels, e.to_string()))?;
    ds.provenance.push(format!("idx {} + {}", images.display(), labels.display()));
    Ok(ds)
}

fn idx_bytes(dims: &[usize], data: impl Iterator<Item = u8>) -> Result<Vec<u8>> {
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend(data);
    Ok(out)
}

/// Writes single-channel images as an IDX3 file. Pixels must be integers in `[0, 255]`.
pub fn write_idx_images(path: &Path, images: &Tensor<f32>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(Error::shape("write_idx_images", format!("need [N, H, W, 1], got {s:?}")));
    }
    if images.data().iter().any(|&v| v.fract() != 0.0 || !(0.0..=255.0).contains(&v)) {
        return Err(Error::invalid("IDX images hold integer pixels in [0, 255]"));
    }
    let bytes = idx_bytes(&s[..3], images.data().iter().map(|&v| v as u8))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if labels.iter().any(|&l| l > 255) {
        return Err(Error::invalid("IDX labels must fit in a byte"));
    }
    let bytes = idx_bytes(&[labels.len()], labels.iter().map(|&l| l as u8))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
