//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes (row-major 32x32 planes).

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 1 + 3 * PLANE;

/// Parses records into an NHWC dataset.
pub fn parse_cifar10(bytes: &[u8], source: &Path) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::format(
            source,
            format!("size {} is not a positive multiple of the {RECORD}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0f32; n * 3 * PLANE];
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::format(source, format!("record {i}: label {label} outside 0..=9")));
        }
        labels.push(label);
        let img = &mut data[i * 3 * PLANE..(i + 1) * 3 * PLANE];
        for c in 0..3 {
            for p in 0..PLANE {
                img[p * 3 + c] = f32::from(rec[1 + c * PLANE + p]);
            }
        }
    }
    let images = Tensor::new(&[n, SIDE, SIDE, 3], data)?;
    let mut ds = Dataset::new(images, labels, 10, "cifar10")?;
    ds.provenance.push(format!("cifar10 binary {}", source.display()));
    Ok(ds)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, path)
}

/// Encodes an NHWC `[N, 32, 32, 3]` dataset as CIFAR-10 records.
pub fn write_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [SIDE, SIDE, 3] {
        return Err(Error::shape("write_cifar10", format!("need 32x32x3 images, got {:?}", ds.image_shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD);
    for (i, &label) in ds.labels.iter().enumerate() {
        if label > 9 {
            return Err(Error::invalid(format!("label {label} outside 0..=9")));
        }
        out.push(label as u8);
        let img = &ds.images.data()[i * 3 * PLANE..(i + 1) * 3 * PLANE];
        for c in 0..3 {
            for p in 0..PLANE {
                out.push(img[p * 3 + c] as u8);
            }
        }
    }
    Ok(out)
}
