use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            parse_err(
                path,
                bytes.len(),
                format!(
                    "header truncated: expected at least {} bytes, found {}",
                    at + 4,
                    bytes.len()
                ),
            )
        })
}

/// Checks that exactly `expected` payload bytes follow a header of `start` bytes.
fn payload<'a>(bytes: &'a [u8], start: usize, expected: usize, path: &Path) -> Result<&'a [u8]> {
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(parse_err(
            path,
            bytes.len().min(start + expected),
            format!("expected {expected} payload bytes, found {actual}"),
        ));
    }
    Ok(&bytes[start..])
}

/// Parses an IDX image file into `rows×cols×4` tensors, gray replicated to
/// RGB, alpha 1.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Vec<Tensor<f32>>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad IDX image magic {magic:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(parse_err(path, 8, "zero image dimension"));
    }
    let pixels = payload(bytes, 16, n * rows * cols, path)?;
    Ok(pixels
        .chunks_exact(rows * cols)
        .map(|img| {
            let mut data = Vec::with_capacity(rows * cols * 4);
            for &b in img {
                let v = b as f32 / 255.0;
                data.extend_from_slice(&[v, v, v, 1.0]);
            }
            Tensor::new([rows, cols, 4], data).expect("sizes checked")
        })
        .collect())
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad IDX label magic {magic:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, n, path)?.to_vec())
}

pub fn read_images(path: &Path) -> Result<Vec<Tensor<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_images(&bytes, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&bytes, path)
}
