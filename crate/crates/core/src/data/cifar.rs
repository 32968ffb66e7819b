use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const RECORD: usize = 1 + 3 * SIDE * SIDE;

/// Parses CIFAR-10 binary records: one label byte then planar R, G, B planes.
pub fn parse(bytes: &[u8], path: &Path) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            message: format!(
                "file length {} is not a multiple of the {RECORD}-byte record size",
                bytes.len()
            ),
        });
    }
    let plane = SIDE * SIDE;
    let mut images = Vec::with_capacity(bytes.len() / RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0]);
        let px = &rec[1..];
        let mut data = Vec::with_capacity(plane * 4);
        for i in 0..plane {
            for c in 0..3 {
                data.push(px[c * plane + i] as f32 / 255.0);
            }
            data.push(1.0);
        }
        images.push(Tensor::new([SIDE, SIDE, 4], data).expect("record size checked"));
    }
    Ok((images, labels))
}

pub fn read(path: &Path) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, path)
}
