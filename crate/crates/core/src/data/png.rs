use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgba, RgbaImage};

use crate::error::{Error, Result};
use crate::nca::RGBA;
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Quantizes `[0,1]` to a byte with round-to-nearest; out-of-range values clamp.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_rgba(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, RGBA] => Ok((h, w)),
        other => Err(Error::dim("png", other, &[0, 0, RGBA])),
    }
}

pub fn to_rgba8(image: &Tensor<f32>) -> Result<RgbaImage> {
    let (h, w) = check_rgba(image)?;
    let bytes = image.data().iter().map(|&v| to_byte(v)).collect();
    Ok(RgbaImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches"))
}

pub fn from_rgba8(img: &RgbaImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([h as usize, w as usize, RGBA], data).expect("buffer size matches")
}

/// Writes an 8-bit RGBA PNG, creating missing parent directories.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let rgba = to_rgba8(image)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    rgba.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => image_err(path, other),
        })
}

/// Loads any PNG as `H×W×4` in `[0,1]`; gray and RGB inputs get alpha 1.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    Ok(from_rgba8(&img.to_rgba8()))
}

/// Center-crops to a square and resizes to `size×size` with a triangle filter.
pub fn fit_square(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = check_rgba(image)?;
    if size == 0 {
        return Err(Error::Config("target image size must be positive".into()));
    }
    if h == size && w == size {
        return Ok(image.clone());
    }
    let buf: ImageBuffer<Rgba<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, image.data().to_vec()).expect("size matches");
    let side = h.min(w) as u32;
    let (x0, y0) = ((w as u32 - side) / 2, (h as u32 - side) / 2);
    let cropped = imageops::crop_imm(&buf, x0, y0, side, side).to_image();
    let resized = imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle);
    let data = resized
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Tensor::new([size, size, RGBA], data)
}

/// Writes `frame_00000.png`, `frame_00001.png`, … in order.
pub fn save_frames(frames: &[Tensor<f32>], dir: &Path) -> Result<Vec<PathBuf>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("frame_{i:05}.png"));
            save_png(f, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::seeded(3);
        let img = Tensor::from_fn([5, 7, 4], |_| rng.uniform() as f32);
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let diff = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(diff <= 1.0 / 255.0, "{diff}");
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(to_byte(0.999), 255);
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(0.5 / 255.0 + 1e-4), 1);
    }

    #[test]
    fn non_png_is_typed_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        assert!(matches!(load_png(&path), Err(Error::Image { .. })));
        assert!(matches!(
            load_png(&dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn frames_are_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![Tensor::zeros([2, 2, 4]); 3];
        let paths = save_frames(&frames, &dir.path().join("f")).unwrap();
        let names: Vec<_> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(
            names,
            ["frame_00000.png", "frame_00001.png", "frame_00002.png"]
        );
        assert!(save_frames(&[], &dir.path().join("none"))
            .unwrap()
            .is_empty());
        assert!(!dir.path().join("none").exists());
    }

    #[test]
    fn fit_square_crops_and_resizes() {
        let img = Tensor::from_fn([4, 8, 4], |i| if (i / 4) % 8 < 2 { 0.0 } else { 1.0 });
        let out = fit_square(&img, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 4]);
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let same = Tensor::from_fn([3, 3, 4], |i| i as f32 / 36.0);
        assert_eq!(fit_square(&same, 3).unwrap(), same);
    }
}
