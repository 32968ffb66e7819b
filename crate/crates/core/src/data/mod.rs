//! Dataset ingestion, PNG input and output, and checkpoints.

pub mod checkpoint;
pub mod cifar;
pub mod idx;
pub mod png;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
pub use png::{fit_square, load_png, save_frames, save_png};

/// A list of same-sized `H×W×4` images in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Option<Vec<u8>>,
    /// Loader that produced the images (`mnist`, `cifar`, `png`).
    pub source: String,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, source: &str, split: &str) -> Result<Self> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::dim("dataset", first.shape(), bad.shape()));
            }
        }
        Ok(Self {
            images,
            labels: None,
            source: source.into(),
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps the first `n` images (and labels).
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        if let Some(l) = &mut self.labels {
            l.truncate(n);
        }
    }

    /// Center-crops and resizes every image to `size×size`.
    pub fn resize(&mut self, size: usize) -> Result<()> {
        for img in &mut self.images {
            *img = fit_square(img, size)?;
        }
        Ok(())
    }
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let mut ds = Dataset::new(idx::read_images(images)?, "mnist", "")?;
    if let Some(lp) = labels {
        let l = idx::read_labels(lp)?;
        if l.len() != ds.len() {
            return Err(Error::Parse {
                path: lp.to_path_buf(),
                offset: 4,
                message: format!("{} labels for {} images", l.len(), ds.len()),
            });
        }
        ds.labels = Some(l);
    }
    Ok(ds)
}

pub fn load_cifar(batches: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in batches {
        let (i, l) = cifar::read(p)?;
        images.extend(i);
        labels.extend(l);
    }
    let mut ds = Dataset::new(images, "cifar", "")?;
    ds.labels = Some(labels);
    Ok(ds)
}

/// Every `*.png` directly inside `dir`, in file-name order, fitted to `size`.
pub fn load_png_dir(dir: &Path, size: usize) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let images = paths
        .iter()
        .map(|p| fit_square(&load_png(p)?, size))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, "png", "")
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Loads split `split` (`train` or `test`) from a dataset directory, detecting
/// the format from its contents:
///
/// * MNIST IDX files (`train-images-idx3-ubyte`, `t10k-images-idx3-ubyte`, …),
/// * CIFAR-10 binary batches (`data_batch_*.bin`, `test_batch.bin`), possibly
///   inside `cifar-10-batches-bin/`,
/// * PNG files in `<dir>/<split>/`, or directly in `<dir>`.
///
/// When `image_size` is given, images are center-cropped and resized to it.
pub fn load_dataset_dir(dir: &Path, split: &str, image_size: Option<usize>) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        other => {
            return Err(Error::Usage(format!(
                "unknown split `{other}` (expected train or test)"
            )))
        }
    };
    let mut ds = if let Some(images) = first_existing(
        dir,
        &[
            &format!("{prefix}-images-idx3-ubyte"),
            &format!("{prefix}-images.idx3-ubyte"),
        ],
    ) {
        let labels = first_existing(
            dir,
            &[
                &format!("{prefix}-labels-idx1-ubyte"),
                &format!("{prefix}-labels.idx1-ubyte"),
            ],
        );
        load_idx(&images, labels.as_deref())?
    } else if let Some(batches) = cifar_batches(dir, split) {
        load_cifar(&batches)?
    } else {
        let sub = dir.join(split);
        let png_dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
        let size = image_size.unwrap_or(32);
        load_png_dir(&png_dir, size)?
    };
    if let Some(size) = image_size {
        ds.resize(size)?;
    }
    ds.split = split.into();
    Ok(ds)
}

fn cifar_batches(dir: &Path, split: &str) -> Option<Vec<PathBuf>> {
    let nested = dir.join("cifar-10-batches-bin");
    let base = if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    };
    let found: Vec<PathBuf> = if split == "train" {
        (1..=5)
            .map(|i| base.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.is_file())
            .collect()
    } else {
        Some(base.join("test_batch.bin"))
            .into_iter()
            .filter(|p| p.is_file())
            .collect()
    };
    (!found.is_empty()).then_some(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx(dir: &Path, prefix: &str, n: u32) {
        let mut b = vec![0, 0, 8, 3];
        for v in [n, 4, 4] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * 16).map(|i| (i * 7 % 256) as u8));
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), b).unwrap();
        let mut l = vec![0, 0, 8, 1];
        l.extend_from_slice(&n.to_be_bytes());
        l.extend((0..n).map(|i| i as u8));
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), l).unwrap();
    }

    #[test]
    fn detects_mnist_splits() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), "train", 3);
        write_idx(dir.path(), "t10k", 2);
        let train = load_dataset_dir(dir.path(), "train", None).unwrap();
        assert_eq!(
            (train.len(), train.source.as_str(), train.split.as_str()),
            (3, "mnist", "train")
        );
        assert_eq!(train.labels.as_deref(), Some(&[0u8, 1, 2][..]));
        let test = load_dataset_dir(dir.path(), "test", Some(2)).unwrap();
        assert_eq!(test.len(), 2);
        assert_eq!(test.images[0].shape(), &[2, 2, 4]);
        assert!(load_dataset_dir(dir.path(), "valid", None).is_err());
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), "train", 4);
        let a = load_dataset_dir(dir.path(), "train", Some(3)).unwrap();
        let b = load_dataset_dir(dir.path(), "train", Some(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn png_directory_with_split() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("test");
        std::fs::create_dir(&sub).unwrap();
        save_png(&Tensor::full([6, 4, 4], 1.0), &sub.join("b.png")).unwrap();
        save_png(&Tensor::full([5, 5, 4], 0.0), &sub.join("a.png")).unwrap();
        std::fs::write(sub.join("notes.txt"), "skip").unwrap();
        let ds = load_dataset_dir(dir.path(), "test", Some(4)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[0].data()[0], 0.0);
        assert_eq!(ds.images[1].data()[0], 1.0);
    }

    #[test]
    fn empty_png_directory_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset_dir(dir.path(), "test", None)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn mixed_sizes_rejected() {
        assert!(Dataset::new(
            vec![Tensor::zeros([2, 2, 4]), Tensor::zeros([3, 3, 4])],
            "x",
            "y"
        )
        .is_err());
    }

    #[test]
    fn mismatched_label_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), "train", 3);
        let l = [0u8, 0, 8, 1, 0, 0, 0, 2, 1, 2];
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), l).unwrap();
        assert!(load_dataset_dir(dir.path(), "train", None).is_err());
    }
}
