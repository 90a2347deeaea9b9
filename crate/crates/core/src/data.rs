//! MNIST IDX parsing and minibatch sampling.
//!
//! IDX files are big-endian: a 4-byte magic (`0x00000803` for images,
//! `0x00000801` for labels), one u32 per dimension, then raw `u8` data.
//! Gzip-compressed files are detected by their `1f 8b` prefix.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Flattened images with their pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

/// Feature rows paired with one-hot labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: usize,
    classes: usize,
    inputs: Vec<f32>,
    targets: Vec<f32>,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    /// Builds a dataset from flattened inputs and class indices.
    pub fn new(features: usize, classes: usize, inputs: Vec<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features == 0 || classes == 0 {
            return Err(Error::InvalidArgument("features and classes must be positive".into()));
        }
        if inputs.len() != labels.len() * features {
            return Err(Error::Shape(format!(
                "{} input values for {} labels of {} features",
                inputs.len(),
                labels.len(),
                features
            )));
        }
        let mut targets = vec![0.0; labels.len() * classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::InvalidArgument(format!("label {label} out of range 0..{classes}")));
            }
            targets[i * classes + label] = 1.0;
        }
        Ok(Self { features, classes, inputs, targets, labels, split })
    }

    /// Pairs parsed images with labels, enforcing equal counts.
    pub fn from_parts(images: RawImages, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.count, labels.len())));
        }
        Self::new(images.rows * images.cols, MNIST_CLASSES, images.pixels, labels, split)
    }

    /// Loads an image/label IDX file pair.
    pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<Self> {
        let images = load_idx_images(images)?;
        let labels = load_idx_label_indices(labels)?;
        Self::from_parts(images, labels, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    pub fn target(&self, i: usize) -> &[f32] {
        &self.targets[i * self.classes..(i + 1) * self.classes]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Keeps only the first `n` samples (no-op when `n >= len`).
    pub fn truncated(mut self, n: usize) -> Self {
        if n < self.len() {
            self.inputs.truncate(n * self.features);
            self.targets.truncate(n * self.classes);
            self.labels.truncate(n);
        }
        self
    }

    /// Copies the rows named by `indices` into contiguous input/target buffers.
    pub fn gather(&self, indices: &[usize], inputs: &mut Vec<f32>, targets: &mut Vec<f32>) {
        inputs.clear();
        targets.clear();
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.target(i));
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::file(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::file(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX file", "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::format("IDX file", format!("magic {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

/// Parses an in-memory IDX image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let needed = count * rows * cols;
    if body.len() < needed {
        return Err(Error::format("IDX file", format!("truncated: {} of {} pixel bytes", body.len(), needed)));
    }
    let pixels = body[..needed].iter().map(|&p| p as f32 / 255.0).collect();
    Ok(RawImages { count, rows, cols, pixels })
}

/// Parses an in-memory IDX label file into class indices.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format("IDX file", format!("truncated: {} of {} label bytes", body.len(), count)));
    }
    body[..count]
        .iter()
        .map(|&l| {
            if (l as usize) < MNIST_CLASSES {
                Ok(l as usize)
            } else {
                Err(Error::format("IDX file", format!("label {l} out of range")))
            }
        })
        .collect()
}

pub fn load_idx_images(path: &Path) -> Result<RawImages> {
    parse_idx_images(&read_file(path)?)
}

/// Reads label indices (0..9).
pub fn load_idx_label_indices(path: &Path) -> Result<Vec<usize>> {
    parse_idx_labels(&read_file(path)?)
}

/// Reads labels as one-hot rows of length 10.
pub fn load_idx_labels(path: &Path) -> Result<Vec<[f32; MNIST_CLASSES]>> {
    Ok(load_idx_label_indices(path)?
        .into_iter()
        .map(|l| {
            let mut row = [0.0; MNIST_CLASSES];
            row[l] = 1.0;
            row
        })
        .collect())
}

/// Seeded permutation of `0..n` cut into batches of `batch_size`; the last
/// batch may be short.
pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(epoch_seed, Stream::Shuffle, 0));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_images(count: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&count.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(pixels);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn parses_images_and_scales_pixels() {
        let images = parse_idx_images(&idx_images(2, &[0, 255, 51, 102, 0, 0, 0, 255])).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (2, 2, 2));
        assert_eq!(images.pixels[1], 1.0);
        assert!((images.pixels[2] - 0.2).abs() < 1e-7);
        assert!(images.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn label_file_is_not_an_image_file() {
        let err = parse_idx_images(&idx_labels(&[1, 2, 3])).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_image_file_is_rejected() {
        assert!(parse_idx_images(&idx_images(3, &[0; 8])).is_err());
        assert!(parse_idx_images(&IMAGE_MAGIC.to_be_bytes()).is_err());
    }

    #[test]
    fn labels_become_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        fs::write(&path, idx_labels(&[3, 0])).unwrap();
        let rows = load_idx_labels(&path).unwrap();
        assert_eq!(rows[0][3], 1.0);
        assert_eq!(rows[0].iter().sum::<f32>(), 1.0);
        assert_eq!(rows[1][0], 1.0);
        assert_eq!(rows[1].iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(parse_idx_labels(&idx_labels(&[3, 10])).is_err());
    }

    #[test]
    fn gzip_files_are_accepted() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_labels(&[7, 1, 4])).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx_label_indices(&path).unwrap(), vec![7, 1, 4]);
    }

    #[test]
    fn count_mismatch_fails_at_assembly() {
        let images = parse_idx_images(&idx_images(2, &[0; 8])).unwrap();
        assert!(Dataset::from_parts(images, vec![1, 2, 3], Split::Train).is_err());
    }

    #[test]
    fn batches_of_ten_by_four() {
        let batches = minibatches(10, 4, 9).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batches, minibatches(10, 4, 9).unwrap());
        assert!(minibatches(10, 0, 9).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn minibatches_partition_the_index_set(n in 0usize..300, batch in 1usize..70, seed: u64) {
            let batches = minibatches(n, batch, seed).unwrap();
            prop_assert_eq!(batches.len(), n.div_ceil(batch));
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
