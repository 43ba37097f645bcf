//! IDX datasets (MNIST family): loading, normalization, splits and batches.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{FttnError, Result};
use crate::rng;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw image stack from an IDX file, bytes already divided by 255.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

/// Reads a file, inflating it first when it starts with the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| FttnError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| FttnError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            FttnError::format(
                offset as u64,
                format!("truncated header: missing {what} ({} bytes in file)", bytes.len()),
            )
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, "magic number")?;
    if found != expected {
        return Err(FttnError::format(
            0,
            format!("wrong magic: expected {expected:#010x}, found {found:#010x}"),
        ));
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, expected: usize) -> Result<&[u8]> {
    let available = bytes.len() - header;
    if available < expected {
        return Err(FttnError::format(
            bytes.len() as u64,
            format!("truncated payload: expected {expected} bytes, found {available}"),
        ));
    }
    if available > expected {
        return Err(FttnError::format(
            (header + expected) as u64,
            format!("{} trailing bytes after payload", available - expected),
        ));
    }
    Ok(&bytes[header..])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let data = payload(bytes, 16, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: data.iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4, "label count")? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

/// Loads an IDX3 image file (plain or gzip-compressed).
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gzip(path.as_ref())?)
}

/// Loads an IDX1 label file (plain or gzip-compressed).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gzip(path.as_ref())?)
}

/// Encodes images as IDX3, mapping each pixel back to `round(255 p)`.
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.pixels.iter().map(|p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| FttnError::io(path, e))
}

/// Images in `[0, 1]` with class labels. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, num_classes: usize, height: usize, width: usize) -> Result<Self> {
        let pixels = height * width;
        if pixels == 0 {
            return Err(FttnError::InvalidArgument("image size must be positive".into()));
        }
        if images.len() != labels.len() * pixels {
            return Err(FttnError::DimensionMismatch(format!(
                "{} labels need {} pixels, got {}",
                labels.len(),
                labels.len() * pixels,
                images.len()
            )));
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(FttnError::Domain(format!("pixel {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FttnError::Domain(format!("label {l} not below {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            height,
            width,
        })
    }

    /// Pairs an IDX image file with its label file.
    pub fn from_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let imgs = load_idx_images(images)?;
        let labs = load_idx_labels(labels)?;
        if imgs.count != labs.len() {
            return Err(FttnError::DimensionMismatch(format!(
                "{} images but {} labels",
                imgs.count,
                labs.len()
            )));
        }
        Self::new(
            imgs.pixels,
            labs.into_iter().map(usize::from).collect(),
            num_classes,
            imgs.rows,
            imgs.cols,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, k: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images[k * p..(k + 1) * p]
    }

    pub fn label(&self, k: usize) -> usize {
        self.labels[k]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn to_idx(&self) -> (IdxImages, Vec<u8>) {
        (
            IdxImages {
                count: self.len(),
                rows: self.height,
                cols: self.width,
                pixels: self.images.clone(),
            },
            self.labels.iter().map(|&l| l as u8).collect(),
        )
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * p);
        for &k in indices {
            images.extend_from_slice(self.image(k));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&k| self.labels[k]).collect(),
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
        }
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Average-pools by an integer factor: 28x28 with `target = 14` gives 2x2 pooling.
    pub fn downscale(&self, target: usize) -> Result<Dataset> {
        if target == 0 || self.height % target != 0 || self.width % target != 0 || self.height != self.width {
            return Err(FttnError::InvalidArgument(format!(
                "cannot downscale {}x{} images to {target}x{target}",
                self.height, self.width
            )));
        }
        let f = self.height / target;
        if f == 1 {
            return Ok(self.clone());
        }
        let norm = 1.0 / (f * f) as f64;
        let mut images = Vec::with_capacity(self.len() * target * target);
        for k in 0..self.len() {
            let img = self.image(k);
            for r in 0..target {
                for c in 0..target {
                    let mut sum = 0.0;
                    for dr in 0..f {
                        for dc in 0..f {
                            sum += img[(r * f + dr) * self.width + c * f + dc];
                        }
                    }
                    images.push((sum * norm).clamp(0.0, 1.0));
                }
            }
        }
        Dataset::new(images, self.labels.clone(), self.num_classes, target, target)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Seeded shuffle into `(train, holdout)` with `round(fraction * len)` held out.
pub fn split(dataset: &Dataset, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(FttnError::InvalidArgument(format!(
            "holdout fraction {holdout_fraction} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let n_hold = (holdout_fraction * dataset.len() as f64).round() as usize;
    let (hold, train) = order.split_at(n_hold);
    Ok((dataset.select(train), dataset.select(hold)))
}

/// One mini-batch: indices into the parent dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &'a [f64]> + '_ {
        self.indices.iter().map(|&k| self.dataset.image(k))
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().map(|&k| self.dataset.label(k))
    }
}

/// Shuffles with `epoch_seed`, then yields contiguous chunks; the last chunk may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, epoch_seed: u64) -> impl Iterator<Item = Batch<'_>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(epoch_seed, "batches"));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |indices| Batch { dataset, indices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = (0..n * 4).map(|k| (k % 256) as f64 / 255.0).collect();
        let labels = (0..n).map(|k| k % 3).collect();
        Dataset::new(images, labels, 3, 2, 2).unwrap()
    }

    #[test]
    fn endpoint_pixels_normalize_exactly() {
        let mut bytes = Vec::new();
        for v in [IMAGE_MAGIC, 1, 1, 2] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 255]);
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!((imgs.count, imgs.rows, imgs.cols), (1, 1, 2));
        assert_eq!(imgs.pixels, vec![0.0, 1.0]);
    }

    #[test]
    fn labels_parse_exactly() {
        let bytes = encode_idx_labels(&[0, 9, 3]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![0, 9, 3]);
    }

    #[test]
    fn wrong_magic_names_both_values() {
        let bytes = encode_idx_labels(&[1, 2]);
        let err = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_expected_count() {
        let mut bytes = encode_idx_labels(&[1, 2, 3, 4]);
        bytes.truncate(10);
        let err = parse_idx_labels(&bytes).unwrap_err();
        assert!(matches!(err, FttnError::Format { offset: 10, .. }));
        assert!(err.to_string().contains("expected 4 bytes"), "{err}");
        assert!(matches!(parse_idx_labels(&bytes[..5]), Err(FttnError::Format { offset: 4, .. })));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![0.5; 4], vec![0], 2, 2, 2).is_ok());
        assert!(Dataset::new(vec![1.5; 4], vec![0], 2, 2, 2).is_err());
        assert!(Dataset::new(vec![0.5; 4], vec![2], 2, 2, 2).is_err());
        assert!(Dataset::new(vec![0.5; 3], vec![0], 2, 2, 2).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let d = toy(10);
        let (a, b) = split(&d, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut all: Vec<Vec<u64>> = (0..5)
            .flat_map(|k| [a.image(k), b.image(k)])
            .map(|img| img.iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        let mut orig: Vec<Vec<u64>> = (0..10).map(|k| d.image(k).iter().map(|v| v.to_bits()).collect()).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split(&d, 0.5, 3).unwrap(), (a, b));
        assert!(split(&d, 0.0, 1).is_err());
        assert!(split(&d, 1.0, 1).is_err());
    }

    #[test]
    fn batches_cover_a_permutation() {
        let d = toy(103);
        let sizes: Vec<usize> = batches(&d, 50, 1).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![50, 50, 3]);
        let mut seen: Vec<usize> = batches(&d, 50, 1).flat_map(|b| b.indices).collect();
        let first_order = seen.clone();
        seen.sort();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
        let other: Vec<usize> = batches(&d, 50, 2).flat_map(|b| b.indices).collect();
        assert_ne!(first_order, other);
        let again: Vec<usize> = batches(&d, 50, 1).flat_map(|b| b.indices).collect();
        assert_eq!(first_order, again);
    }

    #[test]
    fn downscale_averages_blocks() {
        let img: Vec<f64> = (0..16).map(|k| k as f64 / 15.0).collect();
        let d = Dataset::new(img, vec![1], 2, 4, 4).unwrap();
        let small = d.downscale(2).unwrap();
        assert_eq!((small.height(), small.width()), (2, 2));
        let expected = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 15.0;
        assert!((small.image(0)[0] - expected).abs() < 1e-15);
        assert!(d.downscale(3).is_err());
        assert_eq!(d.downscale(4).unwrap(), d);
    }

    #[test]
    fn gzip_is_sniffed() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let raw = encode_idx_labels(&[4, 2]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let gz_path = dir.path().join("labels.gz");
        write_file(&gz_path, &enc.finish().unwrap()).unwrap();
        let plain_path = dir.path().join("labels");
        write_file(&plain_path, &raw).unwrap();
        assert_eq!(load_idx_labels(&gz_path).unwrap(), vec![4, 2]);
        assert_eq!(load_idx_labels(&plain_path).unwrap(), vec![4, 2]);
        assert!(matches!(load_idx_labels(dir.path().join("missing")), Err(FttnError::Io { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn idx_bytes_round_trip(pixels in proptest::collection::vec(any::<u8>(), 12), labels in proptest::collection::vec(0u8..10, 3)) {
                let mut bytes = Vec::new();
                for v in [IMAGE_MAGIC, 3, 2, 2] {
                    bytes.extend_from_slice(&v.to_be_bytes());
                }
                bytes.extend_from_slice(&pixels);
                let imgs = parse_idx_images(&bytes).unwrap();
                prop_assert_eq!(encode_idx_images(&imgs), bytes);
                let lab_bytes = encode_idx_labels(&labels);
                prop_assert_eq!(encode_idx_labels(&parse_idx_labels(&lab_bytes).unwrap()), lab_bytes);
            }
        }
    }
}
