//! Synthetic classification data and IDX-format image ingestion, with
//! deterministic batching and the two standard image augmentations.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Feature matrix plus class labels for one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if n == 0 || labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexError(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape (without the leading N).
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Copy of the samples at `indices`, keeping feature rank.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sample_len: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let start = i * sample_len;
            data.extend_from_slice(&self.features.data()[start..start + sample_len]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let features = Tensor::new(shape, data).expect("gather of finite data");
        (features, labels)
    }
}

/// Gaussian-blob generator: one center per class, isotropic noise around it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub center_spread: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.samples_per_class < 1 || self.input_dim < 1 {
            return Err(Error::InvalidParameter(format!(
                "synthetic spec needs classes >= 2, samples >= 1, dim >= 1, got {self:?}"
            )));
        }
        if self.noise_scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise scale must be positive, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Deterministic blobs with an 80/20 per-class train/test split. Class
/// centers are drawn once from the seed; samples are center + noise.
pub fn gen_gaussian_blobs(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng::stream_rng(spec.seed, rng::Stream::DataGen);
    let dim = spec.input_dim;
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| rng::normal(&mut rng) * spec.center_spread)
                .collect()
        })
        .collect();

    let per_class = spec.samples_per_class;
    let train_per_class = (per_class * 4) / 5;
    let mut train_data = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_data = Vec::new();
    let mut test_labels = Vec::new();
    for (class, center) in centers.iter().enumerate() {
        for s in 0..per_class {
            let sample: Vec<f64> = center
                .iter()
                .map(|&c| c + rng::normal(&mut rng) * spec.noise_scale)
                .collect();
            if s < train_per_class {
                train_data.extend_from_slice(&sample);
                train_labels.push(class);
            } else {
                test_data.extend_from_slice(&sample);
                test_labels.push(class);
            }
        }
    }
    let train = Dataset::new(
        Tensor::new(vec![train_labels.len(), dim], train_data)?,
        train_labels,
        spec.num_classes,
        Split::Train,
    )?;
    let test = Dataset::new(
        Tensor::new(vec![test_labels.len(), dim], test_data)?,
        test_labels,
        spec.num_classes,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Parse an IDX image/label file pair. Pixels are scaled to [0, 1] and then
/// standardized with the mean/std computed from this dataset. Output
/// features are [N, 1, H, W].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, h, w) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() * h * w {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 4,
            detail: format!(
                "count mismatch: {} images vs {} labels",
                images.len() / (h * w),
                labels.len()
            ),
        });
    }
    let n = labels.len();

    let mut data: Vec<f64> = images.iter().map(|&b| b as f64 / 255.0).collect();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
    let std = var.sqrt().max(1e-12);
    for v in &mut data {
        *v = (*v - mean) / std;
    }

    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        num_classes.max(2),
        Split::Train,
    )
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("bad images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let h = read_be_u32(&bytes, 8, path)? as usize;
    let w = read_be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: bytes.len().min(expected) as u64,
            detail: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok((bytes[16..].to_vec(), h, w))
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("bad labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: bytes.len().min(8 + n) as u64,
            detail: format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentFlags {
    pub horizontal_flip: bool,
    pub pad_crop: bool,
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags::default()
    }

    pub fn any(&self) -> bool {
        self.horizontal_flip || self.pad_crop
    }
}

const CROP_PAD: usize = 4;

/// Per-image augmentation: flip with p = 0.5 and/or 4-pixel-pad random crop.
/// Labels are untouched by construction; draws come from the caller's
/// augmentation stream. With all flags off this is the identity for any
/// feature shape.
pub fn augment(features: &Tensor, flags: AugmentFlags, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !flags.any() {
        return Ok(features.clone());
    }
    if features.rank() != 4 {
        return Err(Error::InvalidParameter(format!(
            "augmentation needs [N, C, H, W] image features, got shape {:?}",
            features.shape()
        )));
    }
    let s = features.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = features.data().to_vec();
    for img in 0..n {
        let base = img * c * h * w;
        if flags.horizontal_flip && rng.random::<f64>() < 0.5 {
            flip_horizontal(&mut data[base..base + c * h * w], c, h, w);
        }
        if flags.pad_crop {
            let dy = rng.random_range(0..=2 * CROP_PAD);
            let dx = rng.random_range(0..=2 * CROP_PAD);
            pad_crop(&mut data[base..base + c * h * w], c, h, w, dy, dx);
        }
    }
    Tensor::new(s.to_vec(), data)
}

/// Mirror each row of every channel in place.
pub fn flip_horizontal(img: &mut [f64], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        for row in 0..h {
            let base = (ch * h + row) * w;
            img[base..base + w].reverse();
        }
    }
}

/// Zero-pad by `CROP_PAD` on each side and crop back at offset (dy, dx).
fn pad_crop(img: &mut [f64], c: usize, h: usize, w: usize, dy: usize, dx: usize) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // Position in the padded image, shifted back by the offset.
                let py = y + dy;
                let px = x + dx;
                let value = if py >= CROP_PAD && py < h + CROP_PAD && px >= CROP_PAD && px < w + CROP_PAD
                {
                    src[(ch * h + (py - CROP_PAD)) * w + (px - CROP_PAD)]
                } else {
                    0.0
                };
                img[(ch * h + y) * w + x] = value;
            }
        }
    }
}

/// Seeded epoch batching over a dataset. Every epoch reshuffles; with a
/// fixed seed the whole batch sequence is reproducible.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    drop_last: bool,
    rng: ChaCha8Rng,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        seed_rng: ChaCha8Rng,
        drop_last: bool,
    ) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::InvalidParameter(format!(
                "batch size {batch_size} invalid for dataset of {} samples",
                dataset.len()
            )));
        }
        Ok(BatchIterator {
            dataset,
            batch_size,
            drop_last,
            rng: seed_rng,
        })
    }

    /// Draw the next epoch: a fresh permutation chunked into batches.
    pub fn next_epoch(&mut self) -> Vec<(Tensor, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.batch_size) {
            if chunk.len() < self.batch_size && self.drop_last {
                break;
            }
            let (features, labels) = self.dataset.gather(chunk);
            batches.push((features, labels));
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn toy_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            samples_per_class: 10,
            input_dim: 4,
            center_spread: 3.0,
            noise_scale: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        let (tr1, te1) = gen_gaussian_blobs(&toy_spec()).unwrap();
        let (tr2, te2) = gen_gaussian_blobs(&toy_spec()).unwrap();
        assert_eq!(tr1.features.data(), tr2.features.data());
        assert_eq!(te1.labels, te2.labels);
        assert_eq!(tr1.len(), 24);
        assert_eq!(te1.len(), 6);
    }

    #[test]
    fn blob_counts_per_class_match_spec() {
        let spec = toy_spec();
        let (train, test) = gen_gaussian_blobs(&spec).unwrap();
        for class in 0..spec.num_classes {
            let count = train.labels.iter().filter(|&&l| l == class).count()
                + test.labels.iter().filter(|&&l| l == class).count();
            assert_eq!(count, spec.samples_per_class);
        }
    }

    #[test]
    fn near_zero_noise_is_separable_by_nearest_center() {
        let spec = SyntheticSpec {
            noise_scale: 1e-9,
            ..toy_spec()
        };
        let (train, test) = gen_gaussian_blobs(&spec).unwrap();
        // Estimate centers from train, then classify test by nearest center.
        let dim = spec.input_dim;
        let mut centers = vec![vec![0.0; dim]; spec.num_classes];
        let mut counts = vec![0usize; spec.num_classes];
        for (i, &label) in train.labels.iter().enumerate() {
            let row = &train.features.data()[i * dim..(i + 1) * dim];
            for (c, v) in centers[label].iter_mut().zip(row) {
                *c += v;
            }
            counts[label] += 1;
        }
        for (center, count) in centers.iter_mut().zip(&counts) {
            for v in center.iter_mut() {
                *v /= *count as f64;
            }
        }
        let correct = test
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &label)| {
                let x = &test.features.data()[i * dim..(i + 1) * dim];
                let nearest = centers
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
                        let db: f64 = b.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
                        da.total_cmp(&db)
                    })
                    .map(|(c, _)| c)
                    .unwrap();
                nearest == label
            })
            .count();
        assert_eq!(correct, test.len());
    }

    #[test]
    fn batches_partition_the_epoch() {
        let (train, _) = gen_gaussian_blobs(&toy_spec()).unwrap();
        let mut it =
            BatchIterator::new(&train, 5, stream_rng(3, Stream::BatchOrder), false).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        let epoch = it.next_epoch();
        for (features, labels) in &epoch {
            assert_eq!(features.shape()[0], labels.len());
            seen.extend(labels.iter().copied());
        }
        assert_eq!(seen.len(), train.len());
    }

    #[test]
    fn drop_last_yields_full_batches_only() {
        let (train, _) = gen_gaussian_blobs(&toy_spec()).unwrap(); // 24 samples
        let mut it =
            BatchIterator::new(&train, 9, stream_rng(3, Stream::BatchOrder), true).unwrap();
        let epoch = it.next_epoch();
        assert_eq!(epoch.len(), 2);
        assert!(epoch.iter().all(|(f, _)| f.shape()[0] == 9));
    }

    #[test]
    fn same_seed_same_batch_order() {
        let (train, _) = gen_gaussian_blobs(&toy_spec()).unwrap();
        let a = BatchIterator::new(&train, 4, stream_rng(9, Stream::BatchOrder), true)
            .unwrap()
            .next_epoch();
        let b = BatchIterator::new(&train, 4, stream_rng(9, Stream::BatchOrder), true)
            .unwrap()
            .next_epoch();
        for ((fa, la), (fb, lb)) in a.iter().zip(&b) {
            assert_eq!(fa.data(), fb.data());
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let (train, _) = gen_gaussian_blobs(&toy_spec()).unwrap();
        assert!(BatchIterator::new(&train, 1000, stream_rng(0, Stream::BatchOrder), false).is_err());
    }

    #[test]
    fn ten_samples_batch_three_drop_last() {
        let features = Tensor::new(vec![10, 2], (0..20).map(f64::from).collect()).unwrap();
        let labels = (0..10).map(|i| i % 2).collect();
        let data = Dataset::new(features, labels, 2, Split::Train).unwrap();
        let mut it = BatchIterator::new(&data, 3, stream_rng(1, Stream::BatchOrder), true).unwrap();
        let epoch = it.next_epoch();
        assert_eq!(epoch.len(), 3);
        let mut seen: Vec<i64> = epoch
            .iter()
            .flat_map(|(f, _)| f.data().chunks(2).map(|row| row[0] as i64 / 2))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9, "nine distinct indices");
    }

    #[test]
    fn labels_file_with_images_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[7u8; 4]);
        std::fs::write(&images, &img).unwrap();
        // Labels file wrongly carrying the images magic.
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        lab.extend_from_slice(&1u32.to_be_bytes());
        lab.push(0);
        std::fs::write(&labels, &lab).unwrap();
        match load_idx(&images, &labels) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn augment_identity_when_disabled() {
        let features = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let mut rng = stream_rng(0, Stream::Augment);
        let out = augment(&features, AugmentFlags::none(), &mut rng).unwrap();
        assert_eq!(out.data(), features.data());
    }

    #[test]
    fn augment_rejects_non_image_features() {
        let features = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let mut rng = stream_rng(0, Stream::Augment);
        let flags = AugmentFlags {
            horizontal_flip: true,
            pad_crop: false,
        };
        assert!(augment(&features, flags, &mut rng).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let mut img: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let original = img.clone();
        flip_horizontal(&mut img, 1, 3, 4);
        assert_ne!(img, original);
        flip_horizontal(&mut img, 1, 3, 4);
        assert_eq!(img, original);
    }

    #[test]
    fn centered_crop_is_identity() {
        let mut img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let original = img.clone();
        pad_crop(&mut img, 1, 4, 4, CROP_PAD, CROP_PAD);
        assert_eq!(img, original);
    }
}
