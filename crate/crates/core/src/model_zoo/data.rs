//! Labeled image sets and CIFAR-10 binary ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, input_err, Result};
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 binary record: one label byte and a 3x32x32 planar image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Per-channel affine normalization applied to `[0, 1]` pixel intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics of a set of 8-bit planar images.
    pub fn fit(images: &[RawImage], channels: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| input_err!("cannot fit normalization on zero images"))?;
        let plane = first.pixels.len() / channels;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for img in images {
            for c in 0..channels {
                for &p in &img.pixels[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (images.len() * plane) as f64;
        let std = (0..channels)
            .map(|c| {
                let m = mean[c] / n;
                (sq[c] / n - m * m).max(0.0).sqrt().max(1e-3)
            })
            .collect();
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, channel: usize, intensity: f64) -> f64 {
        (intensity - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// An 8-bit planar image with its label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub label: u8,
    /// Channel-major (planar) pixels.
    pub pixels: Vec<u8>,
}

/// Parses concatenated CIFAR-10 binary records.
pub fn read_cifar_records(bytes: &[u8]) -> Result<Vec<RawImage>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|r| RawImage {
            label: r[0],
            pixels: r[1..].to_vec(),
        })
        .collect())
}

pub fn write_cifar_records(images: &[RawImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD);
    for img in images {
        if img.pixels.len() != CIFAR_RECORD - 1 {
            return Err(input_err!(
                "CIFAR records hold 3x32x32 images, got {} pixels",
                img.pixels.len()
            ));
        }
        out.push(img.label);
        out.extend_from_slice(&img.pixels);
    }
    Ok(out)
}

/// Loads `data_batch_*.bin` (sorted by name) and `test_batch.bin` from `dir`.
pub fn load_cifar_dir(dir: &Path) -> Result<(Vec<RawImage>, Vec<RawImage>)> {
    let mut batches: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(input_err!("no data_batch_*.bin files in {}", dir.display()));
    }
    let mut train = Vec::new();
    for b in &batches {
        train.extend(read_cifar_records(&std::fs::read(b)?)?);
    }
    let test_path = dir.join("test_batch.bin");
    let test = read_cifar_records(&std::fs::read(&test_path)?)?;
    Ok((train, test))
}

/// Writes `records` in the CIFAR-10 directory layout understood by [`load_cifar_dir`].
pub fn write_cifar_dir(
    dir: &Path,
    train: &[RawImage],
    test: &[RawImage],
    batches: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let per = train.len().div_ceil(batches.max(1)).max(1);
    for (i, chunk) in train.chunks(per).enumerate() {
        std::fs::write(
            dir.join(format!("data_batch_{}.bin", i + 1)),
            write_cifar_records(chunk)?,
        )?;
    }
    std::fs::write(dir.join("test_batch.bin"), write_cifar_records(test)?)?;
    Ok(())
}

/// Normalized images `(N, C, H, W)` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(input_err!(
                "dataset images must be (N, C, H, W), got {:?}",
                images.shape()
            ));
        }
        let (n, c, _, _) = images.dims4();
        if labels.len() != n {
            return Err(input_err!("{} images but {} labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(input_err!(
                "label {bad} out of range for {num_classes} classes"
            ));
        }
        if normalization.channels() != c {
            return Err(input_err!(
                "normalization has {} channels, images {c}",
                normalization.channels()
            ));
        }
        if !images.all_finite() {
            return Err(input_err!("dataset contains non-finite values"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            normalization,
        })
    }

    /// Normalizes 8-bit planar images of shape `(channels, height, width)`.
    pub fn from_raw(
        raw: &[RawImage],
        shape: [usize; 3],
        num_classes: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let [c, h, w] = shape;
        let plane = h * w;
        let mut data = Vec::with_capacity(raw.len() * c * plane);
        for img in raw {
            if img.pixels.len() != c * plane {
                return Err(input_err!(
                    "image has {} pixels, expected {}",
                    img.pixels.len(),
                    c * plane
                ));
            }
            for ch in 0..c {
                for &p in &img.pixels[ch * plane..(ch + 1) * plane] {
                    data.push(normalization.normalize(ch, p as f64 / 255.0));
                }
            }
        }
        let labels = raw.iter().map(|r| r.label as usize).collect();
        Self::new(
            Tensor::new(&[raw.len(), c, h, w], data)?,
            labels,
            num_classes,
            normalization,
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

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// `(C, H, W)` of each image.
    pub fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dims4();
        [c, h, w]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images and labels at `idx`, stacked.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_first(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn image(&self, i: usize) -> super::ImageTensor {
        super::ImageTensor::from_parts(self.images.index_first(i), self.normalization.clone())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.batch(idx);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    /// The first `n` images.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits off the last `fraction` of the images.
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Dataset) {
        let tail = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - tail.min(self.len());
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&rest))
    }

    /// Number of distinct labels that actually occur.
    pub fn classes_present(&self) -> usize {
        let mut seen = vec![false; self.num_classes];
        self.labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> RawImage {
        RawImage {
            label,
            pixels: (0..3072)
                .map(|i| fill.wrapping_add((i % 7) as u8))
                .collect(),
        }
    }

    #[test]
    fn cifar_round_trip() {
        let recs = vec![record(3, 10), record(9, 200)];
        let bytes = write_cifar_records(&recs).unwrap();
        assert_eq!(bytes.len(), 2 * 3073);
        assert_eq!(bytes[0], 3);
        assert_eq!(bytes[3073], 9);
        assert_eq!(read_cifar_records(&bytes).unwrap(), recs);
    }

    #[test]
    fn cifar_plane_order_is_red_green_blue() {
        let mut pixels = vec![0u8; 3072];
        pixels[0] = 11; // red (0, 0)
        pixels[1024] = 22; // green (0, 0)
        pixels[2048 + 33] = 33; // blue (1, 1)
        let mut bytes = vec![5u8];
        bytes.extend_from_slice(&pixels);
        let ds = Dataset::from_raw(
            &read_cifar_records(&bytes).unwrap(),
            [3, 32, 32],
            10,
            Normalization::identity(3),
        )
        .unwrap();
        let img = ds.images().data();
        assert!((img[0] - 11.0 / 255.0).abs() < 1e-15);
        assert!((img[1024] - 22.0 / 255.0).abs() < 1e-15);
        assert!((img[2048 + 32 + 1] - 33.0 / 255.0).abs() < 1e-15);
        assert_eq!(ds.labels(), &[5]);
    }

    #[test]
    fn truncated_records_are_rejected() {
        assert!(read_cifar_records(&[0u8; 3072]).is_err());
    }

    #[test]
    fn split_tail_partitions() {
        let recs: Vec<_> = (0..10).map(|i| record(i % 2, i)).collect();
        let ds = Dataset::from_raw(&recs, [3, 32, 32], 2, Normalization::identity(3)).unwrap();
        let (a, b) = ds.split_tail(0.1);
        assert_eq!((a.len(), b.len()), (9, 1));
        assert_eq!(
            b.images().data(),
            ds.take(10).images().index_first(9).data()
        );
    }
}
