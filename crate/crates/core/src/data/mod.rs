//! Dataset ingestion, synthetic oriented shapes, augmentation and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod cifar;
pub mod synth;

use rand_chacha::ChaCha8Rng;

use crate::error::{QuanError, Result};
use crate::mapping::{map_image_into, MappingStrategy};
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape, Q};

pub use augment::{augment, horizontal_flip, random_crop, AugmentConfig};
pub use checkpoint::{load_checkpoint, restore_module, restore_state, collect_state, save_checkpoint, NamedTensor};
pub use cifar::{encode_cifar10, load_cifar10, load_cifar10_file, parse_cifar10, write_cifar10_file, Cifar10};
pub use synth::{export_synthetic, render_rectangle, synth_oriented_dataset, synth_oriented_with, synth_orientation_classes, SynthConfig, SyntheticOrientedSample};

/// An interleaved 8-bit RGB image with its class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub height: usize,
    pub width: usize,
    /// `H × W × 3`, row-major.
    pub pixels: Vec<u8>,
    pub label: usize,
}

impl ImageRecord {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, label: usize) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(QuanError::Shape(format!(
                "{} bytes for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        Ok(ImageRecord {
            height,
            width,
            pixels,
            label,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Labelled images of a common size.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImageSet {
    pub records: Vec<ImageRecord>,
    pub classes: usize,
}

impl ImageSet {
    pub fn new(records: Vec<ImageRecord>, classes: usize) -> Result<Self> {
        if let Some(first) = records.first() {
            if let Some(bad) = records
                .iter()
                .find(|r| r.height != first.height || r.width != first.width)
            {
                return Err(QuanError::Shape(format!(
                    "mixed image sizes {}x{} and {}x{}",
                    first.height, first.width, bad.height, bad.width
                )));
            }
        }
        if let Some(bad) = records.iter().find(|r| r.label >= classes) {
            return Err(QuanError::Index {
                index: bad.label,
                limit: classes,
            });
        }
        Ok(ImageSet { records, classes })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `n` records.
    pub fn truncated(&self, n: usize) -> ImageSet {
        ImageSet {
            records: self.records.iter().take(n).cloned().collect(),
            classes: self.classes,
        }
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.records.first().map(|r| (r.height, r.width))
    }
}

/// Classification data delivered as quaternion batches.
pub trait LabeledBatches<T: Real> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn classes(&self) -> usize;

    /// Inputs `B × C × H × W × 4` and labels for `indices`. Augmentation, if
    /// any, applies only when `train` is set.
    fn batch(&self, indices: &[usize], train: bool, rng: &mut ChaCha8Rng) -> Result<(QTensor<T>, Vec<usize>)>;
}

/// An image set mapped to quaternions on the fly.
#[derive(Debug, Clone)]
pub struct MappedImages<'a> {
    pub set: &'a ImageSet,
    pub mapping: MappingStrategy,
    pub augment: Option<AugmentConfig>,
}

impl<'a> MappedImages<'a> {
    pub fn new(set: &'a ImageSet, mapping: MappingStrategy, augment: Option<AugmentConfig>) -> Self {
        MappedImages { set, mapping, augment }
    }
}

impl<T: Real> LabeledBatches<T> for MappedImages<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn classes(&self) -> usize {
        self.set.classes
    }

    fn batch(&self, indices: &[usize], train: bool, rng: &mut ChaCha8Rng) -> Result<(QTensor<T>, Vec<usize>)> {
        let (h, w) = self.set.image_size().ok_or(QuanError::Config("empty image set".into()))?;
        let mut out = QTensor::zeros(Shape::new(indices.len(), 1, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        let plane = h * w * Q;
        for (dst, &i) in out.data_mut().chunks_exact_mut(plane).zip(indices) {
            let rec = self.set.records.get(i).ok_or(QuanError::Index {
                index: i,
                limit: self.set.len(),
            })?;
            let aug;
            let rec = match (&self.augment, train) {
                (Some(cfg), true) => {
                    aug = augment(rec, cfg, rng)?;
                    &aug
                }
                _ => rec,
            };
            map_image_into(&rec.pixels, h, w, self.mapping, dst)?;
            labels.push(rec.label);
        }
        Ok((out, labels))
    }
}

/// Pre-built input tensors with labels.
#[derive(Debug, Clone)]
pub struct TensorSet<T> {
    pub inputs: QTensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Real> TensorSet<T> {
    pub fn new(inputs: QTensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().batch != labels.len() {
            return Err(QuanError::Shape(format!(
                "{} inputs for {} labels",
                inputs.shape().batch,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(QuanError::Index { index: bad, limit: classes });
        }
        Ok(TensorSet { inputs, labels, classes })
    }
}

/// Gathers samples `indices` of an `N × C × H × W` tensor into a batch.
pub fn gather<T: Real>(inputs: &QTensor<T>, indices: &[usize]) -> Result<QTensor<T>> {
    let s = inputs.shape();
    let per = s.channels * s.plane() * Q;
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= s.batch {
            return Err(QuanError::Index { index: i, limit: s.batch });
        }
        data.extend_from_slice(&inputs.data()[i * per..(i + 1) * per]);
    }
    QTensor::from_vec([indices.len(), s.channels, s.height, s.width, Q], data)
}

impl<T: Real> LabeledBatches<T> for TensorSet<T> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn batch(&self, indices: &[usize], _train: bool, _rng: &mut ChaCha8Rng) -> Result<(QTensor<T>, Vec<usize>)> {
        let x = gather(&self.inputs, indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}
