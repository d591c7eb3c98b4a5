//! Datasets: IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary readers, the
//! MultiMNIST generator, and seeded minibatch streams.

mod batch;
mod cifar;
mod idx;
mod multimnist;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use batch::{batches, Batch, BatchStream, EpochBatches};
pub use cifar::read_cifar10;
pub use idx::{parse_idx, read_idx, read_idx_labels, write_idx, IdxFile, IdxKind};
pub use multimnist::{
    make_multimnist, make_multimnist_with_layout, overlay, write_multimnist, Composite,
    MULTI_CANVAS, MULTI_MAX_SHIFT,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// One or two distinct class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelSet {
    first: u8,
    second: Option<u8>,
}

impl LabelSet {
    pub fn single(label: u8) -> Self {
        LabelSet {
            first: label,
            second: None,
        }
    }

    /// A two-class set; the classes must differ.
    pub fn pair(a: u8, b: u8) -> Result<Self> {
        if a == b {
            return Err(Error::Data(format!("label pair repeats class {a}")));
        }
        Ok(LabelSet {
            first: a.min(b),
            second: Some(a.max(b)),
        })
    }

    pub fn first(&self) -> u8 {
        self.first
    }

    pub fn len(&self) -> usize {
        1 + self.second.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, class: usize) -> bool {
        self.first as usize == class || self.second.map(|s| s as usize) == Some(class)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.first as usize).chain(self.second.map(|s| s as usize))
    }

    pub fn max_class(&self) -> usize {
        self.second.unwrap_or(self.first).max(self.first) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train|test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Mnist,
    Fashion,
    Cifar10,
    MultiMnist,
}

impl Source {
    pub const NAMES: &'static str = "mnist|fashion|cifar10|multimnist";
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Mnist => "mnist",
            Source::Fashion => "fashion",
            Source::Cifar10 => "cifar10",
            Source::MultiMnist => "multimnist",
        })
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Source::Mnist),
            "fashion" | "fashion-mnist" => Ok(Source::Fashion),
            "cifar10" | "cifar-10" => Ok(Source::Cifar10),
            "multimnist" => Ok(Source::MultiMnist),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` ({})",
                Source::NAMES
            ))),
        }
    }
}

/// A split stored as one contiguous N×C×H×W tensor with per-image label sets.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub source: Source,
    images: Tensor<f32>,
    labels: Vec<LabelSet>,
}

impl DatasetSplit {
    pub fn new(
        name: SplitName,
        source: Source,
        images: Tensor<f32>,
        labels: Vec<LabelSet>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!(
                "images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| l.max_class() >= NUM_CLASSES) {
            return Err(Error::LabelRange {
                label: bad.max_class(),
                classes: NUM_CLASSES,
            });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("pixel values outside [0, 1]".into()));
        }
        Ok(DatasetSplit {
            name,
            source,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let len = self.image_shape().iter().product::<usize>();
        &self.images.data()[index * len..(index + 1) * len]
    }

    /// Number of distinct classes appearing in the labels.
    pub fn class_count(&self) -> usize {
        let mut seen = [false; NUM_CLASSES];
        for l in &self.labels {
            for c in l.iter() {
                seen[c] = true;
            }
        }
        seen.iter().filter(|&&s| s).count()
    }

    /// Keeps the first `limit` items.
    pub fn truncate(self, limit: usize) -> Result<Self> {
        if limit == 0 {
            return Err(Error::Config("split limit must be >= 1".into()));
        }
        if limit >= self.len() {
            return Ok(self);
        }
        let [c, h, w] = self.image_shape();
        let data = self.images.data()[..limit * c * h * w].to_vec();
        DatasetSplit::new(
            self.name,
            self.source,
            Tensor::new(&[limit, c, h, w], data)?,
            self.labels[..limit].to_vec(),
        )
    }

    /// Gathers the given items into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let [c, h, w] = self.image_shape();
        let len = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Batch {
            images: Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            indices: indices.to_vec(),
        })
    }
}

fn resolve(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Data(format!(
        "missing dataset file {} (or .gz)",
        plain.display()
    )))
}

/// Loads an MNIST-layout split (`train-*` / `t10k-*` IDX files, optionally gzipped).
pub fn load_mnist_split(dir: &Path, name: SplitName, source: Source) -> Result<DatasetSplit> {
    let prefix = match name {
        SplitName::Train => "train",
        SplitName::Test => "t10k",
    };
    let images = read_idx(
        &resolve(dir, &format!("{prefix}-images-idx3-ubyte"))?,
        IdxKind::Images,
    )?;
    let labels = read_idx_labels(&resolve(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    let [n, h, w] = [images.shape()[0], images.shape()[1], images.shape()[2]];
    let images = images.reshape(&[n, 1, h, w])?;
    let labels = labels.into_iter().map(LabelSet::single).collect();
    DatasetSplit::new(name, source, images, labels)
}

/// Loads CIFAR-10 batches from a directory: `data_batch_{1..5}.bin` or `test_batch.bin`.
pub fn load_cifar10_split(dir: &Path, name: SplitName) -> Result<DatasetSplit> {
    let files: Vec<PathBuf> = match name {
        SplitName::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect(),
        SplitName::Test => vec![dir.join("test_batch.bin")],
    };
    if files.is_empty() || !files.iter().all(|p| p.exists()) {
        return Err(Error::Data(format!(
            "missing CIFAR-10 {name} batches in {}",
            dir.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let split = read_cifar10(f)?;
        data.extend_from_slice(split.images.data());
        labels.extend_from_slice(&split.labels);
    }
    let n = labels.len();
    DatasetSplit::new(
        name,
        Source::Cifar10,
        Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_sets() {
        let p = LabelSet::pair(7, 2).unwrap();
        assert_eq!(p.iter().collect::<Vec<_>>(), vec![2, 7]);
        assert!(p.contains(7) && p.contains(2) && !p.contains(3));
        assert_eq!(p, LabelSet::pair(2, 7).unwrap());
        assert!(LabelSet::pair(4, 4).is_err());
        assert_eq!(LabelSet::single(3).len(), 1);
    }

    #[test]
    fn split_rejects_bad_pixels_and_labels() {
        let img = Tensor::full(&[1, 1, 2, 2], 1.5f32);
        assert!(DatasetSplit::new(
            SplitName::Train,
            Source::Mnist,
            img,
            vec![LabelSet::single(0)]
        )
        .is_err());
        let img = Tensor::full(&[1, 1, 2, 2], 0.5f32);
        assert!(matches!(
            DatasetSplit::new(
                SplitName::Train,
                Source::Mnist,
                img,
                vec![LabelSet::single(10)]
            ),
            Err(Error::LabelRange { .. })
        ));
    }
}
