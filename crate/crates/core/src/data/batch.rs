use rand::seq::SliceRandom;

use super::{DatasetSplit, LabelSet};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// `p` images (p×C×H×W) with their label sets and source indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<LabelSet>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One shuffled pass over a split; the final partial batch is kept.
pub struct EpochBatches<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self
            .split
            .gather(&self.order[self.cursor..end])
            .expect("indices come from the split");
        self.cursor = end;
        Some(batch)
    }
}

fn check(split: &DatasetSplit, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if batch_size > split.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds split size {}",
            split.len()
        )));
    }
    Ok(())
}

/// Shuffled batches for one epoch, deterministic in `seed`.
pub fn batches(split: &DatasetSplit, batch_size: usize, seed: u64) -> Result<EpochBatches<'_>> {
    check(split, batch_size)?;
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut SeedStream::new(seed).split("shuffle").rng());
    Ok(EpochBatches {
        split,
        order,
        batch_size,
        cursor: 0,
    })
}

/// Endless sequence of epochs, each reshuffled from its own substream.
pub struct BatchStream<'a> {
    split: &'a DatasetSplit,
    batch_size: usize,
    seeds: SeedStream,
    epoch: u64,
    current: EpochBatches<'a>,
}

impl<'a> BatchStream<'a> {
    pub fn new(split: &'a DatasetSplit, batch_size: usize, seeds: SeedStream) -> Result<Self> {
        let current = batches(split, batch_size, seeds.split_indexed("epoch", 0).seed())?;
        Ok(BatchStream {
            split,
            batch_size,
            seeds,
            epoch: 0,
            current,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if let Some(b) = self.current.next() {
            return Some(b);
        }
        self.epoch += 1;
        let seed = self.seeds.split_indexed("epoch", self.epoch).seed();
        self.current = batches(self.split, self.batch_size, seed).ok()?;
        self.current.next()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, SplitName};

    fn split(n: usize) -> DatasetSplit {
        let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f32 / n as f32);
        let labels = (0..n).map(|i| LabelSet::single((i % 10) as u8)).collect();
        DatasetSplit::new(SplitName::Train, Source::Mnist, images, labels).unwrap()
    }

    #[test]
    fn partial_final_batch() {
        let s = split(10);
        let sizes: Vec<usize> = batches(&s, 3, 1).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn same_seed_same_order() {
        let s = split(10);
        let a: Vec<usize> = batches(&s, 3, 5).unwrap().flat_map(|b| b.indices).collect();
        let b: Vec<usize> = batches(&s, 3, 5).unwrap().flat_map(|b| b.indices).collect();
        let c: Vec<usize> = batches(&s, 3, 6).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_batch_preserves_multiset() {
        let s = split(10);
        let all: Vec<Batch> = batches(&s, 10, 2).unwrap().collect();
        assert_eq!(all.len(), 1);
        let mut idx = all[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_is_config_error() {
        assert!(matches!(batches(&split(4), 5, 0), Err(Error::Config(_))));
        assert!(matches!(batches(&split(4), 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn stream_crosses_epochs() {
        let s = split(5);
        let mut stream = BatchStream::new(&s, 2, SeedStream::new(3)).unwrap();
        let sizes: Vec<usize> = stream.by_ref().take(6).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 2, 2, 1]);
        assert_eq!(stream.epoch(), 1);
    }
}
