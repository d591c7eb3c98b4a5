use std::fs;
use std::path::Path;

use super::{DatasetSplit, LabelSet, Source, SplitName, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;
const RECORD: usize = 1 + PIXELS;

/// Reads one CIFAR-10 binary batch: records of 1 label byte followed by
/// 3072 channel-major pixel bytes.
pub fn read_cifar10(path: &Path) -> Result<DatasetSplit> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % RECORD) as u64,
            format!(
                "length {} is not a positive multiple of {RECORD}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::LabelRange {
                label: rec[0] as usize,
                classes: NUM_CLASSES,
            });
        }
        labels.push(LabelSet::single(rec[0]));
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let name = if path
        .file_name()
        .is_some_and(|f| f.to_string_lossy().starts_with("test"))
    {
        SplitName::Test
    } else {
        SplitName::Train
    };
    DatasetSplit::new(
        name,
        Source::Cifar10,
        Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
    )
}
