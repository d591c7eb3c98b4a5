//! MultiMNIST: two digits of different classes, each shifted by up to
//! `MULTI_MAX_SHIFT` pixels per axis, overlaid by pixel-wise maximum.

use std::path::Path;

use rand::Rng;

use super::{write_idx, DatasetSplit, LabelSet, Source};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub const MULTI_MAX_SHIFT: i32 = 4;
/// Canvas side for 28×28 digits: 28 + 2·4.
pub const MULTI_CANVAS: usize = 36;

/// Provenance of one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Composite {
    pub first: usize,
    pub second: usize,
    /// `(dy, dx)` offsets from the centred position.
    pub shift_first: (i32, i32),
    pub shift_second: (i32, i32),
    pub labels: LabelSet,
}

/// Places two `side × side` digits on a `(side + 2·MULTI_MAX_SHIFT)²` canvas.
/// Shifts within ±`MULTI_MAX_SHIFT` always land inside the canvas, so nothing is cropped.
pub fn overlay(
    a: &[f32],
    b: &[f32],
    side: usize,
    shift_a: (i32, i32),
    shift_b: (i32, i32),
) -> Result<Vec<f32>> {
    if a.len() != side * side || b.len() != side * side {
        return Err(Error::Data(format!(
            "overlay expects two {side}×{side} digits"
        )));
    }
    let canvas = side + 2 * MULTI_MAX_SHIFT as usize;
    let mut out = vec![0.0f32; canvas * canvas];
    for (digit, (dy, dx)) in [(a, shift_a), (b, shift_b)] {
        if dy.abs() > MULTI_MAX_SHIFT || dx.abs() > MULTI_MAX_SHIFT {
            return Err(Error::Data(format!(
                "shift ({dy}, {dx}) exceeds ±{MULTI_MAX_SHIFT}"
            )));
        }
        let top = (MULTI_MAX_SHIFT + dy) as usize;
        let left = (MULTI_MAX_SHIFT + dx) as usize;
        for y in 0..side {
            let row = &mut out[(top + y) * canvas + left..][..side];
            for (o, &v) in row.iter_mut().zip(&digit[y * side..(y + 1) * side]) {
                *o = o.max(v);
            }
        }
    }
    Ok(out)
}

/// Generates `count` overlapped samples from a single-label square split.
pub fn make_multimnist_with_layout(
    base: &DatasetSplit,
    count: usize,
    seed: u64,
) -> Result<(DatasetSplit, Vec<Composite>)> {
    if count == 0 {
        return Err(Error::Config("MultiMNIST count must be >= 1".into()));
    }
    let [c, h, w] = base.image_shape();
    if c != 1 || h != w {
        return Err(Error::Data(format!(
            "MultiMNIST needs single-channel square digits, got {c}×{h}×{w}"
        )));
    }
    if base.labels().iter().any(|l| l.len() != 1) {
        return Err(Error::Data(
            "MultiMNIST base split must be single-label".into(),
        ));
    }
    if base.class_count() < 2 {
        return Err(Error::Data(
            "MultiMNIST base split needs at least two classes".into(),
        ));
    }
    let side = h;
    let canvas = side + 2 * MULTI_MAX_SHIFT as usize;
    let mut rng = SeedStream::new(seed).split("multimnist").rng();
    let mut pixels = Vec::with_capacity(count * canvas * canvas);
    let mut layout = Vec::with_capacity(count);
    let n = base.len();
    let shift = |rng: &mut rand_chacha::ChaCha8Rng| {
        (
            rng.gen_range(-MULTI_MAX_SHIFT..=MULTI_MAX_SHIFT),
            rng.gen_range(-MULTI_MAX_SHIFT..=MULTI_MAX_SHIFT),
        )
    };
    for _ in 0..count {
        let first = rng.gen_range(0..n);
        let first_label = base.labels()[first].first();
        let second = loop {
            let candidate = rng.gen_range(0..n);
            if base.labels()[candidate].first() != first_label {
                break candidate;
            }
        };
        let shift_first = shift(&mut rng);
        let shift_second = shift(&mut rng);
        let labels = LabelSet::pair(first_label, base.labels()[second].first())?;
        pixels.extend(overlay(
            base.image(first),
            base.image(second),
            side,
            shift_first,
            shift_second,
        )?);
        layout.push(Composite {
            first,
            second,
            shift_first,
            shift_second,
            labels,
        });
    }
    let labels = layout.iter().map(|c| c.labels).collect();
    let split = DatasetSplit::new(
        base.name,
        Source::MultiMnist,
        Tensor::new(&[count, 1, canvas, canvas], pixels)?,
        labels,
    )?;
    Ok((split, layout))
}

pub fn make_multimnist(base: &DatasetSplit, count: usize, seed: u64) -> Result<DatasetSplit> {
    make_multimnist_with_layout(base, count, seed).map(|(split, _)| split)
}

/// Exports a MultiMNIST split as `<prefix>-images-idx3-ubyte` (N×36×36) and
/// `<prefix>-labels-idx2-ubyte` (N×2, both classes per row, ascending).
pub fn write_multimnist(split: &DatasetSplit, dir: &Path, prefix: &str) -> Result<()> {
    let [_, h, w] = split.image_shape();
    let bytes: Vec<u8> = split
        .images()
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &[split.len(), h, w],
        &bytes,
    )?;
    let mut labels = Vec::with_capacity(2 * split.len());
    for l in split.labels() {
        let mut it = l.iter();
        let a = it.next().expect("non-empty label set");
        labels.push(a as u8);
        labels.push(it.next().unwrap_or(a) as u8);
    }
    write_idx(
        &dir.join(format!("{prefix}-labels-idx2-ubyte")),
        &[split.len(), 2],
        &labels,
    )
}
