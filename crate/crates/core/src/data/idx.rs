//! IDX container: `00 00 <dtype> <rank>` magic, `rank` big-endian u32 extents,
//! then the row-major payload. Only the unsigned-byte dtype (0x08) is used by
//! the MNIST family. Files starting with the gzip magic are inflated first;
//! byte offsets in errors then refer to the inflated stream.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxKind {
    /// Rank-3 `N × rows × cols` unsigned bytes, scaled to [0, 1].
    Images,
    /// Rank-1 class indices.
    Labels,
}

impl IdxKind {
    fn rank(self) -> u8 {
        match self {
            IdxKind::Images => 3,
            IdxKind::Labels => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxFile {
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX buffer. `path` is only used for error messages.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxFile> {
    if bytes.len() < 4 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            "truncated magic number",
        ));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(
            path,
            0,
            format!("bad magic number {:02x?}", &bytes[..4]),
        ));
    }
    if bytes[2] != UBYTE {
        return Err(Error::format(
            path,
            2,
            format!(
                "unsupported element type 0x{:02x} (only 0x08 unsigned byte)",
                bytes[2]
            ),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::format(path, 3, "rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            "truncated dimension header",
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len: usize = dims.iter().product();
    let available = bytes.len() - header;
    if available < len {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: header declares {len} bytes, {available} present"),
        ));
    }
    if available > len {
        return Err(Error::format(
            path,
            (header + len) as u64,
            format!("{} trailing bytes after payload", available - len),
        ));
    }
    Ok(IdxFile {
        dims,
        payload: bytes[header..].to_vec(),
    })
}

fn read_checked(path: &Path, kind: IdxKind) -> Result<IdxFile> {
    let bytes = read_bytes(path)?;
    if bytes.len() >= 4 && bytes[0] == 0 && bytes[1] == 0 && bytes[3] != kind.rank() {
        return Err(Error::format(
            path,
            3,
            format!(
                "magic {:02x?} has rank {}, {kind:?} need rank {}",
                &bytes[..4],
                bytes[3],
                kind.rank()
            ),
        ));
    }
    parse_idx(&bytes, path)
}

/// Reads an IDX file. Images come back as `N × rows × cols` in [0, 1];
/// labels as a length-N tensor of class indices.
pub fn read_idx(path: &Path, kind: IdxKind) -> Result<Tensor<f32>> {
    let file = read_checked(path, kind)?;
    let data = match kind {
        IdxKind::Images => file.payload.iter().map(|&b| b as f32 / 255.0).collect(),
        IdxKind::Labels => file.payload.iter().map(|&b| b as f32).collect(),
    };
    Tensor::new(&file.dims, data).map_err(|e| Error::format(path, 4, e.to_string()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    Ok(read_checked(path, IdxKind::Labels)?.payload)
}

/// Writes an unsigned-byte IDX file, gzipped when the path ends in `.gz`.
pub fn write_idx(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    let len: usize = dims.iter().product();
    if len != payload.len() || dims.is_empty() || dims.len() > 255 {
        return Err(Error::Data(format!(
            "IDX dims {dims:?} do not match payload of {} bytes",
            payload.len()
        )));
    }
    let mut bytes = Vec::with_capacity(4 + 4 * dims.len() + len);
    bytes.extend_from_slice(&[0, 0, UBYTE, dims.len() as u8]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("IDX extent {d} exceeds u32")))?;
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn rank3_images() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 255, 51, 102, 0, 0, 0, 255]);
        let f = tmp(&bytes);
        let t = read_idx(f.path(), IdxKind::Images).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t[1], 1.0);
        assert!((t[2] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn labels() {
        let f = tmp(&[0, 0, 8, 1, 0, 0, 0, 3, 0, 5, 9]);
        assert_eq!(read_idx_labels(f.path()).unwrap(), vec![0, 5, 9]);
        assert_eq!(
            read_idx(f.path(), IdxKind::Labels).unwrap().data(),
            &[0.0, 5.0, 9.0]
        );
    }

    #[test]
    fn rank2_magic_is_not_images() {
        let f = tmp(&[0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 7]);
        assert!(matches!(
            read_idx(f.path(), IdxKind::Images),
            Err(Error::Format { offset: 3, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let f = tmp(&[0, 0, 8, 1, 0, 0, 0, 4, 1, 2]);
        match read_idx_labels(f.path()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("expected format error, got {other:?}"),
        }
        let f = tmp(&[1, 2, 8, 1]);
        assert!(matches!(
            read_idx_labels(f.path()),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn write_then_read_is_byte_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u8>(),
            gz in any::<bool>(),
        ) {
            let len: usize = dims.iter().product();
            let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join(if gz { "x.idx.gz" } else { "x.idx" });
            write_idx(&path, &dims, &payload).unwrap();
            let back = parse_idx(&read_bytes(&path).unwrap(), &path).unwrap();
            prop_assert_eq!(back.dims, dims);
            prop_assert_eq!(back.payload, payload);
        }
    }
}
