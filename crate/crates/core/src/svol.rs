//! SVOL: a minimal little-endian volume container.
//!
//! ```text
//! 0..6        magic "SVOL1\0"
//! 6..10       u32 header length H
//! 10..10+H    UTF-8 JSON {"dims":[nx,ny,nz],"kind":"intensity|binary|soft|posterior"}
//! 10+H..      nx*ny*nz f64 values, x fastest
//! ```
//!
//! No padding and no trailing bytes are allowed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dim3, VolumeGrid, VolumeKind};

pub const MAGIC: [u8; 6] = *b"SVOL1\0";
const PREFIX_LEN: usize = 10;

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [u64; 3],
    kind: String,
}

/// Serializes a grid to SVOL bytes. Invalid grids are rejected.
pub fn encode_svol(grid: &VolumeGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let dims = grid.dims();
    let header = Header {
        dims: [dims.nx as u64, dims.ny as u64, dims.nz as u64],
        kind: grid.kind().as_str().to_string(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 8 * grid.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_svol(bytes: &[u8]) -> Result<VolumeGrid> {
    if bytes.len() >= MAGIC.len() && bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic(bytes[..MAGIC.len()].to_vec()));
    }
    if bytes.len() < PREFIX_LEN {
        if bytes[..bytes.len().min(MAGIC.len())] != MAGIC[..bytes.len().min(MAGIC.len())] {
            return Err(Error::BadMagic(bytes.to_vec()));
        }
        return Err(Error::Truncated {
            expected: PREFIX_LEN,
            actual: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let payload_start = PREFIX_LEN + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Truncated {
            expected: payload_start,
            actual: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])?;
    let kind = VolumeKind::parse(&header.kind)
        .ok_or_else(|| Error::HeaderMismatch(format!("unknown kind {:?}", header.kind)))?;
    let [nx, ny, nz] = header
        .dims
        .map(|d| usize::try_from(d).unwrap_or(usize::MAX));
    let dims = Dim3::new(nx, ny, nz).map_err(|e| Error::HeaderMismatch(e.to_string()))?;
    let expected = dims
        .len()
        .checked_mul(8)
        .and_then(|b| b.checked_add(payload_start))
        .ok_or_else(|| Error::HeaderMismatch(format!("{dims} is too large")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::HeaderMismatch(format!(
            "{dims} needs {expected} bytes but the file has {}",
            bytes.len()
        )));
    }
    let data = bytes[payload_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VolumeGrid::new(dims, kind, data)
}

pub fn read_svol(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    decode_svol(&fs::read(path)?)
}

/// Writes `grid` to `path`. Nothing is written if the grid is invalid.
pub fn write_svol(grid: &VolumeGrid, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_svol(grid)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soft_grid(n: usize, seed: u64) -> VolumeGrid {
        let dims = Dim3::cube(n).unwrap();
        let data = (0..dims.len())
            .map(|t| crate::rng::CounterRng::new(seed, t as u64).uniform())
            .collect();
        VolumeGrid::new(dims, VolumeKind::SoftLabel, data).unwrap()
    }

    #[test]
    fn round_trip_soft_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.svol");
        let grid = soft_grid(8, 11);
        write_svol(&grid, &path).unwrap();
        let back = read_svol(&path).unwrap();
        assert_eq!(back, grid);
        let same_bits = back
            .data()
            .iter()
            .zip(grid.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits);
    }

    #[test]
    fn repeated_writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let grid = soft_grid(5, 3);
        write_svol(&grid, dir.path().join("a.svol")).unwrap();
        write_svol(&grid, dir.path().join("b.svol")).unwrap();
        let a = fs::read(dir.path().join("a.svol")).unwrap();
        let b = fs::read(dir.path().join("b.svol")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_voxel_layout() {
        let dims = Dim3::cube(1).unwrap();
        let grid = VolumeGrid::new(dims, VolumeKind::BinaryLabel, vec![1.0]).unwrap();
        let bytes = encode_svol(&grid).unwrap();
        let header = br#"{"dims":[1,1,1],"kind":"binary"}"#;
        assert_eq!(&bytes[..6], b"SVOL1\0");
        assert_eq!(
            u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize,
            header.len()
        );
        assert_eq!(&bytes[10..10 + header.len()], header);
        let payload = &bytes[10 + header.len()..];
        assert_eq!(payload.len(), 8);
        assert_eq!(payload, 1.0f64.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_svol(&soft_grid(2, 1)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_svol(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn binary_file_with_half_is_a_range_violation() {
        let header = br#"{"dims":[2,1,1],"kind":"binary"}"#;
        let mut forged = Vec::new();
        forged.extend_from_slice(&MAGIC);
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(header);
        forged.extend_from_slice(&0.0f64.to_le_bytes());
        forged.extend_from_slice(&0.5f64.to_le_bytes());
        assert!(matches!(
            decode_svol(&forged),
            Err(Error::RangeViolation {
                kind: VolumeKind::BinaryLabel,
                index: 1,
                ..
            })
        ));
    }

    #[test]
    fn truncated_and_oversized_payloads() {
        let bytes = encode_svol(&soft_grid(2, 9)).unwrap();
        assert!(matches!(
            decode_svol(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            decode_svol(&bytes[..8]),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            decode_svol(&longer),
            Err(Error::HeaderMismatch(_))
        ));
    }

    #[test]
    fn header_problems() {
        let mut forged = Vec::new();
        let header = br#"{"dims":[0,1,1],"kind":"soft"}"#;
        forged.extend_from_slice(&MAGIC);
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(header);
        assert!(matches!(
            decode_svol(&forged),
            Err(Error::HeaderMismatch(_))
        ));

        let mut forged = Vec::new();
        let header = br#"{"dims":[1,1,1],"kind":"label"}"#;
        forged.extend_from_slice(&MAGIC);
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(header);
        forged.extend_from_slice(&0.0f64.to_le_bytes());
        assert!(matches!(
            decode_svol(&forged),
            Err(Error::HeaderMismatch(_))
        ));

        let mut forged = Vec::new();
        let header = br#"{"kind":"soft"}"#;
        forged.extend_from_slice(&MAGIC);
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(header);
        assert!(matches!(decode_svol(&forged), Err(Error::HeaderJson(_))));
    }

    #[test]
    fn invalid_grid_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.svol");
        let grid = VolumeGrid::new_unvalidated(
            Dim3::new(2, 1, 1).unwrap(),
            VolumeKind::Intensity,
            vec![1.0, f64::NAN],
        );
        assert!(matches!(
            write_svol(&grid, &path),
            Err(Error::RangeViolation { .. })
        ));
        assert!(!path.exists());
    }
}
