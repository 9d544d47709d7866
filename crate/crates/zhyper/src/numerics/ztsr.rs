//! ZTSR: the on-disk tensor block.
//!
//! Little-endian layout:
//!
//! ```text
//! "ZTSR" | u32 rank | u32 dims[rank] | u8 precision | IEEE-754 values
//! ```
//!
//! The precision byte selects the payload width: 0 → f32, 1 → f64.
//! Tensors loaded from an f32 payload are widened to f64 in memory;
//! writing them back at the same precision reproduces the bytes exactly,
//! because narrowing an exactly-representable value is lossless.
//!
//! Blocks are self-delimiting, so they embed directly inside larger
//! container formats. Readers reject wrong magic, oversized ranks, and
//! non-finite values, reporting the flat index of the first bad value.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ZTSR";
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn flag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    fn from_flag(flag: u8) -> Result<Precision> {
        match flag {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F64),
            other => Err(Error::contract(format!(
                "unknown precision flag {other} (expected 0 for f32 or 1 for f64)"
            ))),
        }
    }
}

// ── Little-endian wire helpers (shared with the container formats) ───

pub(crate) fn write_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub(crate) fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

// ── Tensor blocks ────────────────────────────────────────────────────

/// Write one tensor block at the given payload precision.
pub fn write_tensor(w: &mut impl Write, t: &Tensor, precision: Precision) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    write_u8(w, precision.flag())?;
    match precision {
        Precision::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read one tensor block. The result is always an f64 constant tensor;
/// the returned precision says how the payload was stored so callers
/// can round-trip files byte-identically.
pub fn read_tensor(r: &mut impl Read) -> Result<(Tensor, Precision)> {
    let magic = read_bytes(r, 4)?;
    if magic != MAGIC {
        return Err(Error::contract(format!(
            "bad tensor block magic {magic:?} (expected {MAGIC:?})"
        )));
    }
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::contract(format!(
            "tensor rank {rank} exceeds supported maximum {MAX_RANK}"
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        numel = numel.checked_mul(d).ok_or_else(|| {
            Error::contract(format!("tensor dims {shape:?} × {d} overflow"))
        })?;
        shape.push(d);
    }
    let precision = Precision::from_flag(read_u8(r)?)?;
    let mut data = Vec::with_capacity(numel);
    match precision {
        Precision::F32 => {
            let raw = read_bytes(r, numel * 4)?;
            for chunk in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Precision::F64 => {
            let raw = read_bytes(r, numel * 8)?;
            for chunk in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(format!(
            "non-finite tensor value at flat index {bad}"
        )));
    }
    let tensor = Tensor::from_vec(&shape, data)?;
    Ok((tensor, precision))
}

/// Write a tensor block to a standalone file.
pub fn save_tensor(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, precision)?;
    std::fs::write(path, buf).map_err(|e| Error::load(path, e.to_string()))
}

/// Read a standalone tensor file, rejecting trailing garbage.
pub fn load_tensor(path: &Path) -> Result<(Tensor, Precision)> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut cursor = std::io::Cursor::new(&bytes[..]);
    let out = read_tensor(&mut cursor).map_err(|e| Error::load(path, e.to_string()))?;
    let used = cursor.position() as usize;
    if used != bytes.len() {
        return Err(Error::load(
            path,
            format!("{} trailing bytes after tensor block", bytes.len() - used),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, 1e-7, 314.0, -0.5]).unwrap()
    }

    #[test]
    fn f64_round_trip_is_byte_identical() {
        let t = sample();
        let mut first = Vec::new();
        write_tensor(&mut first, &t, Precision::F64).unwrap();
        let (back, precision) = read_tensor(&mut first.as_slice()).unwrap();
        assert_eq!(precision, Precision::F64);
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
        let mut second = Vec::new();
        write_tensor(&mut second, &back, precision).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn f32_round_trip_is_byte_identical_after_first_write() {
        let t = Tensor::from_vec(&[3], vec![0.1, 2.0 / 3.0, -1e20]).unwrap();
        let mut first = Vec::new();
        write_tensor(&mut first, &t, Precision::F32).unwrap();
        let (back, precision) = read_tensor(&mut first.as_slice()).unwrap();
        assert_eq!(precision, Precision::F32);
        // Values were rounded to f32 on the way out …
        assert_eq!(back.data()[0], 0.1f32 as f64);
        // … so a second write reproduces the file exactly.
        let mut second = Vec::new();
        write_tensor(&mut second, &back, precision).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn scalar_and_empty_shapes_round_trip() {
        for t in [Tensor::scalar(42.0), Tensor::zeros(&[0])] {
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t, Precision::F64).unwrap();
            let (back, _) = read_tensor(&mut buf.as_slice()).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &sample(), Precision::F64).unwrap();
        buf[0] = b'X';
        let err = read_tensor(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn nan_payload_is_rejected_with_flat_index() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &sample(), Precision::F64).unwrap();
        // Overwrite the third value (flat index 2) with a NaN bit pattern.
        let value_offset = 4 + 4 + 8 + 1 + 2 * 8;
        buf[value_offset..value_offset + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = read_tensor(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
    }

    #[test]
    fn truncated_block_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &sample(), Precision::F64).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn file_with_trailing_bytes_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ztsr");
        let mut buf = Vec::new();
        write_tensor(&mut buf, &sample(), Precision::F64).unwrap();
        buf.push(0);
        std::fs::write(&path, &buf).unwrap();
        let err = load_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ztsr");
        let t = sample();
        save_tensor(&path, &t, Precision::F64).unwrap();
        let (back, precision) = load_tensor(&path).unwrap();
        assert_eq!(precision, Precision::F64);
        assert_eq!(back.data(), t.data());
    }
}
