//! ZADP v1: the adapter bank container.
//!
//! Little-endian layout:
//!
//! ```text
//! "ZADP" | u16 version | u16 rank | u32 L | u8 typeset | u8 variant
//! entries, layer-ascending, Q before V:
//!   A block | B block | modulation payload block   (each a ZTSR block)
//! u32 CRC-32 (IEEE) over all entry bytes
//! ```
//!
//! Typeset bitmask: bit 0 = Q, bit 1 = V. Variant: 0 = identity,
//! 1 = diag, 2 = square. The modulation payload is shape `[0]` for
//! identity, `[r]` for diag, `[r, r]` for square.
//!
//! The format has no scale field, so a pair's scale is folded into `A`
//! on write (`A_file = scale·A`); a reloaded pair has scale 1 and the
//! identical delta. All tensor blocks in one file share a payload
//! precision — that is what makes read→write reproduce files byte for
//! byte.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoRAPair, Modulation, ProjKind};
use crate::numerics::ztsr::{
    read_tensor, read_u16, read_u32, read_u8, write_tensor, write_u16, write_u32, write_u8,
    Precision,
};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"ZADP";
const VERSION: u16 = 1;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320), bitwise.
pub(crate) fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &byte in bytes {
        crc ^= byte as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn variant_code(set: &AdapterSet) -> Result<u8> {
    let mut code = None;
    for (_, (_, m)) in set.iter() {
        let this = match m {
            Modulation::Identity => 0u8,
            Modulation::Diag(_) => 1,
            Modulation::Square(_) => 2,
        };
        match code {
            None => code = Some(this),
            Some(prev) if prev != this => {
                return Err(Error::contract(
                    "adapter file needs a uniform modulation variant across sites".to_string(),
                ))
            }
            _ => {}
        }
    }
    Ok(code.expect("adapter set is never empty"))
}

fn typeset_mask(kinds: &[ProjKind]) -> u8 {
    kinds.iter().fold(0u8, |mask, k| mask | (1 << k.index()))
}

fn kinds_from_mask(mask: u8) -> Result<Vec<ProjKind>> {
    if mask == 0 || mask > 0b11 {
        return Err(Error::contract(format!(
            "typeset bitmask {mask:#04b} selects no known projection types"
        )));
    }
    Ok(ProjKind::ALL
        .into_iter()
        .filter(|k| mask & (1 << k.index()) != 0)
        .collect())
}

fn shared_rank(set: &AdapterSet) -> Result<u16> {
    let mut rank = None;
    for (key, (pair, _)) in set.iter() {
        match rank {
            None => rank = Some(pair.rank),
            Some(prev) if prev != pair.rank => {
                return Err(Error::contract(format!(
                    "adapter file needs one shared rank, but site (layer {}, {}) has rank {} vs {}",
                    key.0, key.1, pair.rank, prev
                )))
            }
            _ => {}
        }
    }
    let rank = rank.expect("adapter set is never empty");
    u16::try_from(rank)
        .map_err(|_| Error::contract(format!("rank {rank} exceeds the format's u16 field")))
}

/// Serialize an adapter bank. Every site's pair and signal goes out at
/// the given precision; the pair scale is folded into A.
pub fn write_adapter_set(w: &mut impl Write, set: &AdapterSet, precision: Precision) -> Result<()> {
    let rank = shared_rank(set)?;
    let variant = variant_code(set)?;

    w.write_all(MAGIC)?;
    write_u16(w, VERSION)?;
    write_u16(w, rank)?;
    write_u32(w, u32::try_from(set.layers()).expect("layer count fits u32"))?;
    write_u8(w, typeset_mask(set.kinds()))?;
    write_u8(w, variant)?;

    let mut payload = Vec::new();
    for (_, (pair, m)) in set.iter() {
        let a_folded = if pair.scale == 1.0 {
            pair.a.detach()
        } else {
            pair.a.scale(pair.scale).detach()
        };
        write_tensor(&mut payload, &a_folded, precision)?;
        write_tensor(&mut payload, &pair.b, precision)?;
        let signal = match m {
            Modulation::Identity => Tensor::zeros(&[0]),
            Modulation::Diag(z) => z.clone(),
            Modulation::Square(z) => z.clone(),
        };
        write_tensor(&mut payload, &signal, precision)?;
    }
    w.write_all(&payload)?;
    write_u32(w, crc32(&payload))?;
    Ok(())
}

/// Parse an adapter bank, verifying the CRC and every declared shape.
/// Returns the stored payload precision so callers can round-trip.
pub fn read_adapter_set(r: &mut impl Read) -> Result<(AdapterSet, Precision)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::contract(format!(
            "bad adapter file magic {magic:?} (expected {MAGIC:?})"
        )));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::contract(format!(
            "unsupported adapter format version {version} (this build reads {VERSION})"
        )));
    }
    let rank = read_u16(r)? as usize;
    if rank == 0 {
        return Err(Error::contract("adapter rank field is zero".to_string()));
    }
    let layers = read_u32(r)? as usize;
    if layers == 0 {
        return Err(Error::contract("adapter layer count is zero".to_string()));
    }
    let kinds = kinds_from_mask(read_u8(r)?)?;
    let variant = read_u8(r)?;

    // Entries stream until the trailing CRC, so read the remainder and
    // split the last four bytes off.
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() < 4 {
        return Err(Error::contract(
            "adapter file truncated before its checksum".to_string(),
        ));
    }
    let (payload, crc_bytes) = rest.split_at(rest.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32(payload);
    if stored_crc != actual_crc {
        return Err(Error::contract(format!(
            "adapter payload checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut cursor = std::io::Cursor::new(payload);
    let mut precision: Option<Precision> = None;
    let mut take = |cursor: &mut std::io::Cursor<&[u8]>, what: &str| -> Result<Tensor> {
        let (t, p) = read_tensor(cursor)
            .map_err(|e| Error::contract(format!("while reading {what}: {e}")))?;
        match precision {
            None => precision = Some(p),
            Some(prev) if prev != p => {
                return Err(Error::contract(format!(
                    "{what} stored at a different precision than earlier blocks"
                )))
            }
            _ => {}
        }
        Ok(t)
    };

    let mut entries = BTreeMap::new();
    for layer in 0..layers {
        for &kind in &kinds {
            let site = format!("site (layer {layer}, {kind})");
            let a = take(&mut cursor, &format!("{site} factor A"))?;
            let b = take(&mut cursor, &format!("{site} factor B"))?;
            let signal = take(&mut cursor, &format!("{site} modulation"))?;
            let pair = LoRAPair::new(a, b, 1.0)?;
            if pair.rank != rank {
                return Err(Error::contract(format!(
                    "{site} has rank {} but the header declares {rank}",
                    pair.rank
                )));
            }
            let m = match variant {
                0 => {
                    if signal.numel() != 0 {
                        return Err(Error::contract(format!(
                            "{site}: identity variant carries a non-empty signal"
                        )));
                    }
                    Modulation::Identity
                }
                1 => {
                    if signal.shape() != [rank] {
                        return Err(Error::contract(format!(
                            "{site}: diag signal shape {:?} does not match rank {rank}",
                            signal.shape()
                        )));
                    }
                    Modulation::Diag(signal)
                }
                2 => {
                    if signal.shape() != [rank, rank] {
                        return Err(Error::contract(format!(
                            "{site}: square signal shape {:?} does not match rank {rank}",
                            signal.shape()
                        )));
                    }
                    Modulation::Square(signal)
                }
                other => {
                    return Err(Error::contract(format!(
                        "unknown modulation variant code {other}"
                    )))
                }
            };
            entries.insert((layer, kind), (pair, m));
        }
    }
    if (cursor.position() as usize) != payload.len() {
        return Err(Error::contract(format!(
            "{} trailing bytes after the last adapter entry",
            payload.len() - cursor.position() as usize
        )));
    }
    let set = AdapterSet::new(layers, &kinds, entries)?;
    Ok((set, precision.expect("at least one block was read")))
}

pub fn save_adapter_set(path: &Path, set: &AdapterSet, precision: Precision) -> Result<()> {
    let mut buf = Vec::new();
    write_adapter_set(&mut buf, set, precision)?;
    std::fs::write(path, buf).map_err(|e| Error::load(path, e.to_string()))
}

pub fn load_adapter_set(path: &Path) -> Result<(AdapterSet, Precision)> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    read_adapter_set(&mut bytes.as_slice()).map_err(|e| Error::load(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::delta_weight;
    use crate::numerics::Rng;

    fn sample_set(variant: &str, scale: f64) -> AdapterSet {
        let mut rng = Rng::new(99);
        let r = 2;
        let mut entries = BTreeMap::new();
        for layer in 0..2 {
            for kind in ProjKind::ALL {
                let a: Vec<f64> = (0..4 * r).map(|_| rng.standard_normal()).collect();
                let b: Vec<f64> = (0..r * 3).map(|_| rng.standard_normal()).collect();
                let pair = LoRAPair::new(
                    Tensor::from_vec(&[4, r], a).unwrap(),
                    Tensor::from_vec(&[r, 3], b).unwrap(),
                    scale,
                )
                .unwrap();
                let m = match variant {
                    "identity" => Modulation::Identity,
                    "diag" => Modulation::Diag(
                        Tensor::from_vec(&[r], (0..r).map(|_| rng.standard_normal()).collect())
                            .unwrap(),
                    ),
                    _ => Modulation::Square(
                        Tensor::from_vec(
                            &[r, r],
                            (0..r * r).map(|_| rng.standard_normal()).collect(),
                        )
                        .unwrap(),
                    ),
                };
                entries.insert((layer, kind), (pair, m));
            }
        }
        AdapterSet::new(2, &ProjKind::ALL, entries).unwrap()
    }

    #[test]
    fn crc_matches_the_published_check_value() {
        // The standard CRC-32 test vector.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn round_trip_is_byte_identical_for_every_variant() {
        for variant in ["identity", "diag", "square"] {
            for precision in [Precision::F64, Precision::F32] {
                let set = sample_set(variant, 1.0);
                let mut first = Vec::new();
                write_adapter_set(&mut first, &set, precision).unwrap();
                let (back, p) = read_adapter_set(&mut first.as_slice()).unwrap();
                assert_eq!(p, precision);
                let mut second = Vec::new();
                write_adapter_set(&mut second, &back, p).unwrap();
                assert_eq!(first, second, "{variant} at {precision:?}");
            }
        }
    }

    #[test]
    fn reloaded_bank_reproduces_every_delta() {
        let set = sample_set("diag", 1.0);
        let mut buf = Vec::new();
        write_adapter_set(&mut buf, &set, Precision::F64).unwrap();
        let (back, _) = read_adapter_set(&mut buf.as_slice()).unwrap();
        for ((key, (pair, m)), (_, (pair2, m2))) in set.iter().zip(back.iter()) {
            let before = delta_weight(pair, m).unwrap();
            let after = delta_weight(pair2, m2).unwrap();
            for (x, y) in before.data().iter().zip(after.data()) {
                assert!((x - y).abs() < 1e-12, "delta drifted at {key:?}");
            }
        }
    }

    #[test]
    fn scale_is_folded_into_a_on_write() {
        let scaled = sample_set("diag", 2.5);
        let mut buf = Vec::new();
        write_adapter_set(&mut buf, &scaled, Precision::F64).unwrap();
        let (back, _) = read_adapter_set(&mut buf.as_slice()).unwrap();
        for ((key, (pair, m)), (_, (pair2, m2))) in scaled.iter().zip(back.iter()) {
            assert_eq!(pair2.scale, 1.0);
            let before = delta_weight(pair, m).unwrap();
            let after = delta_weight(pair2, m2).unwrap();
            for (x, y) in before.data().iter().zip(after.data()) {
                assert!((x - y).abs() < 1e-12, "folded delta drifted at {key:?}");
            }
        }
    }

    #[test]
    fn corrupted_checksum_is_rejected_by_name() {
        let set = sample_set("diag", 1.0);
        let mut buf = Vec::new();
        write_adapter_set(&mut buf, &set, Precision::F64).unwrap();
        let mid = buf.len() / 2;
        buf[mid] ^= 0x40;
        let err = read_adapter_set(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn nan_in_payload_is_rejected_with_location() {
        let set = sample_set("diag", 1.0);
        let mut buf = Vec::new();
        write_adapter_set(&mut buf, &set, Precision::F64).unwrap();
        // First A block's first value sits right after the 14-byte header
        // and its own block header (4 magic + 4 rank + 8 dims + 1 flag).
        let offset = 14 + 17;
        buf[offset..offset + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        // Keep the CRC honest so the NaN check itself is what fires.
        let payload_end = buf.len() - 4;
        let crc = crc32(&buf[14..payload_end]);
        buf[payload_end..].copy_from_slice(&crc.to_le_bytes());
        let err = read_adapter_set(&mut buf.as_slice()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("factor A") && msg.contains("index 0"), "{msg}");
    }

    #[test]
    fn version_and_variant_codes_are_validated() {
        let set = sample_set("diag", 1.0);
        let mut buf = Vec::new();
        write_adapter_set(&mut buf, &set, Precision::F64).unwrap();

        let mut wrong_version = buf.clone();
        wrong_version[4] = 9;
        assert!(read_adapter_set(&mut wrong_version.as_slice())
            .unwrap_err()
            .to_string()
            .contains("version"));

        let mut wrong_variant = buf.clone();
        wrong_variant[13] = 7;
        assert!(read_adapter_set(&mut wrong_variant.as_slice()).is_err());

        let mut empty_typeset = buf;
        empty_typeset[12] = 0;
        assert!(read_adapter_set(&mut empty_typeset.as_slice())
            .unwrap_err()
            .to_string()
            .contains("typeset"));
    }

    #[test]
    fn mixed_variants_cannot_be_serialized() {
        let set = sample_set("diag", 1.0);
        let mut mixed = std::collections::BTreeMap::new();
        for (i, (key, (pair, m))) in set.iter().enumerate() {
            let m = if i == 0 { Modulation::Identity } else { m.clone() };
            mixed.insert(*key, (pair.clone(), m));
        }
        let mixed = AdapterSet::new(2, &ProjKind::ALL, mixed).unwrap();
        let mut buf = Vec::new();
        assert!(write_adapter_set(&mut buf, &mixed, Precision::F64).is_err());
    }

    #[test]
    fn files_survive_the_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.zadp");
        let set = sample_set("square", 1.0);
        save_adapter_set(&path, &set, Precision::F32).unwrap();
        let (back, precision) = load_adapter_set(&path).unwrap();
        assert_eq!(precision, Precision::F32);
        assert_eq!(back.layers(), 2);
        assert_eq!(back.signal_size(), 2 * 2 * 4);
    }
}
