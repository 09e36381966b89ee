//! Bit-packed token datasets for Stage-II training.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MBITTOKS" | version u32 | K u32 | height u32 | width u32 | samples u64
//! tokenizer digest (u16 len + utf8) | class ids (samples x u32)
//! payload: per sample ceil(height*width*K / 8) bytes, tokens in row-major order,
//!          bits MSB-first, +1 -> 1 and -1 -> 0
//! sha256 of everything above [32]
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quantizers::{BitGrid, MAX_BITS};

pub const MAGIC: &[u8; 8] = b"MBITTOKS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    /// Digest of the tokenizer that produced the tokens.
    pub tokenizer_digest: String,
    pub classes: Vec<u32>,
    pub grid: BitGrid,
}

/// Bytes needed for one packed sample.
pub fn packed_sample_bytes(height: usize, width: usize, bits: usize) -> usize {
    (height * width * bits).div_ceil(8)
}

/// Packs `+-1` entries MSB-first, one bit each, padding the last byte with zeros.
pub fn pack_bits(bits: &[i8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        match b {
            1 => out[i / 8] |= 0x80 >> (i % 8),
            -1 => {}
            v => {
                return Err(Error::InvalidBit {
                    position: i,
                    value: v as f64,
                })
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_bits`] for `count` entries.
pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<i8> {
    (0..count)
        .map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 })
        .collect()
}

fn corrupt(reason: &str) -> Error {
    Error::Corrupt {
        kind: "token dataset",
        reason: reason.to_string(),
    }
}

impl TokenDataset {
    pub fn new(grid: BitGrid, classes: Vec<u32>, tokenizer_digest: String) -> Result<Self> {
        if classes.len() != grid.batch {
            return Err(Error::shape("token dataset classes", grid.batch, classes.len()));
        }
        Ok(Self {
            tokenizer_digest,
            classes,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.grid;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [g.bits, g.height, g.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(g.batch as u64).to_le_bytes());
        let d = self.tokenizer_digest.as_bytes();
        out.extend_from_slice(&(d.len() as u16).to_le_bytes());
        out.extend_from_slice(d);
        for c in &self.classes {
            out.extend_from_slice(&c.to_le_bytes());
        }
        let per = g.tokens_per_sample() * g.bits;
        for b in 0..g.batch {
            out.extend(pack_bits(&g.data()[b * per..(b + 1) * per])?);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic header"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            if body.len() - pos < n {
                return Err(corrupt("truncated"));
            }
            pos += n;
            Ok(&body[pos - n..pos])
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(Error::Version {
                kind: "token dataset",
                found: version,
                supported: VERSION,
            });
        }
        let bits = u32_at(take(4)?) as usize;
        let height = u32_at(take(4)?) as usize;
        let width = u32_at(take(4)?) as usize;
        if bits == 0 || bits > MAX_BITS {
            return Err(corrupt("bit width out of range"));
        }
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let dl = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let digest = String::from_utf8(take(dl)?.to_vec()).map_err(|_| corrupt("digest is not utf-8"))?;
        let classes = take(n.checked_mul(4).ok_or_else(|| corrupt("sample count overflow"))?)?
            .chunks(4)
            .map(u32_at)
            .collect();
        let per = packed_sample_bytes(height, width, bits);
        let mut data = Vec::with_capacity(n * height * width * bits);
        for _ in 0..n {
            data.extend(unpack_bits(take(per)?, height * width * bits));
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            tokenizer_digest: digest,
            classes,
            grid: BitGrid::new(n, height, width, bits, data)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a dataset; when `expected_digest` is given the stored tokenizer digest must match.
    pub fn read(path: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ds = Self::from_bytes(&bytes)?;
        if let Some(d) = expected_digest {
            if d != ds.tokenizer_digest {
                return Err(Error::ConfigMismatch {
                    field: "tokenizer digest".into(),
                    expected: d.to_string(),
                    found: ds.tokenizer_digest.clone(),
                });
            }
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_is_msb_first() {
        assert_eq!(pack_bits(&[1, -1, -1, 1]).unwrap(), vec![0b1001_0000]);
        assert_eq!(unpack_bits(&[0b1001_0000], 4), vec![1, -1, -1, 1]);
        assert!(pack_bits(&[1, 0]).is_err());
        assert_eq!(packed_sample_bytes(16, 16, 12), 384);
    }

    #[test]
    fn round_trip_and_rejections() {
        let ids: Vec<u32> = (0..2 * 9).map(|i| (i * 37) % 4096).collect();
        let grid = BitGrid::from_indices(2, 3, 3, 12, &ids).unwrap();
        let ds = TokenDataset::new(grid, vec![4, 7], "abc".into()).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(TokenDataset::from_bytes(&bytes).unwrap(), ds);

        let mut tampered = bytes.clone();
        let at = 8 + 4 + 12 + 8 + 2;
        tampered[at] = b'x';
        assert!(matches!(TokenDataset::from_bytes(&tampered), Err(Error::Corrupt { .. })));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        ds.write(&p).unwrap();
        assert!(TokenDataset::read(&p, Some("abc")).is_ok());
        assert!(matches!(TokenDataset::read(&p, Some("abd")), Err(Error::ConfigMismatch { .. })));
    }
}
