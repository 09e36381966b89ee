//! Versioned, checksummed binary container for training state.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MBITCKPT" | version u32 | kind (u16 len + utf8)
//! config json (u64 len + utf8) | sha256(config json) [32]
//! step u64 | rng seed [32] | rng stream u64 | rng word position u128
//! scalars: u32 count, then (u16 len + name, f64)
//! arrays:  u32 count, then (u16 len + name, dtype u8, rank u8, dims u64.., payload)
//! sha256 of everything above [32]
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MBITCKPT";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub step: u64,
    pub rng: RngState,
    pub scalars: BTreeMap<String, f64>,
    pub arrays: BTreeMap<String, Tensor>,
}

/// Hex sha256 of a string.
pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical JSON of a configuration and its digest.
pub fn config_digest<C: Serialize>(cfg: &C) -> Result<(String, String)> {
    let json = serde_json::to_string(cfg)?;
    let digest = sha256_hex(json.as_bytes());
    Ok((json, digest))
}

fn first_difference(path: &str, a: &Value, b: &Value) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                first_difference(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null))
            })
        }
        _ if a == b => None,
        _ => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}

/// Fails with [`Error::ConfigMismatch`] naming the first differing field.
pub fn ensure_same_config<C: Serialize>(expected: &C, stored_json: &str) -> Result<()> {
    let a = serde_json::to_value(expected)?;
    let b: Value = serde_json::from_str(stored_json)?;
    match first_difference("", &a, &b) {
        None => Ok(()),
        Some((field, expected, found)) => Err(Error::ConfigMismatch { field, expected, found }),
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn tensor_bytes(t: &Tensor) -> Result<(u8, Vec<u8>)> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => Ok((0, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect())),
        DType::F64 => Ok((1, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect())),
        other => Err(Error::InvalidArgument(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str16(&mut out, &self.kind)?;
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&Sha256::digest(self.config_json.as_bytes()));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_str16(&mut out, name)?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str16(&mut out, name)?;
            let (code, bytes) = tensor_bytes(t)?;
            out.push(code);
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&bytes);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            kind: "checkpoint",
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic header"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version,
                supported: VERSION,
            });
        }
        let kind = r.str16()?;
        let n = r.u64()? as usize;
        let config_json = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("config is not utf-8"))?;
        if r.take(32)? != Sha256::digest(config_json.as_bytes()).as_slice() {
            return Err(corrupt("config digest mismatch"));
        }
        let step = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut scalars = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str16()?;
            scalars.insert(name, f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let mut arrays = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str16()?;
            let code = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let t = match code {
                0 => {
                    let v = r.take(count * 4)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let v = r.take(count * 8)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                _ => return Err(corrupt("unknown dtype code")),
            };
            arrays.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            kind,
            config_json,
            step,
            rng: RngState { seed, stream, word_pos },
            scalars,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Arrays whose name starts with `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_section(&mut self, prefix: &str, arrays: &BTreeMap<String, Tensor>) {
        for (k, v) in arrays {
            self.arrays.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars.get(name).copied().ok_or_else(|| Error::Corrupt {
            kind: "checkpoint",
            reason: format!("missing scalar {name}"),
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::ConfigMismatch {
                field: "checkpoint kind".into(),
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                kind: "checkpoint",
                reason: "truncated".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt {
            kind: "checkpoint",
            reason: "name is not utf-8".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let mut arrays = BTreeMap::new();
        arrays.insert("a".to_string(), Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        arrays.insert("b".to_string(), Tensor::new(&[std::f64::consts::PI], &Device::Cpu).unwrap());
        let mut scalars = BTreeMap::new();
        scalars.insert("lecam.ema_real".to_string(), 0.125);
        Checkpoint {
            kind: "stage1".into(),
            config_json: r#"{"bits":8}"#.into(),
            step: 42,
            rng: RngState::capture(&rng),
            scalars,
            arrays,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, c.kind);
        assert_eq!(back.step, 42);
        assert_eq!(back.rng, c.rng);
        assert_eq!(back.scalars, c.scalars);
        let a: Vec<Vec<f32>> = back.arrays["a"].to_vec2().unwrap();
        assert_eq!(a, vec![vec![1.5, -2.0], vec![0.25, 3.0]]);
        let b: Vec<f64> = back.arrays["b"].to_vec1().unwrap();
        assert_eq!(b[0].to_bits(), std::f64::consts::PI.to_bits());
        let mut r1 = c.rng.restore();
        let mut r2 = back.rng.restore();
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn detects_corruption_and_version() {
        let c = sample();
        let mut bytes = c.to_bytes().unwrap();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt { .. })));
        let mut bytes = c.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt { .. })));

        let mut bytes = c.to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 32;
        let sum = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn config_mismatch_names_field() {
        #[derive(Serialize)]
        struct Q {
            bits: usize,
        }
        #[derive(Serialize)]
        struct C {
            quantizer: Q,
        }
        let stored = serde_json::to_string(&C { quantizer: Q { bits: 8 } }).unwrap();
        ensure_same_config(&C { quantizer: Q { bits: 8 } }, &stored).unwrap();
        match ensure_same_config(&C { quantizer: Q { bits: 12 } }, &stored) {
            Err(Error::ConfigMismatch { field, expected, found }) => {
                assert_eq!(field, "quantizer.bits");
                assert_eq!(expected, "12");
                assert_eq!(found, "8");
            }
            other => panic!("{other:?}"),
        }
    }
}
