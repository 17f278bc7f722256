//! Binary mask checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TFMC" | version u32 | layer count u32
//! per layer: fan_out u32 | fan_in u32 | scores f32[n] | mask bitset | weights f32[n]
//! ```
//!
//! The bitset is row-major, LSB-first, `ceil(n / 8)` bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masked::{LayerMask, Mask};
use crate::miners::MinedSubnetwork;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointLayer {
    pub fan_out: usize,
    pub fan_in: usize,
    pub scores: Vec<f32>,
    pub mask: Vec<bool>,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCheckpoint {
    pub layers: Vec<CheckpointLayer>,
}

impl MaskCheckpoint {
    pub fn new(mask: &Mask, scores: &[Tensor], weights: &[Tensor]) -> Result<Self> {
        mask.check_against(weights)?;
        mask.check_against(scores)?;
        let to_f32 = |t: &Tensor| t.data().iter().map(|&v| v as f32).collect();
        let layers = mask
            .layers
            .iter()
            .zip(scores)
            .zip(weights)
            .map(|((m, s), w)| CheckpointLayer {
                fan_out: m.fan_out,
                fan_in: m.fan_in,
                scores: to_f32(s),
                mask: m.bits.clone(),
                weights: to_f32(w),
            })
            .collect();
        Ok(MaskCheckpoint { layers })
    }

    pub fn from_mined(mined: &MinedSubnetwork) -> Result<Self> {
        Self::new(&mined.mask, &mined.scores, &mined.weights)
    }

    pub fn mask(&self) -> Mask {
        Mask {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMask {
                    fan_out: l.fan_out,
                    fan_in: l.fan_in,
                    bits: l.mask.clone(),
                })
                .collect(),
        }
    }

    fn tensors(&self, pick: impl Fn(&CheckpointLayer) -> &[f32]) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| {
                let data = pick(l).iter().map(|&v| f64::from(v)).collect();
                Tensor::new(vec![l.fan_out, l.fan_in], data).expect("validated on decode")
            })
            .collect()
    }

    pub fn weights(&self) -> Vec<Tensor> {
        self.tensors(|l| &l.weights)
    }

    pub fn scores(&self) -> Vec<Tensor> {
        self.tensors(|l| &l.scores)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
            for v in &l.scores {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let mut packed = vec![0u8; l.mask.len().div_ceil(8)];
            for (i, &b) in l.mask.iter().enumerate() {
                if b {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&packed);
            for v in &l.weights {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, "bad magic, expected \"TFMC\""));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let fan_out = r.u32()? as usize;
            let fan_in = r.u32()? as usize;
            if fan_out == 0 || fan_in == 0 {
                return Err(r.error_at(r.pos - 8, "layer with a zero dimension"));
            }
            let n = fan_out * fan_in;
            let scores = r.f32s(n)?;
            let packed = r.take(n.div_ceil(8))?;
            let mask = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            let weights = r.f32s(n)?;
            layers.push(CheckpointLayer {
                fan_out,
                fan_in,
                scores,
                mask,
                weights,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after last layer"));
        }
        Ok(MaskCheckpoint { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(self.pos, &format!("truncated: need {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.error_at(self.pos, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MaskCheckpoint {
        MaskCheckpoint {
            layers: vec![
                CheckpointLayer {
                    fan_out: 3,
                    fan_in: 3,
                    scores: (0..9).map(|i| i as f32 / 9.0).collect(),
                    mask: (0..9).map(|i| i % 2 == 0).collect(),
                    weights: (0..9).map(|i| -(i as f32)).collect(),
                },
                CheckpointLayer {
                    fan_out: 1,
                    fan_in: 3,
                    scores: vec![0.5; 3],
                    mask: vec![true, false, true],
                    weights: vec![1.0; 3],
                },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"TFMC");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[3, 0, 0, 0]);
        // 9 bits, LSB-first: entries 0,2,4,6 -> 0b0101_0101, entry 8 -> 0b1.
        let bits = 20 + 36;
        assert_eq!(&b[bits..bits + 2], &[0x55, 0x01]);
        let total = 12 + (8 + 36 + 2 + 36) + (8 + 12 + 1 + 12);
        assert_eq!(b.len(), total);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let b = c.to_bytes();
        let back = MaskCheckpoint::from_bytes(&b, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
        assert_eq!(back.mask().kept(), 7);
    }

    #[test]
    fn decode_errors_name_offsets() {
        let mut b = sample().to_bytes();
        let err = MaskCheckpoint::from_bytes(&b[..30], Path::new("c.bin")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        b[0] = b'X';
        let err = MaskCheckpoint::from_bytes(&b, Path::new("c.bin")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let mut long = sample().to_bytes();
        long.push(0);
        assert!(MaskCheckpoint::from_bytes(&long, Path::new("c.bin")).is_err());
    }
}
