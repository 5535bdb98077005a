//! Bit-packed checkpoint format.
//!
//! ```text
//! "MPQ1" | version u16 | layer count u32
//! per layer: out_dim u32 | in_dim u32 | r u32 | bits u8 | alpha f64 | codes
//! optional:  "FPSW" | count u64 | count × f64
//! ```
//!
//! Integers and floats are little-endian. `in_dim` is the column count of
//! the B factor, i.e. the spliced input width. Codes are `bits`-wide two's
//! complement integers, A then B, row-major, packed LSB-first and padded to
//! a whole byte per layer. One-bit codes store `0` for `−α` and `1` for `+α`.
//! The shadow trailer is optional, so a file cut exactly where it starts
//! still decodes, without shadow weights.

use std::path::Path;

use mpq_core::model::Network;
use mpq_core::quant::{max_code, QuantTable, QuantizedLayer, QuantizedModel, SUPPORTED_BITS};
use mpq_core::Tensor;
use thiserror::Error;

use crate::io::write_atomic;

pub const MAGIC: [u8; 4] = *b"MPQ1";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 10;
/// Dimensions, bit-width and scale stored ahead of each layer's codes.
pub const LAYER_OVERHEAD_BYTES: usize = 12 + 1 + 8;
const SHADOW_MARKER: [u8; 4] = *b"FPSW";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected \"MPQ1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("layer {layer}: code {code} at index {index} is outside the {bits}-bit table")]
    CodeOutOfRange {
        layer: usize,
        index: usize,
        code: i32,
        bits: u8,
    },
    #[error("layer {layer}: unsupported bit-width {bits}")]
    UnsupportedBits { layer: usize, bits: u8 },
    #[error("layer {layer}: {reason}")]
    InvalidRecord { layer: usize, reason: String },
    #[error("{0} unexpected bytes after the last record")]
    TrailingBytes(usize),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub out_dim: u32,
    pub in_dim: u32,
    pub bottleneck: u32,
    pub bits: u8,
    pub alpha: f64,
    /// A then B, row-major.
    pub codes: Vec<i32>,
}

impl LayerRecord {
    pub fn param_count(&self) -> usize {
        let r = self.bottleneck as usize;
        r * (self.out_dim as usize + self.in_dim as usize)
    }

    pub fn code_bytes(&self) -> usize {
        (self.param_count() * self.bits as usize).div_ceil(8)
    }

    fn validate(&self, layer: usize) -> Result<(), CheckpointError> {
        if !SUPPORTED_BITS.contains(&u32::from(self.bits)) {
            return Err(CheckpointError::UnsupportedBits { layer, bits: self.bits });
        }
        let invalid = |reason: String| CheckpointError::InvalidRecord { layer, reason };
        if self.out_dim == 0 || self.in_dim == 0 || self.bottleneck == 0 {
            return Err(invalid("zero dimension".into()));
        }
        if self.bottleneck > self.out_dim.min(self.in_dim) {
            return Err(invalid(format!(
                "bottleneck {} exceeds min({}, {})",
                self.bottleneck, self.out_dim, self.in_dim
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("scale {} is not positive", self.alpha)));
        }
        if self.codes.len() != self.param_count() {
            return Err(invalid(format!(
                "{} codes for {} parameters",
                self.codes.len(),
                self.param_count()
            )));
        }
        let m = max_code(u32::from(self.bits));
        for (index, &code) in self.codes.iter().enumerate() {
            let ok = if self.bits == 1 {
                code == 1 || code == -1
            } else {
                code.abs() <= m
            };
            if !ok {
                return Err(CheckpointError::CodeOutOfRange {
                    layer,
                    index,
                    code,
                    bits: self.bits,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<LayerRecord>,
    /// Full-precision weights of every layer, in network parameter order.
    pub shadow: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &QuantizedModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|q| LayerRecord {
                out_dim: q.spec.out_dim as u32,
                in_dim: q.spec.spliced_in_dim() as u32,
                bottleneck: q.spec.bottleneck as u32,
                bits: q.bits() as u8,
                alpha: q.table.alpha(),
                codes: q.codes.clone(),
            })
            .collect();
        Checkpoint { layers, shadow: None }
    }

    pub fn with_shadow(mut self, net: &Network) -> Self {
        self.shadow = Some(net.params().data().to_vec());
        self
    }

    /// Rebuilds the quantized model. `template` supplies each layer's
    /// activation and context, which the format does not store.
    pub fn to_model(&self, template: &Network) -> mpq_core::Result<QuantizedModel> {
        if template.num_layers() != self.layers.len() {
            return Err(mpq_core::Error::InvalidArgument(format!(
                "checkpoint has {} layers, template {}",
                self.layers.len(),
                template.num_layers()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(template.layers())
            .enumerate()
            .map(|(l, (rec, t))| {
                let spec = t.spec();
                if (rec.out_dim as usize, rec.in_dim as usize, rec.bottleneck as usize)
                    != (spec.out_dim, spec.spliced_in_dim(), spec.bottleneck)
                {
                    return Err(mpq_core::Error::Dimension(format!(
                        "layer {l} differs from the template"
                    )));
                }
                QuantizedLayer::new(
                    l,
                    spec,
                    QuantTable::new(u32::from(rec.bits), rec.alpha)?,
                    rec.codes.clone(),
                )
            })
            .collect::<mpq_core::Result<Vec<_>>>()?;
        Ok(QuantizedModel { layers })
    }

    /// The shadow weights loaded into a copy of `template`.
    pub fn shadow_network(&self, template: &Network) -> mpq_core::Result<Option<Network>> {
        let Some(w) = &self.shadow else { return Ok(None) };
        let mut net = template.clone();
        net.set_params(&Tensor::from_vec(w.clone())?)?;
        Ok(Some(net))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .layers
                .iter()
                .map(|l| LAYER_OVERHEAD_BYTES + l.code_bytes())
                .sum::<usize>()
            + self.shadow.as_ref().map_or(0, |w| 4 + 8 + 8 * w.len())
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (l, rec) in self.layers.iter().enumerate() {
            rec.validate(l)?;
            out.extend_from_slice(&rec.out_dim.to_le_bytes());
            out.extend_from_slice(&rec.in_dim.to_le_bytes());
            out.extend_from_slice(&rec.bottleneck.to_le_bytes());
            out.push(rec.bits);
            out.extend_from_slice(&rec.alpha.to_le_bytes());
            pack(&rec.codes, rec.bits, &mut out);
        }
        if let Some(w) = &self.shadow {
            out.extend_from_slice(&SHADOW_MARKER);
            out.extend_from_slice(&(w.len() as u64).to_le_bytes());
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        debug_assert_eq!(out.len(), self.encoded_len());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(1 << 16));
        for l in 0..count {
            let out_dim = r.u32("layer dimensions")?;
            let in_dim = r.u32("layer dimensions")?;
            let bottleneck = r.u32("layer dimensions")?;
            let bits = r.take(1, "bit-width")?[0];
            if !SUPPORTED_BITS.contains(&u32::from(bits)) {
                return Err(CheckpointError::UnsupportedBits { layer: l, bits });
            }
            let alpha = f64::from_le_bytes(r.take(8, "scale")?.try_into().unwrap());
            let mut rec = LayerRecord {
                out_dim,
                in_dim,
                bottleneck,
                bits,
                alpha,
                codes: Vec::new(),
            };
            let n = rec.param_count();
            let packed = r.take(rec.code_bytes(), "codes")?;
            rec.codes = unpack(packed, n, bits);
            rec.validate(l)?;
            layers.push(rec);
        }
        let shadow = if r.remaining() == 0 {
            None
        } else {
            let rest = &r.bytes[r.pos..];
            if rest.len() < 4 && SHADOW_MARKER.starts_with(rest) {
                return Err(CheckpointError::Truncated { what: "shadow marker" });
            }
            if !rest.starts_with(&SHADOW_MARKER) {
                return Err(CheckpointError::TrailingBytes(rest.len()));
            }
            r.take(4, "shadow marker")?;
            let n = u64::from_le_bytes(r.take(8, "shadow length")?.try_into().unwrap()) as usize;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or(CheckpointError::Truncated { what: "shadow weights" })?,
                "shadow weights",
            )?;
            let w = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if r.remaining() != 0 {
                return Err(CheckpointError::TrailingBytes(r.remaining()));
            }
            Some(w)
        };
        Ok(Checkpoint { layers, shadow })
    }

    pub fn write(&self, path: &Path) -> Result<usize, CheckpointError> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(bytes.len())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn pack(codes: &[i32], bits: u8, out: &mut Vec<u8>) {
    let width = u32::from(bits);
    let mask = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &c in codes {
        let raw = if bits == 1 { u32::from(c > 0) } else { (c as u32) & mask };
        acc |= u64::from(raw) << filled;
        filled += width;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

fn unpack(bytes: &[u8], n: usize, bits: u8) -> Vec<i32> {
    let width = u32::from(bits);
    let mut codes = Vec::with_capacity(n);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    for _ in 0..n {
        while filled < width {
            acc |= u64::from(*it.next().expect("length checked by caller")) << filled;
            filled += 8;
        }
        let raw = (acc & ((1u64 << width) - 1)) as u32;
        acc >>= width;
        filled -= width;
        codes.push(if bits == 1 {
            if raw == 1 {
                1
            } else {
                -1
            }
        } else {
            // sign-extend
            ((raw << (32 - width)) as i32) >> (32 - width)
        });
    }
    codes
}
