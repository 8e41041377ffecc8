//! `.ccnn` model container. All integers little-endian.
//!
//! ```text
//! "CCNN" | version u16 | spec_len u32 | spec JSON | record_count u32 | records... | crc32 u32
//! record: name_len u16 | name | kind u8 | ndim u8 | dims u32 * ndim | encoding u8 | payload
//!   encoding 0: f32 * n
//!   encoding 1: bits u8 | scale f32 | codes packed LSB-first, two's complement, padded to a byte
//! ```
//! The CRC covers every byte before it.

use std::path::Path;

use crate::arch::{declare, Network, NetworkSpec, ParamKind, Parameters};
use crate::error::{Error, Result};
use crate::quant::{quantize_params, QuantScheme, QuantizedTensor, StoredTensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CCNN";
pub const VERSION: u16 = 1;
const ENC_FLOAT: u8 = 0;
const ENC_QUANT: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: StoredTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub spec: NetworkSpec,
    pub records: Vec<ModelRecord>,
}

impl ModelFile {
    /// Float records for every parameter.
    pub fn from_network(net: &Network<f32>) -> Self {
        let records = net
            .params()
            .iter()
            .map(|(name, p)| ModelRecord { name: name.to_string(), kind: p.kind, tensor: StoredTensor::Float(p.value.clone()) })
            .collect();
        Self { spec: net.spec().clone(), records }
    }

    pub fn quantized(net: &Network<f32>, scheme: &QuantScheme) -> Result<Self> {
        let records = quantize_params(net.params(), scheme)?
            .into_iter()
            .map(|(name, kind, tensor)| ModelRecord { name, kind, tensor })
            .collect();
        Ok(Self { spec: net.spec().clone(), records })
    }

    pub fn is_quantized(&self) -> bool {
        self.records.iter().any(|r| matches!(r.tensor, StoredTensor::Quantized(_)))
    }

    /// Dequantizes into a runnable network, checking records against the spec.
    pub fn to_network(&self) -> Result<Network<f32>> {
        let mut params = Parameters::new();
        for r in &self.records {
            params.insert(r.name.clone(), r.kind, r.tensor.to_tensor());
        }
        Network::new(self.spec.clone(), params)
    }

    /// Bytes outside the tensor payloads: magic, version, spec, record
    /// headers and checksum.
    pub fn overhead_bytes(&self) -> Result<usize> {
        let payload: usize = self.records.iter().map(|r| payload_len(&r.tensor)).sum();
        Ok(self.to_bytes()?.len() - payload)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = serde_json::to_vec(&self.spec)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Param(format!("parameter name too long: {}", r.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.kind.to_byte());
            let shape = r.tensor.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| Error::Param(format!("{}: too many dims", r.name)))?);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.tensor {
                StoredTensor::Float(t) => {
                    out.push(ENC_FLOAT);
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                StoredTensor::Quantized(q) => {
                    q.validate()?;
                    out.push(ENC_QUANT);
                    out.push(q.bits);
                    out.extend_from_slice(&q.scale.to_le_bytes());
                    out.extend(pack_codes(&q.codes, q.bits));
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            let found = u32::from_be_bytes([magic[0], magic[1], magic[2], magic[3]]);
            return Err(Error::BadMagic { expected: u32::from_be_bytes(*MAGIC), found });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { expected: VERSION, found: version });
        }
        if bytes.len() < r.pos + 4 {
            return Err(Error::Truncated { offset: r.pos, needed: 4, available: bytes.len() - r.pos });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: &bytes[..body_end], pos: r.pos };
        let spec_len = r.u32()? as usize;
        let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len)?)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptRecord { offset: at, reason: "parameter name is not UTF-8".into() })?;
            let kind_byte = r.u8()?;
            let kind = ParamKind::from_byte(kind_byte)
                .ok_or_else(|| Error::CorruptRecord { offset: at, reason: format!("unknown parameter kind {kind_byte}") })?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && ndim > 0)
                .ok_or_else(|| Error::CorruptRecord { offset: at, reason: format!("bad shape {shape:?}") })?;
            let tensor = match r.u8()? {
                ENC_FLOAT => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptRecord { offset: at, reason: "size overflow".into() })?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    StoredTensor::Float(Tensor::new(&shape, data)?)
                }
                ENC_QUANT => {
                    let bits = r.u8()?;
                    let scale = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
                    if !matches!(bits, 2 | 4 | 8 | 16) {
                        return Err(Error::CorruptRecord { offset: at, reason: format!("unsupported bit width {bits}") });
                    }
                    let packed = r.take((n * bits as usize).div_ceil(8))?;
                    let q = QuantizedTensor { codes: unpack_codes(packed, bits, n), scale, bits, shape };
                    q.validate().map_err(|e| Error::CorruptRecord { offset: at, reason: e.to_string() })?;
                    StoredTensor::Quantized(q)
                }
                tag => return Err(Error::UnknownEncoding(tag)),
            };
            records.push(ModelRecord { name, kind, tensor });
        }
        if r.pos != r.bytes.len() {
            return Err(Error::CorruptRecord { offset: r.pos, reason: "trailing bytes before checksum".into() });
        }
        let file = Self { spec, records };
        file.spec.validate()?;
        declare(&file.spec)?;
        Ok(file)
    }
}

fn payload_len(t: &StoredTensor) -> usize {
    match t {
        StoredTensor::Float(t) => t.len() * 4,
        StoredTensor::Quantized(q) => 4 + (q.codes.len() * q.bits as usize).div_ceil(8),
    }
}

pub fn pack_codes(codes: &[i32], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mask = (1u64 << bits) - 1;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        let v = (c as i64 as u64) & mask;
        for b in 0..bits {
            if v >> b & 1 == 1 {
                let pos = i * bits + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

pub fn unpack_codes(packed: &[u8], bits: u8, n: usize) -> Vec<i32> {
    let bits = bits as usize;
    (0..n)
        .map(|i| {
            let mut v: u32 = 0;
            for b in 0..bits {
                let pos = i * bits + b;
                v |= ((packed[pos / 8] >> (pos % 8)) as u32 & 1) << b;
            }
            // Sign-extend from `bits`.
            let shift = 32 - bits;
            ((v << shift) as i32) >> shift
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_model(path: &Path, net: &Network<f32>, quant: Option<&QuantScheme>) -> Result<()> {
    let file = match quant {
        Some(q) => ModelFile::quantized(net, q)?,
        None => ModelFile::from_network(net),
    };
    std::fs::write(path, file.to_bytes()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::from_bytes(&crate::error::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_network;

    fn small() -> Network<f32> {
        build_network(&NetworkSpec::hccr(5, 8, true).unwrap(), 3).unwrap()
    }

    #[test]
    fn packs_signed_codes() {
        for bits in [2u8, 4, 8, 16] {
            let m = (1i32 << (bits - 1)) - 1;
            let codes: Vec<i32> = (-m..=m).chain([0, m, -m]).collect();
            assert_eq!(unpack_codes(&pack_codes(&codes, bits), bits, codes.len()), codes);
        }
    }

    #[test]
    fn float_round_trip_is_bitwise() {
        let net = small();
        let file = ModelFile::from_bytes(&ModelFile::from_network(&net).to_bytes().unwrap()).unwrap();
        assert_eq!(file.to_network().unwrap(), net);
    }

    #[test]
    fn quantized_round_trip_is_code_exact() {
        let file = ModelFile::quantized(&small(), &QuantScheme::default()).unwrap();
        assert_eq!(ModelFile::from_bytes(&file.to_bytes().unwrap()).unwrap(), file);
    }

    #[test]
    fn distinct_errors() {
        let bytes = ModelFile::from_network(&small()).to_bytes().unwrap();
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(ModelFile::from_bytes(&v), Err(Error::VersionMismatch { found: 9, .. })));
        let mut v = bytes.clone();
        v[40] ^= 1;
        assert!(matches!(ModelFile::from_bytes(&v), Err(Error::Checksum { .. })));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&v), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unknown_encoding_reported() {
        let file = ModelFile::from_network(&small());
        let mut bytes = file.to_bytes().unwrap();
        // Offset of the first record's encoding byte.
        let spec_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let rec = 10 + spec_len + 4;
        let name_len = u16::from_le_bytes(bytes[rec..rec + 2].try_into().unwrap()) as usize;
        let ndim = bytes[rec + 2 + name_len + 1] as usize;
        let enc = rec + 2 + name_len + 2 + 4 * ndim;
        bytes[enc] = 7;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(ModelFile::from_bytes(&bytes), Err(Error::UnknownEncoding(7))));
    }
}
