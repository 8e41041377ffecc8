//! GNT character files: a concatenation of records
//! `record_size: u32 LE | tag: [u8; 2] | width: u16 LE | height: u16 LE | bitmap`,
//! with `record_size = 10 + width * height` and bitmap bytes 0 = ink, 255 = paper.

use std::path::Path;

use indexmap::IndexMap;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_LEN: usize = 10;
/// Largest record accepted; anything bigger is treated as corruption.
pub const MAX_RECORD: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GntRecord {
    pub offset: usize,
    pub tag: [u8; 2],
    pub width: usize,
    pub height: usize,
    pub bitmap: Vec<u8>,
}

impl GntRecord {
    pub fn encode(&self) -> Vec<u8> {
        let size = (HEADER_LEN + self.bitmap.len()) as u32;
        let mut out = Vec::with_capacity(size as usize);
        out.extend_from_slice(&size.to_le_bytes());
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&self.bitmap);
        out
    }
}

/// Iterates records, stopping at the first malformed one.
pub fn records(bytes: &[u8]) -> impl Iterator<Item = Result<GntRecord>> + '_ {
    let mut offset = 0;
    let mut failed = false;
    std::iter::from_fn(move || {
        if failed || offset >= bytes.len() {
            return None;
        }
        let r = parse_record(bytes, offset);
        match &r {
            Ok(rec) => offset += HEADER_LEN + rec.bitmap.len(),
            Err(_) => failed = true,
        }
        Some(r)
    })
}

fn parse_record(bytes: &[u8], offset: usize) -> Result<GntRecord> {
    let rest = &bytes[offset..];
    if rest.len() < HEADER_LEN {
        return Err(Error::Truncated { offset, needed: HEADER_LEN, available: rest.len() });
    }
    let size = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
    let tag = [rest[4], rest[5]];
    let width = u16::from_le_bytes([rest[6], rest[7]]) as usize;
    let height = u16::from_le_bytes([rest[8], rest[9]]) as usize;
    let corrupt = |reason: String| Error::CorruptRecord { offset, reason };
    if size > MAX_RECORD {
        return Err(corrupt(format!("record size {size} exceeds the {MAX_RECORD}-byte cap")));
    }
    if size != HEADER_LEN + width * height {
        return Err(corrupt(format!("record size {size} but {width}x{height} bitmap needs {}", HEADER_LEN + width * height)));
    }
    if width == 0 || height == 0 {
        return Err(corrupt(format!("empty {width}x{height} bitmap")));
    }
    if rest.len() < size {
        return Err(Error::Truncated { offset, needed: size, available: rest.len() });
    }
    Ok(GntRecord { offset, tag, width, height, bitmap: rest[HEADER_LEN..size].to_vec() })
}

/// Assigns tag codes to contiguous class indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassMap {
    classes: IndexMap<[u8; 2], usize>,
}

impl ClassMap {
    pub fn from_tags(tags: impl IntoIterator<Item = [u8; 2]>) -> Self {
        let mut classes = IndexMap::new();
        for t in tags {
            let next = classes.len();
            classes.entry(t).or_insert(next);
        }
        Self { classes }
    }

    /// Classes in order of first appearance in `bytes`.
    pub fn discover(bytes: &[u8]) -> Result<Self> {
        let tags: Vec<[u8; 2]> = records(bytes).map(|r| r.map(|r| r.tag)).collect::<Result<_>>()?;
        Ok(Self::from_tags(tags))
    }

    pub fn get(&self, tag: [u8; 2]) -> Option<usize> {
        self.classes.get(&tag).copied()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GntLoad {
    pub samples: Vec<Sample>,
    /// Records whose tag is not in the class map.
    pub skipped: usize,
}

/// Parses a whole file, preprocessing each mapped glyph to `size x size`.
pub fn parse_gnt(bytes: &[u8], class_map: &ClassMap, size: usize) -> Result<GntLoad> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for rec in records(bytes) {
        let rec = rec?;
        let Some(label) = class_map.get(rec.tag) else {
            skipped += 1;
            continue;
        };
        samples.push(Sample {
            image: preprocess(&rec.bitmap, rec.width, rec.height, size)?,
            label,
            source_id: format!("gnt:{}", rec.offset),
        });
    }
    Ok(GntLoad { samples, skipped })
}

pub fn read_gnt(path: &Path, class_map: &ClassMap, size: usize) -> Result<GntLoad> {
    parse_gnt(&crate::error::read_file(path)?, class_map, size)
}

/// Inverts to ink-high `[0, 1]`, centres on a zero square canvas of side
/// `max(w, h)`, then bilinearly resamples to `size x size`.
pub fn preprocess(bitmap: &[u8], width: usize, height: usize, size: usize) -> Result<Tensor<f32>> {
    if bitmap.len() != width * height {
        return Err(Error::dim(format!("{width}x{height} bitmap with {} bytes", bitmap.len())));
    }
    let side = width.max(height);
    let (ox, oy) = ((side - width) / 2, (side - height) / 2);
    let mut square = vec![0.0f32; side * side];
    for y in 0..height {
        for x in 0..width {
            square[(y + oy) * side + x + ox] = (255 - bitmap[y * width + x]) as f32 / 255.0;
        }
    }
    Tensor::new(&[1, size, size], resize_bilinear(&square, side, side, size, size))
}

/// Half-pixel-centre bilinear resampling with edge clamping.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let axis = |dst: usize, n_src: usize, n_dst: usize| -> (usize, usize, f32) {
        let pos = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = axis(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = axis(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(tag: [u8; 2], w: usize, h: usize) -> GntRecord {
        GntRecord { offset: 0, tag, width: w, height: h, bitmap: (0..w * h).map(|i| (i * 40) as u8).collect() }
    }

    #[test]
    fn single_record_inverts() {
        let bytes = record(*b"AB", 3, 2).encode();
        let map = ClassMap::discover(&bytes).unwrap();
        let load = parse_gnt(&bytes, &map, 3).unwrap();
        assert_eq!(load.samples.len(), 1);
        let img = &load.samples[0].image;
        assert_eq!(img.shape(), &[1, 3, 3]);
        // 3x2 pads to 3x3 with the bitmap in rows 0..2; resampling 3 -> 3 is the identity.
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], (255.0 - 40.0) / 255.0);
        assert_eq!(img.data()[8], 0.0);
    }

    #[test]
    fn bad_size_names_offset() {
        let mut bytes = record(*b"AB", 3, 2).encode();
        bytes[0] = 99;
        match parse_gnt(&bytes, &ClassMap::default(), 8) {
            Err(Error::CorruptRecord { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_tags_skipped() {
        let mut bytes = record(*b"AB", 2, 2).encode();
        bytes.extend(record(*b"CD", 2, 2).encode());
        let map = ClassMap::from_tags([*b"CD"]);
        let load = parse_gnt(&bytes, &map, 4).unwrap();
        assert_eq!((load.samples.len(), load.skipped), (1, 1));
        assert_eq!(load.samples[0].source_id, "gnt:14");
    }
}
