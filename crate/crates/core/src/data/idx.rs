//! IDX containers: big-endian `u32` magic, big-endian `u32` dims, `u8` payload.

use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw image array: `count` images of `rows x cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or(Error::Truncated { offset, needed: 4, available: bytes.len().saturating_sub(offset) })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Data(format!("image dims {count}x{rows}x{cols} overflow")))?;
    let payload = &bytes[16..];
    if payload.len() < needed {
        return Err(Error::Truncated { offset: 16, needed, available: payload.len() });
    }
    if payload.len() > needed {
        return Err(Error::Data(format!("{} trailing bytes after image payload", payload.len() - needed)));
    }
    Ok(IdxImages { count, rows, cols, pixels: payload.to_vec() })
}

/// Label bytes. The header count is returned separately so a short payload
/// can be reported against the image count.
pub fn parse_labels(bytes: &[u8]) -> Result<(usize, Vec<u8>)> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() > count {
        return Err(Error::Data(format!("{} trailing bytes after label payload", payload.len() - count)));
    }
    Ok((count, payload.to_vec()))
}

pub fn write_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Decodes an image/label pair into samples with pixels scaled by `1/255`.
pub fn decode(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Vec<Sample>> {
    let images = parse_images(image_bytes)?;
    let (declared, labels) = parse_labels(label_bytes)?;
    if declared != images.count || labels.len() != images.count {
        return Err(Error::CountMismatch { images: images.count, labels: labels.len().min(declared) });
    }
    if images.count == 0 {
        return Ok(Vec::new());
    }
    if images.rows == 0 || images.cols == 0 {
        return Err(Error::Data("zero-sized images".into()));
    }
    let plane = images.rows * images.cols;
    images
        .pixels
        .chunks(plane)
        .zip(&labels)
        .enumerate()
        .map(|(i, (px, &label))| {
            let data = px.iter().map(|&b| b as f32 / 255.0).collect();
            Ok(Sample {
                image: Tensor::new(&[1, images.rows, images.cols], data)?,
                label: label as usize,
                source_id: format!("idx:{i}"),
            })
        })
        .collect()
}

/// Inverse of [`decode`]: pixels are rounded back to bytes.
pub fn encode(samples: &[Sample]) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match samples.first().map(|s| s.image.shape()) {
        Some([1, r, c]) => (*r, *c),
        Some(s) => return Err(Error::Data(format!("IDX images must be [1, H, W], got {s:?}"))),
        None => (0, 0),
    };
    let mut pixels = Vec::with_capacity(samples.len() * rows * cols);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        s.image.expect_shape(&[1, rows, cols])?;
        let label = u8::try_from(s.label).map_err(|_| Error::Data(format!("label {} does not fit a byte", s.label)))?;
        labels.push(label);
        pixels.extend(s.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let images = IdxImages { count: samples.len(), rows, cols, pixels };
    Ok((write_images(&images), write_labels(&labels)))
}

pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>> {
    decode(&crate::error::read_file(images_path)?, &crate::error::read_file(labels_path)?)
}

pub fn write_idx(images_path: &Path, labels_path: &Path, samples: &[Sample]) -> Result<()> {
    let (images, labels) = encode(samples)?;
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = IdxImages { count: 2, rows: 3, cols: 3, pixels: (0..18).map(|i| (i * 15) as u8).collect() };
        (write_images(&images), write_labels(&[7, 2]))
    }

    #[test]
    fn decodes_exact_pixels() {
        let (img, lbl) = fixture();
        let s = decode(&img, &lbl).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].label, 2);
        assert_eq!(s[1].image.shape(), &[1, 3, 3]);
        assert_eq!(s[1].image.data()[0], 135.0 / 255.0);
    }

    #[test]
    fn round_trips_bytes() {
        let (img, lbl) = fixture();
        let (img2, lbl2) = encode(&decode(&img, &lbl).unwrap()).unwrap();
        assert_eq!((img, lbl), (img2, lbl2));
    }

    #[test]
    fn distinct_errors() {
        let (img, lbl) = fixture();
        assert!(matches!(decode(&lbl, &lbl), Err(Error::BadMagic { .. })));
        assert!(matches!(decode(&img[..20], &lbl), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&img, &lbl[..9]), Err(Error::CountMismatch { images: 2, labels: 1 })));
        assert!(matches!(decode(&img[..2], &lbl), Err(Error::Truncated { .. })));
    }
}
