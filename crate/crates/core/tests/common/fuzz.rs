//! Byte-level mutations of valid IDX and GNT fixtures.

use ccnn::data::gnt::GntRecord;
use ccnn::data::idx::{self, IdxImages};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn mutate(rng: &mut ChaCha8Rng, mut bytes: Vec<u8>) -> Vec<u8> {
    match rng.gen_range(0..5) {
        0 if !bytes.is_empty() => {
            let cut = rng.gen_range(0..bytes.len());
            bytes.truncate(cut);
        }
        1 => {
            for _ in 0..rng.gen_range(1..4) {
                bytes.push(rng.gen());
            }
        }
        2 if !bytes.is_empty() => {
            // Header bytes are where the interesting failures live.
            let i = rng.gen_range(0..bytes.len().min(24));
            bytes[i] = rng.gen();
        }
        3 if !bytes.is_empty() => {
            for _ in 0..rng.gen_range(1..8) {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        _ => {
            let n = rng.gen_range(0..64);
            bytes = (0..n).map(|_| rng.gen()).collect();
        }
    }
    bytes
}

pub fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let images = IdxImages { count: 3, rows: 4, cols: 5, pixels: (0..60).map(|i| (i * 4) as u8).collect() };
    (idx::write_images(&images), idx::write_labels(&[0, 1, 2]))
}

pub fn gnt_fixture() -> Vec<u8> {
    let mut out = Vec::new();
    for (i, tag) in [*b"\xb0\xa1", *b"\xb0\xa2", *b"\xb0\xa1"].into_iter().enumerate() {
        let (w, h) = (3 + i, 5 - i);
        out.extend(GntRecord { offset: 0, tag, width: w, height: h, bitmap: vec![(i * 60) as u8; w * h] }.encode());
    }
    out
}

