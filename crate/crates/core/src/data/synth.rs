//! Seeded synthetic glyphs: each class is a fixed set of strokes drawn with
//! a random affine jitter and additive pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ALPHABET_SIZE: usize = 64;

const ALPHABET_SEED: u64 = 0x6c79_7068_7321;
const STROKE_HALF_WIDTH: f64 = 0.045;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Amplitude of uniform pixel noise in `[-noise, noise]`.
    pub noise: f64,
    /// Scales the jitter ranges (±10% scale, ±10°, ±4px at 1.0).
    pub jitter: f64,
    pub seed: u64,
    pub size: usize,
}

impl SynthConfig {
    pub fn new(num_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        Self { num_classes, samples_per_class, noise: 0.1, jitter: 1.0, seed, size: 64 }
    }
}

type Stroke = [(f64, f64); 2];

/// Stroke template of class `c`, in unit coordinates centred on the origin.
/// Templates come from a fixed generator so they never depend on the
/// dataset seed.
fn template(c: usize) -> Vec<Stroke> {
    let mut rng = ChaCha8Rng::seed_from_u64(ALPHABET_SEED ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = 2 + c % 3;
    (0..n)
        .map(|_| {
            let mut p = || (rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35));
            [p(), p()]
        })
        .collect()
}

fn segment_distance((px, py): (f64, f64), [(ax, ay), (bx, by)]: Stroke) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

fn render(strokes: &[Stroke], size: usize, scale: f64, angle: f64, shift: (f64, f64)) -> Vec<f64> {
    let (sin, cos) = angle.sin_cos();
    let aa = 1.0 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            // Pixel centre to unit coordinates, then undo the glyph transform.
            let u = (x as f64 + 0.5 - shift.0) / size as f64 - 0.5;
            let v = (y as f64 + 0.5 - shift.1) / size as f64 - 0.5;
            let p = ((cos * u + sin * v) / scale, (-sin * u + cos * v) / scale);
            let d = strokes.iter().map(|&s| segment_distance(p, s)).fold(f64::INFINITY, f64::min);
            out.push((1.0 - (d - STROKE_HALF_WIDTH) / aa).clamp(0.0, 1.0));
        }
    }
    out
}

/// Generates `num_classes * samples_per_class` samples, class-major.
pub fn synth_glyphs(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.num_classes > ALPHABET_SIZE {
        return Err(Error::Param(format!("num_classes must be in 1..={ALPHABET_SIZE}, got {}", cfg.num_classes)));
    }
    if cfg.size == 0 || !(0.0..=1.0).contains(&cfg.noise) || !(0.0..=1.0).contains(&cfg.jitter) {
        return Err(Error::Param("synth size must be positive; noise and jitter in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let j = cfg.jitter;
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    for c in 0..cfg.num_classes {
        let strokes = template(c);
        for i in 0..cfg.samples_per_class {
            let scale = 1.0 + rng.gen_range(-0.1..=0.1) * j;
            let angle = rng.gen_range(-10.0f64..=10.0).to_radians() * j;
            let shift = (rng.gen_range(-4.0..=4.0) * j, rng.gen_range(-4.0..=4.0) * j);
            let mut px = render(&strokes, cfg.size, scale, angle, shift);
            if cfg.noise > 0.0 {
                for v in &mut px {
                    *v = (*v + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
                }
            }
            let image = Tensor::new(&[1, cfg.size, cfg.size], px.into_iter().map(|v| v as f32).collect())?;
            samples.push(Sample { image, label: c, source_id: format!("synth:{c}:{i}") });
        }
    }
    Dataset::new(samples, cfg.num_classes)
}
