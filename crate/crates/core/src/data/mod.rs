//! Labelled grayscale image datasets and their on-disk sources.

pub mod gnt;
pub mod idx;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gnt::{read_gnt, ClassMap, GntLoad, GntRecord};
pub use idx::{read_idx, IdxImages};
pub use synth::{synth_glyphs, SynthConfig, ALPHABET_SIZE};

/// One `[1, H, W]` image with pixel values in `[0, 1]`, ink high.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl Dataset {
    /// Checks that every image shares one `[1, H, W]` shape, pixels lie in
    /// `[0, 1]` and labels are below `num_classes`.
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Param("dataset needs at least one class".into()));
        }
        if let Some(first) = samples.first() {
            let shape = first.image.shape().to_vec();
            if shape.len() != 3 || shape[0] != 1 {
                return Err(Error::Data(format!("images must be [1, H, W], got {shape:?}")));
            }
            for s in &samples {
                s.image.expect_shape(&shape)?;
                if s.label >= num_classes {
                    return Err(Error::Data(format!(
                        "{}: label {} out of range for {num_classes} classes",
                        s.source_id, s.label
                    )));
                }
                if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data(format!("{}: pixel outside [0, 1]", s.source_id)));
                }
            }
        }
        Ok(Self { samples, num_classes })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[1, H, W]` of the images, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stacks the selected samples into a `[B, 1, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Usage(format!("sample index {i} out of range")))?;
            images.push(&s.image);
            labels.push(s.label);
        }
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Stratified split: within each class, a seeded shuffle sends
    /// `round(n * holdout)` samples to the second set. Order within each set
    /// follows the original order.
    pub fn split(&self, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout) {
            return Err(Error::Param(format!("holdout fraction {holdout} not in [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut held = vec![false; self.samples.len()];
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.samples.len()).filter(|&i| self.samples[i].label == class).collect();
            idx.shuffle(&mut rng);
            let n = (idx.len() as f64 * holdout).round() as usize;
            for &i in &idx[..n] {
                held[i] = true;
            }
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (s, h) in self.samples.iter().zip(held) {
            if h { b.push(s.clone()) } else { a.push(s.clone()) }
        }
        Ok((Dataset { samples: a, num_classes: self.num_classes }, Dataset { samples: b, num_classes: self.num_classes }))
    }
}

/// Where a dataset comes from, as written on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `synth:KxN` or `synth:KxN:SEED`.
    Synth { classes: usize, per_class: usize, seed: u64 },
    /// A directory holding `images.idx` and `labels.idx` (any name containing
    /// "images"/"labels" with an `idx` marker also works).
    Idx(PathBuf),
    /// A `.gnt` file.
    Gnt(PathBuf),
}

impl DataSource {
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(rest) = text.strip_prefix("synth:") {
            let mut parts = rest.split(':');
            let dims = parts.next().unwrap_or_default();
            let (k, n) = dims
                .split_once(['x', 'X', '×'])
                .ok_or_else(|| Error::Param(format!("expected synth:KxN, got {text:?}")))?;
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::Param(format!("bad number {s:?} in {text:?}")));
            let seed = match parts.next() {
                Some(s) => s.parse().map_err(|_| Error::Param(format!("bad seed {s:?}")))?,
                None => 0,
            };
            if parts.next().is_some() {
                return Err(Error::Param(format!("trailing fields in {text:?}")));
            }
            return Ok(DataSource::Synth { classes: num(k)?, per_class: num(n)?, seed });
        }
        let path = PathBuf::from(text);
        if path.is_dir() {
            Ok(DataSource::Idx(path))
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gnt")) {
            Ok(DataSource::Gnt(path))
        } else if path.exists() {
            Err(Error::Param(format!("{text}: expected a directory of IDX files or a .gnt file")))
        } else {
            Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{text}: no such file or directory"))))
        }
    }

    /// Loads the dataset, resizing GNT glyphs to `size x size`.
    pub fn load(&self, size: usize) -> Result<Dataset> {
        match self {
            DataSource::Synth { classes, per_class, seed } => {
                synth_glyphs(&SynthConfig { size, ..SynthConfig::new(*classes, *per_class, *seed) })
            }
            DataSource::Idx(dir) => {
                let (images, labels) = idx_pair(dir)?;
                let mut samples = read_idx(&images, &labels)?;
                for s in &mut samples {
                    s.image = fit(&s.image, size)?;
                }
                let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(1);
                Dataset::new(samples, classes)
            }
            DataSource::Gnt(path) => {
                let bytes = crate::error::read_file(path)?;
                let map = ClassMap::discover(&bytes)?;
                let load = gnt::parse_gnt(&bytes, &map, size)?;
                Dataset::new(load.samples, map.len().max(1))
            }
        }
    }
}

/// Pads a `[1, H, W]` image to a square with zeros and resamples it to
/// `size x size`; images already that size pass through untouched.
pub fn fit(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("expected a [1, H, W] image, got {s:?}"))),
    };
    if (h, w) == (size, size) {
        return Ok(image.clone());
    }
    let side = h.max(w);
    let (ox, oy) = ((side - w) / 2, (side - h) / 2);
    let mut square = vec![0.0f32; side * side];
    for y in 0..h {
        square[(y + oy) * side + ox..][..w].copy_from_slice(&image.data()[y * w..][..w]);
    }
    Tensor::new(&[1, size, size], gnt::resize_bilinear(&square, side, side, size, size))
}

fn idx_pair(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut images = None;
    let mut labels = None;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
        if !name.contains("idx") {
            continue;
        }
        if name.contains("image") && images.is_none() {
            images = Some(p);
        } else if name.contains("label") && labels.is_none() {
            labels = Some(p);
        }
    }
    match (images, labels) {
        (Some(i), Some(l)) => Ok((i, l)),
        _ => Err(Error::Data(format!("{}: no images/labels IDX pair found", dir.display()))),
    }
}
