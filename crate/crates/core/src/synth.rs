//! Procedural image generators: class-prototype fixtures and distractor pools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{default_class_names, CandidateDataset, Image, ImageRecord, Source};
use crate::error::{Error, Result};

/// Low-frequency random field in `[0, 1]`: a `grid × grid` lattice of uniform
/// values per channel, bilinearly upsampled to `h × w`. Interleaved HWC.
pub fn smooth_field(rng: &mut impl Rng, h: usize, w: usize, c: usize, grid: usize) -> Vec<f64> {
    let g = grid.max(2);
    let lattice: Vec<f64> = (0..g * g * c).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        let fy = if h > 1 { i as f64 * (g - 1) as f64 / (h - 1) as f64 } else { 0.0 };
        let y0 = (fy.floor() as usize).min(g - 2);
        let ty = fy - y0 as f64;
        for j in 0..w {
            let fx = if w > 1 { j as f64 * (g - 1) as f64 / (w - 1) as f64 } else { 0.0 };
            let x0 = (fx.floor() as usize).min(g - 2);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, x: usize| lattice[(y * g + x) * c + ch];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[(i * w + j) * c + ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

fn to_image(h: usize, w: usize, c: usize, values: impl Iterator<Item = f64>) -> Image {
    let data = values.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    Image::new(h, w, c, data).expect("generator produces consistent buffers")
}

/// Parameters of a class-clustered image fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrototypeSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Lattice size of the prototype and per-sample fields.
    pub grid: usize,
    /// Weight of the per-sample smooth field mixed into the prototype, in `[0, 1]`.
    pub variation: f64,
    /// Standard deviation of i.i.d. pixel noise, in intensity units of `[0, 1]`.
    pub pixel_noise: f64,
}

impl Default for PrototypeSpec {
    fn default() -> Self {
        PrototypeSpec {
            num_classes: 10,
            height: 12,
            width: 12,
            channels: 3,
            grid: 4,
            variation: 0.5,
            pixel_noise: 0.05,
        }
    }
}

/// One smooth prototype per class; samples are noisy variations of it.
#[derive(Clone, Debug)]
pub struct ClassPrototypes {
    spec: PrototypeSpec,
    prototypes: Vec<Vec<f64>>,
}

impl ClassPrototypes {
    pub fn new(spec: PrototypeSpec, seed: u64) -> Result<Self> {
        if spec.num_classes == 0 || spec.height == 0 || spec.width == 0 {
            return Err(Error::invalid("prototype fixture needs positive sizes"));
        }
        if spec.channels != 1 && spec.channels != 3 {
            return Err(Error::invalid("channels must be 1 or 3"));
        }
        if !(0.0..=1.0).contains(&spec.variation) {
            return Err(Error::invalid("variation must be in [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..spec.num_classes)
            .map(|_| smooth_field(&mut rng, spec.height, spec.width, spec.channels, spec.grid))
            .collect();
        Ok(ClassPrototypes { spec, prototypes })
    }

    pub fn spec(&self) -> &PrototypeSpec {
        &self.spec
    }

    /// `per_class` samples of every class, class-interleaved, with correct
    /// labels and `clean_flag = Some(true)`.
    pub fn sample(&self, per_class: usize, id_prefix: &str, source: Source, seed: u64) -> Result<CandidateDataset> {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(per_class * s.num_classes);
        for i in 0..per_class {
            for (class, proto) in self.prototypes.iter().enumerate() {
                let field = smooth_field(&mut rng, s.height, s.width, s.channels, s.grid);
                let values: Vec<f64> = proto
                    .iter()
                    .zip(&field)
                    .map(|(p, f)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (1.0 - s.variation) * p + s.variation * f + s.pixel_noise * z
                    })
                    .collect();
                let image = to_image(s.height, s.width, s.channels, values.into_iter());
                let id = format!("{id_prefix}{}", i * s.num_classes + class);
                records.push(
                    ImageRecord::new(id, image, class)
                        .with_source(source)
                        .with_clean_flag(Some(true)),
                );
            }
        }
        CandidateDataset::new(records, default_class_names(s.num_classes), seed)
    }
}

/// Out-of-distribution images grouped into `themes`; each theme is a smooth
/// base field plus small per-image variation, so images within a theme look
/// alike. The theme index is stored as the record label.
pub fn distractor_pool(
    themes: usize,
    per_theme: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<CandidateDataset> {
    if themes == 0 {
        return Err(Error::invalid("distractor pool needs at least one theme"));
    }
    let (h, w, c) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(themes * per_theme);
    for theme in 0..themes {
        // Sharper lattice than the class prototypes keeps themes off-distribution.
        let base = smooth_field(&mut rng, h, w, c, 7);
        for i in 0..per_theme {
            let field = smooth_field(&mut rng, h, w, c, 7);
            let values = base.iter().zip(&field).map(|(b, f)| 0.8 * b + 0.2 * f);
            let id = format!("distractor-{theme}-{i}");
            records.push(
                ImageRecord::new(id, to_image(h, w, c, values), theme)
                    .with_source(Source::Synthetic)
                    .with_keyword(format!("theme-{theme}")),
            );
        }
    }
    CandidateDataset::with_num_classes(records, themes, seed)
}
