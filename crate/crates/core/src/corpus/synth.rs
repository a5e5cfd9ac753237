//! Synthetic "context-shift" corpus.
//!
//! Each class is a fixed glyph composited over one of `backgrounds`
//! procedural stripe textures. Head classes are rendered on every texture
//! during training; tail classes only ever see `minority_exposure` of them.
//! The test split is class-balanced with textures drawn from the full pool,
//! so a tail class is mostly evaluated on backgrounds it never trained on.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassHistogram, Dataset, Image, ImageShape, LabeledImage};
use crate::error::{Error, Result};

/// Glyph grid resolution in cells per side.
const GLYPH_CELLS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextShiftSpec {
    pub num_classes: usize,
    /// Size of the background texture pool.
    pub backgrounds: usize,
    /// Distinct backgrounds each tail class sees during training.
    pub minority_exposure: usize,
    /// Classes with more than this many training samples are head classes.
    pub head_threshold: usize,
    /// Image width and height in pixels.
    pub side: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub test_per_class: usize,
}

impl ContextShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("context-shift corpus needs at least 2 classes"));
        }
        if self.backgrounds < 2 {
            return Err(Error::invalid(format!(
                "background pool must hold at least 2 textures, got {}",
                self.backgrounds
            )));
        }
        if self.minority_exposure == 0 || self.minority_exposure > self.backgrounds {
            return Err(Error::invalid(format!(
                "minority exposure {} must be in 1..={}",
                self.minority_exposure, self.backgrounds
            )));
        }
        if self.side < GLYPH_CELLS {
            return Err(Error::invalid(format!(
                "image side {} is smaller than the glyph grid",
                self.side
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid(format!("noise level {} must be >= 0", self.noise)));
        }
        if self.test_per_class == 0 {
            return Err(Error::invalid("test split needs at least one image per class"));
        }
        Ok(())
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape {
            width: self.side,
            height: self.side,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Sidecar bookkeeping for one generated image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub split: Split,
    pub index: usize,
    pub class: usize,
    pub background: usize,
}

#[derive(Debug, Clone)]
pub struct ContextShiftData {
    pub train: Dataset,
    pub test: Dataset,
    /// Backgrounds available to each class at training time.
    pub train_backgrounds: Vec<Vec<usize>>,
    pub manifest: Vec<ImageMeta>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic `5 x 5` bitmap for `class`. Depends on the class index only.
pub fn glyph_mask(class: usize) -> [[bool; GLYPH_CELLS]; GLYPH_CELLS] {
    let mut salt = 0u64;
    loop {
        let bits = splitmix((class as u64) << 8 | salt);
        let ones = (bits & 0x1FF_FFFF).count_ones();
        // Reject near-empty or near-full glyphs, they are hard to tell apart.
        if (10..=15).contains(&ones) {
            let mut mask = [[false; GLYPH_CELLS]; GLYPH_CELLS];
            for (i, row) in mask.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = bits >> (i * GLYPH_CELLS + j) & 1 == 1;
                }
            }
            return mask;
        }
        salt += 1;
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Renderer {
    spec: ContextShiftSpec,
    shape: ImageShape,
    noise: Option<Normal<f64>>,
    cell: usize,
}

impl Renderer {
    fn new(spec: &ContextShiftSpec) -> Self {
        let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("validated"));
        Self {
            spec: spec.clone(),
            shape: spec.shape(),
            noise,
            cell: (spec.side * 5 / 8 / GLYPH_CELLS).max(1),
        }
    }

    fn render<R: Rng + ?Sized>(&self, class: usize, background: usize, rng: &mut R) -> Image {
        let side = self.spec.side;
        let b = self.spec.backgrounds as f64;
        let tint = hsv_to_rgb(background as f64 / b, 0.75, 0.85);
        let angle = PI * background as f64 / b;
        let freq = 2.0 * PI * (1.5 + (background % 3) as f64) / side as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        let phase = rng.random_range(0.0..2.0 * PI);

        let glyph = glyph_mask(class);
        let glyph_px = self.cell * GLYPH_CELLS;
        let slack = side.saturating_sub(glyph_px);
        let ox = rng.random_range(0..=slack);
        let oy = rng.random_range(0..=slack);
        let ink = rng.random_range(0.85..1.0);

        let mut data = vec![0.0; self.shape.len()];
        for y in 0..side {
            for x in 0..side {
                let in_glyph = x >= ox
                    && y >= oy
                    && x < ox + glyph_px
                    && y < oy + glyph_px
                    && glyph[(y - oy) / self.cell][(x - ox) / self.cell];
                let wave = 0.55 + 0.45 * (freq * (x as f64 * dx + y as f64 * dy) + phase).sin();
                for (c, &t) in tint.iter().enumerate() {
                    let mut v = if in_glyph { ink } else { t * wave };
                    if let Some(n) = &self.noise {
                        v += n.sample(rng);
                    }
                    // Quantize so the in-memory image equals its 8-bit on-disk form.
                    data[self.shape.index(x, y, c)] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
            }
        }
        Image::from_raw(self.shape, data)
    }
}

/// Generates the train split following `hist` and a balanced test split.
pub fn synth_context_shift<R: Rng + ?Sized>(
    spec: &ContextShiftSpec,
    hist: &ClassHistogram,
    rng: &mut R,
) -> Result<ContextShiftData> {
    spec.validate()?;
    if hist.num_classes() != spec.num_classes {
        return Err(Error::invalid(format!(
            "histogram has {} classes, spec has {}",
            hist.num_classes(),
            spec.num_classes
        )));
    }
    let renderer = Renderer::new(spec);
    let full_pool: Vec<usize> = (0..spec.backgrounds).collect();

    let train_backgrounds: Vec<Vec<usize>> = hist
        .counts()
        .iter()
        .map(|&n| {
            if n > spec.head_threshold {
                full_pool.clone()
            } else {
                let mut chosen = index::sample(rng, spec.backgrounds, spec.minority_exposure).into_vec();
                chosen.sort_unstable();
                chosen
            }
        })
        .collect();

    let mut manifest = Vec::new();
    let mut train = Vec::with_capacity(hist.total());
    for (class, &n) in hist.counts().iter().enumerate() {
        let pool = &train_backgrounds[class];
        for _ in 0..n {
            let background = pool[rng.random_range(0..pool.len())];
            manifest.push(ImageMeta {
                split: Split::Train,
                index: train.len(),
                class,
                background,
            });
            train.push(LabeledImage {
                image: renderer.render(class, background, rng),
                label: class,
            });
        }
    }

    let mut test = Vec::with_capacity(spec.test_per_class * spec.num_classes);
    for class in 0..spec.num_classes {
        for _ in 0..spec.test_per_class {
            let background = rng.random_range(0..spec.backgrounds);
            manifest.push(ImageMeta {
                split: Split::Test,
                index: test.len(),
                class,
                background,
            });
            test.push(LabeledImage {
                image: renderer.render(class, background, rng),
                label: class,
            });
        }
    }

    Ok(ContextShiftData {
        train: Dataset::new(spec.shape(), spec.num_classes, train)?,
        test: Dataset::new(spec.shape(), spec.num_classes, test)?,
        train_backgrounds,
        manifest,
    })
}
