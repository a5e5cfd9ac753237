//! Image/label mixing.
//!
//! Region arithmetic reproduces the integer CutMix recipe: cut sizes are
//! floored, halved with integer division and clipped to the image, and the
//! label ratio is recomputed from the area that was actually pasted.

mod augment;

pub use augment::{color_jitter, gaussian_blur, BlurParams, JitterParams, KernelSize};

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::sampler::SamplingDistribution;

/// Paste rectangle `[x1, x2) x [y1, y2)` with the raw and area-adjusted
/// mixing ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixRegion {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub lambda_raw: f64,
    pub lambda_adj: f64,
}

impl MixRegion {
    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x1 > self.x2 || self.y1 > self.y2 || self.x2 > width || self.y2 > height {
            return Err(Error::invalid(format!(
                "region [{}, {}) x [{}, {}) does not fit a {width}x{height} image",
                self.x1, self.x2, self.y1, self.y2
            )));
        }
        Ok(())
    }
}

/// `lambda ~ Beta(alpha, alpha)`.
pub fn draw_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Region for a given centre. `lambda_raw` must lie in `[0, 1]`.
pub fn region_at(
    width: usize,
    height: usize,
    lambda_raw: f64,
    cx: usize,
    cy: usize,
) -> Result<MixRegion> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    if !(0.0..=1.0).contains(&lambda_raw) {
        return Err(Error::invalid(format!("lambda {lambda_raw} outside [0, 1]")));
    }
    let cut_rat = (1.0 - lambda_raw).sqrt();
    let half_w = (width as f64 * cut_rat).floor() as i64 / 2;
    let half_h = (height as f64 * cut_rat).floor() as i64 / 2;
    let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
    let (cx, cy) = (cx as i64, cy as i64);
    let mut region = MixRegion {
        x1: clip(cx - half_w, width),
        x2: clip(cx + half_w, width),
        y1: clip(cy - half_h, height),
        y2: clip(cy + half_h, height),
        lambda_raw,
        lambda_adj: 0.0,
    };
    region.lambda_adj = adjusted_lambda(&region, width, height)?;
    Ok(region)
}

/// Samples a paste region with a uniform centre over the image.
pub fn sample_region<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    lambda_raw: f64,
    rng: &mut R,
) -> Result<MixRegion> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    let cx = rng.random_range(0..width);
    let cy = rng.random_range(0..height);
    region_at(width, height, lambda_raw, cx, cy)
}

/// `1 - area / (W * H)`.
pub fn adjusted_lambda(region: &MixRegion, width: usize, height: usize) -> Result<f64> {
    region.check_within(width, height)?;
    Ok(1.0 - region.area() as f64 / (width * height) as f64)
}

/// Pastes `foreground` inside `region` onto a copy of `background`.
pub fn cutmix(background: &Image, foreground: &Image, region: &MixRegion) -> Result<Image> {
    background.ensure_same_shape(foreground)?;
    let shape = background.shape();
    region.check_within(shape.width, shape.height)?;
    let mut data = background.data().to_vec();
    let src = foreground.data();
    for y in region.y1..region.y2 {
        let start = shape.index(region.x1, y, 0);
        let end = start + (region.x2 - region.x1) * shape.channels;
        data[start..end].copy_from_slice(&src[start..end]);
    }
    Ok(Image::from_raw(shape, data))
}

/// `lambda * background + (1 - lambda) * foreground`, elementwise.
pub fn mixup(background: &Image, foreground: &Image, lambda: f64) -> Result<Image> {
    background.ensure_same_shape(foreground)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let data = background
        .data()
        .iter()
        .zip(foreground.data())
        .map(|(b, f)| (lambda * b + (1.0 - lambda) * f).clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_raw(background.shape(), data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        mix_labels(class, class, 1.0, num_classes)
    }
}

/// `lambda * onehot(y_b) + (1 - lambda) * onehot(y_f)`.
pub fn mix_labels(y_b: usize, y_f: usize, lambda: f64, num_classes: usize) -> Result<SoftLabel> {
    if y_b >= num_classes || y_f >= num_classes {
        return Err(Error::invalid(format!(
            "labels ({y_b}, {y_f}) out of range for {num_classes} classes"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut probs = vec![0.0; num_classes];
    if y_b == y_f {
        probs[y_b] = 1.0;
    } else {
        probs[y_b] = lambda;
        probs[y_f] = 1.0 - lambda;
    }
    Ok(SoftLabel { probs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixVariant {
    /// Background from P, foreground patch from Q.
    Cmo,
    /// Background from Q, foreground patch from P.
    CmoBack,
    /// Both from Q.
    CmoMinor,
    /// Both from P (ordinary CutMix).
    CutmixPlain,
    /// Mixup interpolation of a P image with a Q image.
    MixupQ,
    /// Q-drawn minority images augmented with Gaussian blur.
    BlurOversample,
    /// Q-drawn minority images augmented with color jitter.
    JitterOversample,
}

impl MixVariant {
    pub const ALL: [MixVariant; 7] = [
        MixVariant::Cmo,
        MixVariant::CmoBack,
        MixVariant::CmoMinor,
        MixVariant::CutmixPlain,
        MixVariant::MixupQ,
        MixVariant::BlurOversample,
        MixVariant::JitterOversample,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compositor {
    Cutmix,
    Mixup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Blur,
    Jitter,
}

/// Which distribution feeds which side of the mix.
#[derive(Debug, Clone, Copy)]
pub enum PairSources<'a> {
    Paired {
        background: &'a SamplingDistribution,
        foreground: &'a SamplingDistribution,
        compositor: Compositor,
    },
    /// The variant augments single images instead of pairing two.
    Unpaired(Augmentation),
}

pub fn make_pair_sources<'a>(
    variant: MixVariant,
    p: &'a SamplingDistribution,
    q: &'a SamplingDistribution,
) -> PairSources<'a> {
    let paired = |background, foreground, compositor| PairSources::Paired {
        background,
        foreground,
        compositor,
    };
    match variant {
        MixVariant::Cmo => paired(p, q, Compositor::Cutmix),
        MixVariant::CmoBack => paired(q, p, Compositor::Cutmix),
        MixVariant::CmoMinor => paired(q, q, Compositor::Cutmix),
        MixVariant::CutmixPlain => paired(p, p, Compositor::Cutmix),
        MixVariant::MixupQ => paired(p, q, Compositor::Mixup),
        MixVariant::BlurOversample => PairSources::Unpaired(Augmentation::Blur),
        MixVariant::JitterOversample => PairSources::Unpaired(Augmentation::Jitter),
    }
}
