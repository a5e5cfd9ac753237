//! Long-tailed datasets: class histograms, imbalance profiles, subsampling,
//! shot groups, the synthetic context-shift corpus and on-disk storage.

mod io;
mod synth;

pub use io::{content_hash, decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use synth::{glyph_mask, synth_context_shift, ContextShiftData, ContextShiftSpec, ImageMeta, Split};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of `(x, y, c)` in the row-major `H x W x Ch` buffer.
    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

/// Pixel buffer with values in `[0, 1]`, stored row-major with interleaved
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {shape}", shape.len()),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { shape, data })
    }

    /// Builds an image from values the caller guarantees are in range.
    pub(crate) fn from_raw(shape: ImageShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn filled(shape: ImageShape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.shape.index(x, y, c)]
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: other.shape.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

/// Per-class sample counts. Every class holds at least one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassHistogram {
    counts: Vec<usize>,
}

impl TryFrom<Vec<usize>> for ClassHistogram {
    type Error = Error;

    fn try_from(counts: Vec<usize>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<ClassHistogram> for Vec<usize> {
    fn from(h: ClassHistogram) -> Self {
        h.counts
    }
}

impl ClassHistogram {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {k} has no samples")));
        }
        Ok(Self { counts })
    }

    pub fn from_labels(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_classes];
        for label in labels {
            if label >= num_classes {
                return Err(Error::invalid(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            counts[label] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn max(&self) -> usize {
        *self.counts.iter().max().expect("at least two classes")
    }

    pub fn min(&self) -> usize {
        *self.counts.iter().min().expect("at least two classes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub n_max: usize,
    pub rho: f64,
    #[serde(default)]
    pub profile: Profile,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !self.rho.is_finite() || self.rho < 1.0 {
            return Err(Error::invalid(format!(
                "imbalance ratio must be >= 1, got {}",
                self.rho
            )));
        }
        if (self.n_max as f64) < self.rho {
            return Err(Error::invalid(format!(
                "n_max {} is smaller than the imbalance ratio {}",
                self.n_max, self.rho
            )));
        }
        Ok(())
    }
}

/// Exponential long-tail profile `n_k = round(n_max * rho^(-k/(C-1)))`,
/// clamped to at least one sample per class.
pub fn build_longtail_profile(spec: &LongTailSpec) -> Result<ClassHistogram> {
    spec.validate()?;
    let last = (spec.num_classes - 1) as f64;
    let counts = (0..spec.num_classes)
        .map(|k| {
            let n = spec.n_max as f64 * spec.rho.powf(-(k as f64) / last);
            (n.round() as usize).max(1)
        })
        .collect();
    ClassHistogram::new(counts)
}

pub fn imbalance_ratio(hist: &ClassHistogram) -> f64 {
    hist.max() as f64 / hist.min() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotThresholds {
    /// Classes with strictly more training samples are "many-shot".
    pub many: usize,
    /// Classes with strictly fewer training samples are "few-shot".
    pub few: usize,
}

impl ShotThresholds {
    /// The full-scale convention: many > 100, few < 20.
    pub const FULL_SCALE: ShotThresholds = ShotThresholds { many: 100, few: 20 };

    /// Scales the full-scale thresholds by `n_max / 500`, the largest class
    /// size of the reference long-tailed corpus.
    pub fn scaled_for(n_max: usize) -> Self {
        let scale = n_max as f64 / 500.0;
        let many = ((Self::FULL_SCALE.many as f64 * scale).round() as usize).max(2);
        let few = ((Self::FULL_SCALE.few as f64 * scale).round() as usize).clamp(1, many - 1);
        Self { many, few }
    }

    pub fn validate(&self) -> Result<()> {
        if self.few >= self.many {
            return Err(Error::invalid(format!(
                "few-shot threshold {} must be below many-shot threshold {}",
                self.few, self.many
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotGroups {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl ShotGroups {
    pub fn num_classes(&self) -> usize {
        self.many.len() + self.medium.len() + self.few.len()
    }

    pub fn is_many(&self, class: usize) -> bool {
        self.many.contains(&class)
    }
}

pub fn shot_groups(hist: &ClassHistogram, thresholds: ShotThresholds) -> Result<ShotGroups> {
    thresholds.validate()?;
    let mut groups = ShotGroups {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
    };
    for (k, &n) in hist.counts().iter().enumerate() {
        if n > thresholds.many {
            groups.many.push(k);
        } else if n < thresholds.few {
            groups.few.push(k);
        } else {
            groups.medium.push(k);
        }
    }
    Ok(groups)
}

/// Immutable labelled image collection whose histogram always matches its
/// labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: ImageShape,
    images: Vec<LabeledImage>,
    histogram: ClassHistogram,
}

impl Dataset {
    pub fn new(shape: ImageShape, num_classes: usize, images: Vec<LabeledImage>) -> Result<Self> {
        for (i, item) in images.iter().enumerate() {
            if item.image.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.to_string(),
                    actual: format!("{} at image {i}", item.image.shape()),
                });
            }
        }
        let histogram = ClassHistogram::from_labels(images.iter().map(|i| i.label), num_classes)?;
        Ok(Self {
            shape,
            images,
            histogram,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.histogram.num_classes()
    }

    pub fn histogram(&self) -> &ClassHistogram {
        &self.histogram
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &LabeledImage {
        &self.images[i]
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.images.iter().map(|i| i.label)
    }

    /// Indices of the samples of every class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, item) in self.images.iter().enumerate() {
            by_class[item.label].push(i);
        }
        by_class
    }

    /// New dataset made of the given source indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        Self::new(self.shape, self.num_classes(), images)
    }
}

/// Draws `hist[k]` samples of every class uniformly without replacement.
/// The output keeps the source order.
pub fn subsample_longtail<R: Rng + ?Sized>(
    source: &Dataset,
    hist: &ClassHistogram,
    rng: &mut R,
) -> Result<Dataset> {
    source.select(&subsample_indices(source, hist, rng)?)
}

/// Sorted source indices selected by [`subsample_longtail`].
pub fn subsample_indices<R: Rng + ?Sized>(
    source: &Dataset,
    hist: &ClassHistogram,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if hist.num_classes() != source.num_classes() {
        return Err(Error::invalid(format!(
            "histogram has {} classes, dataset has {}",
            hist.num_classes(),
            source.num_classes()
        )));
    }
    let mut chosen = Vec::with_capacity(hist.total());
    for (k, members) in source.class_indices().into_iter().enumerate() {
        let needed = hist.count(k);
        if members.len() < needed {
            return Err(Error::InsufficientSamples {
                class: k,
                needed,
                available: members.len(),
            });
        }
        chosen.extend(index::sample(rng, members.len(), needed).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    Ok(chosen)
}
