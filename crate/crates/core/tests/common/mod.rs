#![allow(dead_code)]

use cmo_core::corpus::{Dataset, Image, ImageShape, LabeledImage};
use cmo_core::rng::seeded;
use rand::Rng;

pub fn random_image<R: Rng>(shape: ImageShape, rng: &mut R) -> Image {
    Image::new(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Balanced toy set whose classes differ in the mean intensity of one
/// channel, so a linear model separates them.
pub fn separable_toy(classes: usize, per_class: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let shape = ImageShape::new(4, 4, classes).unwrap();
    let mut images = Vec::new();
    for k in 0..classes {
        for _ in 0..per_class {
            let data = (0..shape.len())
                .map(|i| {
                    let base = if i % classes == k { 0.8 } else { 0.2 };
                    base + 0.1 * (rng.random::<f64>() - 0.5)
                })
                .collect();
            images.push(LabeledImage {
                image: Image::new(shape, data).unwrap(),
                label: k,
            });
        }
    }
    Dataset::new(shape, classes, images).unwrap()
}

/// Small imbalanced toy set with class counts `counts`.
pub fn imbalanced_toy(counts: &[usize], seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let classes = counts.len();
    let shape = ImageShape::new(6, 6, 3).unwrap();
    let mut images = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let data = (0..shape.len())
                .map(|i| {
                    let base = if (i / 3) % classes == k { 0.7 } else { 0.3 };
                    (base + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)
                })
                .collect();
            images.push(LabeledImage {
                image: Image::new(shape, data).unwrap(),
                label: k,
            });
        }
    }
    Dataset::new(shape, classes, images).unwrap()
}
