//! Single-image pixel augmentations used by the blur/jitter oversampling
//! baselines. Parameter semantics follow torchvision's `GaussianBlur` and
//! `ColorJitter`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSize {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub kernel: KernelSize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for BlurParams {
    fn default() -> Self {
        Self {
            kernel: KernelSize { width: 5, height: 7 },
            sigma_min: 0.1,
            sigma_max: 5.0,
        }
    }
}

impl BlurParams {
    /// Blurs with `sigma ~ U[sigma_min, sigma_max]`.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        if !(self.sigma_min >= 0.0 && self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "bad sigma range [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        let sigma = if self.sigma_max > self.sigma_min {
            rng.random_range(self.sigma_min..=self.sigma_max)
        } else {
            self.sigma_min
        };
        gaussian_blur(image, self.kernel, sigma)
    }
}

fn kernel_1d(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel size {size} must be odd")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = (i as f64 - half) / sigma;
            (-0.5 * x * x).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Image, kernel: KernelSize, sigma: f64) -> Result<Image> {
    let kx = kernel_1d(kernel.width, sigma)?;
    let ky = kernel_1d(kernel.height, sigma)?;
    let shape = image.shape();
    let (w, h, ch) = (shape.width as i64, shape.height as i64, shape.channels);
    let src = image.data();

    let mut tmp = vec![0.0; src.len()];
    let rx = (kx.len() / 2) as i64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, wgt) in kx.iter().enumerate() {
                    let sx = (x + i as i64 - rx).clamp(0, w - 1);
                    acc += wgt * src[shape.index(sx as usize, y as usize, c)];
                }
                tmp[shape.index(x as usize, y as usize, c)] = acc;
            }
        }
    }

    let mut out = vec![0.0; src.len()];
    let ry = (ky.len() / 2) as i64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, wgt) in ky.iter().enumerate() {
                    let sy = (y + i as i64 - ry).clamp(0, h - 1);
                    acc += wgt * tmp[shape.index(x as usize, sy as usize, c)];
                }
                out[shape.index(x as usize, y as usize, c)] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::from_raw(shape, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    /// Brightness factor is drawn from `[max(0, 1 - b), 1 + b]`.
    pub brightness: f64,
    /// Hue shift is drawn from `[-hue, hue]`, in fractions of a full turn.
    pub hue: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            hue: 0.3,
        }
    }
}

impl JitterParams {
    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        if !(self.brightness >= 0.0 && (0.0..=0.5).contains(&self.hue)) {
            return Err(Error::invalid(format!(
                "jitter needs brightness >= 0 and hue in [0, 0.5], got {} / {}",
                self.brightness, self.hue
            )));
        }
        let lo = (1.0 - self.brightness).max(0.0);
        let factor = if self.brightness > 0.0 {
            rng.random_range(lo..=1.0 + self.brightness)
        } else {
            1.0
        };
        let shift = if self.hue > 0.0 {
            rng.random_range(-self.hue..=self.hue)
        } else {
            0.0
        };
        color_jitter(image, factor, shift)
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
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

/// Scales every channel by `brightness`, then rotates hue by `hue_shift`
/// turns. Hue is only defined for 3-channel images and is left alone
/// otherwise.
pub fn color_jitter(image: &Image, brightness: f64, hue_shift: f64) -> Result<Image> {
    if !(brightness.is_finite() && brightness >= 0.0 && hue_shift.is_finite()) {
        return Err(Error::invalid(format!(
            "bad jitter factors: brightness {brightness}, hue {hue_shift}"
        )));
    }
    let shape = image.shape();
    let mut data: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| (v * brightness).clamp(0.0, 1.0))
        .collect();
    if shape.channels == 3 && hue_shift != 0.0 {
        for px in data.chunks_exact_mut(3) {
            let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
            let rgb = hsv_to_rgb([h + hue_shift, s, v]);
            for (dst, src) in px.iter_mut().zip(rgb) {
                *dst = src.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::from_raw(shape, data))
}
