use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RgbaGlyph;
use crate::error::{invalid, Result};
use crate::image::RgbaImage;
use crate::rng::{self, Rng};

/// Magnitudes for style-reference degradation. The defaults are working
/// values chosen for 32px glyphs, not calibrated constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub blur_sigma_range: [f32; 2],
    pub downsample_factors: Vec<usize>,
    pub noise_std_range: [f32; 2],
    /// An empty palette disables background replacement.
    pub background_palette: Vec<[f32; 3]>,
    /// Independent probability with which each of the four operations fires.
    pub per_op_probability: f32,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.3, 1.2],
            downsample_factors: vec![2],
            noise_std_range: [0.01, 0.05],
            background_palette: vec![[1.0, 1.0, 1.0], [0.9, 0.9, 0.8], [0.2, 0.2, 0.25]],
            per_op_probability: 0.25,
        }
    }
}

impl PerturbationConfig {
    /// Every operation disabled.
    pub fn identity() -> Self {
        Self {
            per_op_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: &[f32; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !range_ok(&self.blur_sigma_range) || !range_ok(&self.noise_std_range) {
            return Err(invalid("perturbation ranges must satisfy 0 <= lo <= hi"));
        }
        if self.downsample_factors.is_empty() || self.downsample_factors.contains(&0) {
            return Err(invalid("downsample factors must be a non-empty list of integers >= 1"));
        }
        if self
            .background_palette
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(invalid("background palette must hold RGB triples in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.per_op_probability) {
            return Err(invalid("per_op_probability must lie in [0,1]"));
        }
        Ok(())
    }
}

fn sample_range(r: &mut Rng, range: [f32; 2]) -> f32 {
    if range[0] == range[1] {
        range[0]
    } else {
        r.random_range(range[0]..=range[1])
    }
}

/// Apply blur, down-sampling, additive noise and background replacement,
/// each independently with `per_op_probability`, in that order.
pub fn perturb_style_refs(
    images: &[RgbaGlyph],
    config: &PerturbationConfig,
    rng_seed: u64,
) -> Result<Vec<RgbaGlyph>> {
    if images.is_empty() {
        return Err(invalid("no images to perturb"));
    }
    config.validate()?;
    let p = f64::from(config.per_op_probability);
    images
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut r = rng::derived(rng_seed, i as u64);
            let mut px = g.pixels.clone();
            if p > 0.0 && r.random_bool(p) {
                let sigma = sample_range(&mut r, config.blur_sigma_range);
                px = gaussian_blur(&px, sigma);
            }
            if p > 0.0 && r.random_bool(p) {
                let f = config.downsample_factors[r.random_range(0..config.downsample_factors.len())];
                px = downsample(&px, f);
            }
            if p > 0.0 && r.random_bool(p) {
                let std = sample_range(&mut r, config.noise_std_range);
                add_noise(&mut px, std, &mut r);
            }
            if p > 0.0 && r.random_bool(p) && !config.background_palette.is_empty() {
                let bg = config.background_palette[r.random_range(0..config.background_palette.len())];
                replace_background(&mut px, bg);
            }
            px.clamp01();
            Ok(RgbaGlyph {
                pixels: px,
                ..g.clone()
            })
        })
        .collect()
}

pub(crate) fn gaussian_blur(img: &RgbaImage, sigma: f32) -> RgbaImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|k| (-(k * k) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k / norm).collect();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let pass = |src: &RgbaImage, horizontal: bool| {
        let mut out = RgbaImage::new(src.width(), src.height());
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 4];
                for (ki, k) in kernel.iter().enumerate() {
                    let o = ki as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    let p = src.pixel(sx as usize, sy as usize);
                    for c in 0..4 {
                        acc[c] += k * p[c];
                    }
                }
                out.set_pixel(x as usize, y as usize, acc);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Box-average down by `factor`, then nearest-neighbour back up.
fn downsample(img: &RgbaImage, factor: usize) -> RgbaImage {
    if factor <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let mut out = RgbaImage::new(w, h);
    for by in (0..h).step_by(factor) {
        for bx in (0..w).step_by(factor) {
            let mut acc = [0.0f32; 4];
            let mut n = 0.0;
            for y in by..(by + factor).min(h) {
                for x in bx..(bx + factor).min(w) {
                    let p = img.pixel(x, y);
                    for c in 0..4 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            let mean = acc.map(|v| v / n);
            for y in by..(by + factor).min(h) {
                for x in bx..(bx + factor).min(w) {
                    out.set_pixel(x, y, mean);
                }
            }
        }
    }
    out
}

fn add_noise(img: &mut RgbaImage, std: f32, r: &mut Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0f32, std).expect("std is positive and finite");
    for px in img.data_mut().chunks_exact_mut(4) {
        for v in &mut px[..3] {
            *v += normal.sample(r);
        }
    }
}

/// Composite the glyph over an opaque colour; the result is fully opaque.
fn replace_background(img: &mut RgbaImage, bg: [f32; 3]) {
    for px in img.data_mut().chunks_exact_mut(4) {
        let a = px[3];
        for c in 0..3 {
            px[c] = a * px[c] + (1.0 - a) * bg[c];
        }
        px[3] = 1.0;
    }
}
