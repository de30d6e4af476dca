//! Synthetic "blobs" corpus: one fixed template per class plus Gaussian noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    /// Square image side.
    pub size: usize,
    /// Seeds the class templates; independent of the sampling seed.
    pub template_seed: u64,
    /// Pixel noise standard deviation.
    pub sigma: f32,
    /// Peak height of the class-specific bumps over the shared background.
    #[serde(default = "default_contrast")]
    pub contrast: f32,
    /// Gaussian bumps per class template.
    #[serde(default = "default_bumps")]
    pub bumps: usize,
}

fn default_contrast() -> f32 {
    0.3
}

fn default_bumps() -> usize {
    3
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 3,
            per_class: 10,
            channels: 1,
            size: 16,
            template_seed: 0,
            sigma: 0.05,
            contrast: default_contrast(),
            bumps: default_bumps(),
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("blobs need at least two classes"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.per_class == 0 || self.channels == 0 || self.size == 0 || self.bumps == 0 {
            return Err(Error::invalid("blob counts and sizes must be positive"));
        }
        Ok(())
    }

    /// The noiseless template of every class, `[C, Ch, S, S]`.
    pub fn templates(&self) -> Result<Tensor> {
        self.validate()?;
        let (ch, s) = (self.channels, self.size);
        let plane = s * s;
        // shared low-frequency background
        let mut bg_rng = rng::derive(self.template_seed, "blob-background", 0);
        let waves: Vec<(f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    bg_rng.random_range(0.5..2.0),
                    bg_rng.random_range(0.5..2.0),
                    bg_rng.random_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        let mut background = vec![0f32; ch * plane];
        for c in 0..ch {
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = (x as f32 / s as f32, y as f32 / s as f32);
                    let w: f32 = waves
                        .iter()
                        .map(|&(fx, fy, ph)| {
                            (std::f32::consts::TAU * (fx * u + fy * v) + ph + c as f32).sin()
                        })
                        .sum::<f32>()
                        / waves.len() as f32;
                    background[c * plane + y * s + x] = 0.4 + 0.1 * w;
                }
            }
        }
        let mut out = Vec::with_capacity(self.classes * ch * plane);
        let width = s as f32 / 6.0;
        for class in 0..self.classes {
            let mut r = rng::derive(self.template_seed, "blob-template", class as u64);
            let mut t = background.clone();
            for _ in 0..self.bumps {
                let cy = r.random_range(0.0..s as f32);
                let cx = r.random_range(0.0..s as f32);
                let sign = if r.random_bool(0.75) { 1.0 } else { -1.0 };
                let chan = r.random_range(0..ch);
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        t[chan * plane + y * s + x] +=
                            sign * self.contrast * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
            out.extend(t.into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Tensor::new(vec![self.classes, ch, s, s], out)
    }
}

/// Draws `per_class` examples of each class (class-major order). Pixels are
/// `template + N(0, sigma^2)` clipped to `[0, 1]`.
pub fn make_blobs(spec: &BlobSpec, seed: u64) -> Result<LabeledDataset> {
    let templates = spec.templates()?;
    let per = templates.numel() / spec.classes;
    let mut noise_rng = rng::derive(seed, rng::stream::NOISE, 0);
    let normal = Normal::new(0.0f32, spec.sigma.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * per);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let t = &templates.data()[c * per..(c + 1) * per];
        for _ in 0..spec.per_class {
            if spec.sigma == 0.0 {
                data.extend_from_slice(t);
            } else {
                data.extend(
                    t.iter()
                        .map(|&v| (v + normal.sample(&mut noise_rng)).clamp(0.0, 1.0)),
                );
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(
        vec![spec.classes * spec.per_class, spec.channels, spec.size, spec.size],
        data,
    )?;
    LabeledDataset::new(images, labels, spec.classes)
}
