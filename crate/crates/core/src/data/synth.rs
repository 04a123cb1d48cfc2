//! Procedural reference images and parametric distortions with known
//! quality labels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::manifest::{DatasetItem, DatasetManifest, ItemSource};
use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    GaussianBlur,
    AdditiveNoise,
    ContrastReduction,
    BlockArtifact,
}

impl Distortion {
    pub const ALL: [Distortion; 4] = [
        Distortion::GaussianBlur,
        Distortion::AdditiveNoise,
        Distortion::ContrastReduction,
        Distortion::BlockArtifact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distortion::GaussianBlur => "gaussian_blur",
            Distortion::AdditiveNoise => "additive_noise",
            Distortion::ContrastReduction => "contrast_reduction",
            Distortion::BlockArtifact => "block_artifact",
        }
    }

    /// Applies the distortion at `severity ∈ [0, 1]`; the result is clamped to
    /// `[0, 1]`. Only additive noise draws from `rng`.
    pub fn apply<R: Rng + ?Sized>(self, image: &Image, severity: f64, rng: &mut R) -> Image {
        let mut out = match self {
            Distortion::GaussianBlur => gaussian_blur(image, 3.0 * severity),
            Distortion::AdditiveNoise => {
                let mut out = image.clone();
                if severity > 0.0 {
                    let normal = Normal::new(0.0, 0.3 * severity).expect("positive std");
                    out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
                }
                out
            }
            Distortion::ContrastReduction => {
                let mut out = image.clone();
                out.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.5 + (1.0 - severity) * (*v - 0.5));
                out
            }
            Distortion::BlockArtifact => block_artifact(image, severity),
        };
        out.clamp_unit();
        out
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion {s:?}")))
    }
}

/// Separable Gaussian with radius `⌈3σ⌉` and clamped borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma < 1e-6 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (image.height(), image.width());
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::filled(h, w, 0.0);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                *tmp.at_mut(c, y, x) = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * image.at(c, y, clamp(x as isize + k as isize - radius, w)))
                    .sum();
            }
        }
    }
    let mut out = Image::filled(h, w, 0.0);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(c, y, x) = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp.at(c, clamp(y as isize + k as isize - radius, h), x))
                    .sum();
            }
        }
    }
    out
}

pub const BLOCK_SIZE: usize = 8;
const BLOCK_LEVELS: f64 = 8.0;

/// Blends each pixel toward its 8×8 block mean quantized to 8 levels.
pub fn block_artifact(image: &Image, severity: f64) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..3 {
        for by in (0..h).step_by(BLOCK_SIZE) {
            for bx in (0..w).step_by(BLOCK_SIZE) {
                let ys = by..(by + BLOCK_SIZE).min(h);
                let xs = bx..(bx + BLOCK_SIZE).min(w);
                let n = (ys.len() * xs.len()) as f64;
                let mean = ys
                    .clone()
                    .flat_map(|y| xs.clone().map(move |x| (y, x)))
                    .map(|(y, x)| image.at(c, y, x))
                    .sum::<f64>()
                    / n;
                let q = ((mean * (BLOCK_LEVELS - 1.0)).round() / (BLOCK_LEVELS - 1.0)).clamp(0.0, 1.0);
                for y in ys.clone() {
                    for x in xs.clone() {
                        let v = out.at_mut(c, y, x);
                        *v = (1.0 - severity) * *v + severity * q;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_refs: usize,
    pub distortions_per_ref: usize,
    pub image_size: usize,
    pub seed: u64,
    pub distortions: Vec<Distortion>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_refs: 8,
            distortions_per_ref: 12,
            image_size: 40,
            seed: 0,
            distortions: Distortion::ALL.to_vec(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_refs == 0 || self.distortions_per_ref == 0 {
            return Err(Error::Config("synthetic dataset needs at least one reference and one distortion per reference".into()));
        }
        if self.image_size < BLOCK_SIZE {
            return Err(Error::Config(format!("synthetic image size must be at least {BLOCK_SIZE}")));
        }
        if self.distortions.is_empty() {
            return Err(Error::Config("at least one distortion type must be enabled".into()));
        }
        Ok(())
    }
}

/// Bilinear upsampling of a random `cells × cells` grid per channel.
fn noise_field<R: Rng + ?Sized>(size: usize, cells: usize, rng: &mut R) -> Image {
    let grid: Vec<f64> = (0..3 * (cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let mut out = Image::filled(size, size, 0.0);
    let g = |c: usize, i: usize, j: usize| grid[(c * (cells + 1) + i) * (cells + 1) + j];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let fy = y as f64 / size as f64 * cells as f64;
                let fx = x as f64 / size as f64 * cells as f64;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                *out.at_mut(c, y, x) = (1.0 - ty) * ((1.0 - tx) * g(c, iy, ix) + tx * g(c, iy, ix + 1))
                    + ty * ((1.0 - tx) * g(c, iy + 1, ix) + tx * g(c, iy + 1, ix + 1));
            }
        }
    }
    out
}

/// Each component of a reference is standardized before mixing, so
/// references differ in content but share their texture statistics.
const CHECKER_CELL: usize = 4;
const MIX: [f64; 4] = [0.5, 1.0, 0.5, 1.0];

/// A textured reference: smooth and mid-frequency noise fields, a colour
/// gradient and a checkerboard with random colours, orientation and phase,
/// brought to a common per-channel mean and contrast.
pub fn base_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Image {
    let mut smooth = noise_field(size, 2, rng);
    let mut detail = noise_field(size, (size / 4).max(2), rng);
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (dy, dx) = (angle.sin(), angle.cos());
    let lo: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let hi: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let dark: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let light: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let (oy, ox) = (rng.random_range(0..CHECKER_CELL), rng.random_range(0..CHECKER_CELL));

    let span = size as f64;
    let mut gradient = Image::filled(size, size, 0.0);
    let mut checker = Image::filled(size, size, 0.0);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let t = (((y as f64 - span / 2.0) * dy + (x as f64 - span / 2.0) * dx) / span + 0.5).clamp(0.0, 1.0);
                *gradient.at_mut(c, y, x) = lo[c] + t * (hi[c] - lo[c]);
                let even = ((y + oy) / CHECKER_CELL + (x + ox) / CHECKER_CELL).is_multiple_of(2);
                *checker.at_mut(c, y, x) = if even { dark[c] } else { light[c] };
            }
        }
    }
    let mut out = Image::filled(size, size, 0.0);
    for (part, weight) in [&mut smooth, &mut detail, &mut gradient, &mut checker].into_iter().zip(MIX) {
        standardize_channels(part, 0.0, 1.0);
        out.data_mut().iter_mut().zip(part.data()).for_each(|(o, v)| *o += weight * v);
    }
    standardize_channels(&mut out, BASE_MEAN, BASE_STD);
    out.clamp_unit();
    out
}

pub const BASE_MEAN: f64 = 0.5;
pub const BASE_STD: f64 = 0.2;

/// Affinely sets the mean and standard deviation of every channel. Constant
/// channels become `mean`.
fn standardize_channels(image: &mut Image, mean: f64, std: f64) {
    let plane = image.height() * image.width();
    for ch in image.data_mut().chunks_mut(plane) {
        let n = ch.len() as f64;
        let m = ch.iter().sum::<f64>() / n;
        let s = (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        let gain = if s > 1e-12 { std / s } else { 0.0 };
        ch.iter_mut().for_each(|v| *v = mean + gain * (*v - m));
    }
}

pub const MOS_JITTER: f64 = 0.02;

/// `1 − severity + η`, `η ~ U[−0.02, 0.02]`, clamped to `[0, 1]`.
pub fn synthetic_mos<R: Rng + ?Sized>(severity: f64, rng: &mut R) -> f64 {
    (1.0 - severity + rng.random_range(-MOS_JITTER..=MOS_JITTER)).clamp(0.0, 1.0)
}

/// Builds `num_refs` references, each distorted `distortions_per_ref` times.
/// Distortion types rotate per item; severities are stratified over
/// `[0, 1]` with uniform jitter inside each stratum. Single-threaded and
/// fully determined by the seed.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per = config.distortions_per_ref;
    let mut items = Vec::with_capacity(config.num_refs * per);
    let mut images = Vec::with_capacity(config.num_refs * per);
    for r in 0..config.num_refs {
        let base = base_image(config.image_size, &mut rng);
        let mut strata: Vec<usize> = (0..per).collect();
        rand::seq::SliceRandom::shuffle(strata.as_mut_slice(), &mut rng);
        for (j, &stratum) in strata.iter().enumerate() {
            let distortion = config.distortions[(j + r) % config.distortions.len()];
            let severity = ((stratum as f64 + rng.random::<f64>()) / per as f64).min(1.0);
            let image = distortion.apply(&base, severity, &mut rng);
            let mos = synthetic_mos(severity, &mut rng);
            items.push(DatasetItem {
                id: format!("ref{r:03}_{j:03}_{distortion}"),
                source: ItemSource::Synthetic {
                    base: r,
                    distortion,
                    severity,
                },
                mos,
                ref_group: format!("ref{r:03}"),
            });
            images.push(image);
        }
    }
    Dataset::new(DatasetManifest::from_items(items)?, images)
}

/// Writes one PPM per item plus `manifest.csv` into `dir`.
pub fn export_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (item, image) in data.manifest.items.iter().zip(&data.images) {
        image.save_ppm(&dir.join(format!("{}.ppm", item.id)))?;
    }
    data.manifest.write_csv(&dir.join("manifest.csv"))
}
