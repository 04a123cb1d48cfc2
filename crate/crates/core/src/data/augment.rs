//! Random crops and horizontal flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

fn check_crop(image: &Image, size: usize) -> Result<()> {
    if size == 0 || size > image.height() || size > image.width() {
        return Err(Error::Validation(format!(
            "crop of {size} does not fit a {}x{} image",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Uniform crop position; flips with probability `flip_prob`.
pub fn sample_crop<R: Rng + ?Sized>(image: &Image, size: usize, flip_prob: f64, rng: &mut R) -> Result<CropSpec> {
    check_crop(image, size)?;
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Config(format!("flip probability must lie in [0, 1], got {flip_prob}")));
    }
    let top = rng.random_range(0..=image.height() - size);
    let left = rng.random_range(0..=image.width() - size);
    let flip = rng.random::<f64>() < flip_prob;
    Ok(CropSpec { top, left, size, flip })
}

pub fn apply_crop(image: &Image, spec: &CropSpec) -> Result<Image> {
    check_crop(image, spec.size)?;
    if spec.top + spec.size > image.height() || spec.left + spec.size > image.width() {
        return Err(Error::Validation(format!("crop {spec:?} leaves the image")));
    }
    let s = spec.size;
    let mut out = Image::filled(s, s, 0.0);
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let sx = if spec.flip { s - 1 - x } else { x };
                *out.at_mut(c, y, x) = image.at(c, spec.top + y, spec.left + sx);
            }
        }
    }
    Ok(out)
}

pub fn flip_horizontal(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(c, y, x) = image.at(c, y, w - 1 - x);
            }
        }
    }
    out
}

/// Training view: one random crop, flipped with probability `flip_prob`.
pub fn augment(image: &Image, crop_size: usize, flip_prob: f64, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_crop(image, &sample_crop(image, crop_size, flip_prob, &mut rng)?)
}

pub fn multi_crop_specs(image: &Image, n: usize, crop_size: usize, seed: u64) -> Result<Vec<CropSpec>> {
    if n == 0 {
        return Err(Error::Config("multi-crop needs at least one crop".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_crop(image, crop_size, 0.0, &mut rng)).collect()
}

/// `n` independent unflipped crops for test-time averaging.
pub fn multi_crop(image: &Image, n: usize, crop_size: usize, seed: u64) -> Result<Vec<Image>> {
    multi_crop_specs(image, n, crop_size, seed)?
        .iter()
        .map(|spec| apply_crop(image, spec))
        .collect()
}
