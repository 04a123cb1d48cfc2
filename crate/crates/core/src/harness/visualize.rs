use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use serde::Serialize;

use super::evaluate::ModelPredictor;
use crate::data::augment::{apply_crop, CropSpec};
use crate::data::Image;
use crate::error::{Error, Result};

pub const WEIGHT_MAP: &str = "weight_map.pgm";
pub const SCORE_MAP: &str = "score_map.pgm";
pub const FINAL_MAP: &str = "final_map.pgm";
pub const SIDECAR: &str = "maps.json";

/// Raw per-patch values, row-major over the `h × w` patch grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchMaps {
    pub h: usize,
    pub w: usize,
    pub score: f64,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
    /// `wᵢ · sᵢ`
    pub weighted: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapFiles {
    pub weight: PathBuf,
    pub score: PathBuf,
    pub weighted: PathBuf,
    pub sidecar: PathBuf,
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(values: &[f64], h: usize, w: usize) -> Result<GrayImage> {
    if values.len() != h * w {
        return Err(Error::dim("map", &[values.len()], &[h, w]));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize];
        let g = if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 };
        image::Luma([g.round() as u8])
    }))
}

/// Binary `P5` graymap.
fn write_pgm(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let gray = to_gray(values, h, w)?;
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(gray.as_raw(), w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Centre crop at the model's input size.
pub fn center_crop(image: &Image, size: usize) -> Result<Image> {
    if image.height() < size || image.width() < size {
        return Err(Error::Validation(format!(
            "image {}x{} is smaller than the model input {size}",
            image.height(),
            image.width()
        )));
    }
    apply_crop(
        image,
        &CropSpec {
            top: (image.height() - size) / 2,
            left: (image.width() - size) / 2,
            size,
            flip: false,
        },
    )
}

pub fn patch_maps(predictor: &ModelPredictor, image: &Image) -> Result<PatchMaps> {
    let crop = center_crop(image, predictor.model.config.image_size)?;
    let p = predictor.patches(&crop)?;
    Ok(PatchMaps {
        h: p.h,
        w: p.w,
        score: p.score,
        weighted: p.weighted(),
        weights: p.weights,
        scores: p.scores,
    })
}

/// Writes the weight, score and weighted maps as PGM grids plus a JSON
/// sidecar with the raw values.
pub fn visualize(predictor: &ModelPredictor, image: &Image, out_dir: &Path) -> Result<(PatchMaps, MapFiles)> {
    let maps = patch_maps(predictor, image)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = MapFiles {
        weight: out_dir.join(WEIGHT_MAP),
        score: out_dir.join(SCORE_MAP),
        weighted: out_dir.join(FINAL_MAP),
        sidecar: out_dir.join(SIDECAR),
    };
    write_pgm(&maps.weights, maps.h, maps.w, &files.weight)?;
    write_pgm(&maps.scores, maps.h, maps.w, &files.score)?;
    write_pgm(&maps.weighted, maps.h, maps.w, &files.weighted)?;
    let json = serde_json::to_string_pretty(&maps)?;
    std::fs::write(&files.sidecar, json).map_err(|e| Error::io(&files.sidecar, e))?;
    Ok((maps, files))
}
