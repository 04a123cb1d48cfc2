//! Images, labelled manifests, synthetic distortion datasets and
//! augmentation.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod synth;

use std::path::Path;

pub use self::augment::{augment, multi_crop, CropSpec};
pub use self::image::Image;
pub use self::manifest::{load_manifest, split, split_indices, DatasetItem, DatasetManifest, ItemSource};
pub use self::synth::{export_dataset, synth_generate, Distortion, SynthConfig};

use crate::error::{Error, Result};

/// A manifest with its decoded images, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::dim("dataset", &[manifest.len()], &[images.len()]));
        }
        Ok(Dataset { manifest, images })
    }

    /// Reads a manifest CSV and every image it lists; relative paths are
    /// resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let images = manifest
            .items
            .iter()
            .map(|item| match &item.source {
                ItemSource::File(p) => Image::load(&dir.join(p)),
                ItemSource::Synthetic { .. } => Err(Error::Validation(format!(
                    "item {:?} has no file to load",
                    item.id
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(manifest, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: self.manifest.subset(indices),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Train and test sides of a group split.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = split_indices(&self.manifest, ratio, seed)?;
        Ok((self.subset(&train), self.subset(&test)))
    }
}
