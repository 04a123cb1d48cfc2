//! Labelled item lists, CSV ingestion, MOS normalization and group splits.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::Distortion;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["id", "path", "mos", "ref_group"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSource {
    File(PathBuf),
    Synthetic {
        base: usize,
        distortion: Distortion,
        severity: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub source: ItemSource,
    /// Raw label as given.
    pub mos: f64,
    pub ref_group: String,
}

/// Items plus the affine map that sends the smallest MOS to 0 and the
/// largest to 1. Sub-manifests from [`split`] keep their parent's map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<DatasetItem>,
    pub mos_min: f64,
    pub mos_max: f64,
}

impl DatasetManifest {
    pub fn from_items(items: Vec<DatasetItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("manifest"));
        }
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::Validation(format!("duplicate item id {:?}", item.id)));
            }
            if !item.mos.is_finite() {
                return Err(Error::Validation(format!("item {:?} has non-finite MOS", item.id)));
            }
        }
        let mos_min = items.iter().map(|i| i.mos).fold(f64::INFINITY, f64::min);
        let mos_max = items.iter().map(|i| i.mos).fold(f64::NEG_INFINITY, f64::max);
        Ok(DatasetManifest { items, mos_min, mos_max })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Degenerate ranges (one item, or all labels equal) map to 0.5.
    pub fn normalize(&self, mos: f64) -> f64 {
        if self.mos_max > self.mos_min {
            (mos - self.mos_min) / (self.mos_max - self.mos_min)
        } else {
            0.5
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        if self.mos_max > self.mos_min {
            self.mos_min + v * (self.mos_max - self.mos_min)
        } else {
            self.mos_min
        }
    }

    pub fn normalized_mos(&self) -> Vec<f64> {
        self.items.iter().map(|i| self.normalize(i.mos)).collect()
    }

    /// Keeps the listed items (in the given order) and this manifest's
    /// normalization.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            mos_min: self.mos_min,
            mos_max: self.mos_max,
        }
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.ref_group.as_str()).collect()
    }

    /// CSV with header `id,path,mos,ref_group`. Synthetic items are written
    /// with the path `{id}.ppm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, e))?;
        for item in &self.items {
            let file = match &item.source {
                ItemSource::File(p) => p.display().to_string(),
                ItemSource::Synthetic { .. } => format!("{}.ppm", item.id),
            };
            w.write_record([item.id.as_str(), &file, &item.mos.to_string(), &item.ref_group])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Parses a manifest CSV. Relative image paths are kept as written; resolve
/// them against the manifest's directory when loading.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or(Error::Parse {
            line: 1,
            message: "empty manifest".into(),
        })?
        .map_err(|e| csv_error(path, e))?;
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, got {:?}", MANIFEST_HEADER.join(","), header),
        });
    }
    let mut items = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let mos: f64 = record[2].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("MOS {:?} is not a number", &record[2]),
        })?;
        if !mos.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("MOS {mos} is not finite"),
            });
        }
        items.push(DatasetItem {
            id: record[0].trim().to_string(),
            source: ItemSource::File(PathBuf::from(record[1].trim())),
            mos,
            ref_group: record[3].trim().to_string(),
        });
    }
    DatasetManifest::from_items(items)
}

/// Item indices of the train and test sides. Groups are shuffled from their
/// sorted order, and `round(ratio · groups)` of them (at least one on each
/// side) go to training.
pub fn split_indices(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut groups: Vec<&str> = manifest.groups().into_iter().collect();
    if groups.len() < 2 {
        return Err(Error::Validation(format!(
            "a split needs at least 2 reference groups, got {}",
            groups.len()
        )));
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * groups.len() as f64).round() as usize).clamp(1, groups.len() - 1);
    let train_groups: HashSet<&str> = groups[..n_train].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in manifest.items.iter().enumerate() {
        if train_groups.contains(item.ref_group.as_str()) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    Ok((train, test))
}

pub fn split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, test) = split_indices(manifest, ratio, seed)?;
    Ok((manifest.subset(&train), manifest.subset(&test)))
}
