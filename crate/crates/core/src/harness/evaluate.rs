use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::data::{multi_crop, Dataset, DatasetItem, Image};
use crate::error::{Error, Result};
use crate::metrics::{plcc, srocc};
use crate::model::{Maniqa, PatchPrediction};
use crate::params::ParamStore;

/// Anything that scores a crop on the normalized `[0, 1]` MOS scale.
pub trait QualityPredictor: Sync {
    fn predict_crop(&self, item: &DatasetItem, crop: &Image) -> Result<f64>;
}

pub struct ModelPredictor {
    pub model: Maniqa,
    pub params: ParamStore,
}

impl ModelPredictor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(ModelPredictor {
            model: ck.model()?,
            params: ck.param_store()?,
        })
    }

    pub fn patches(&self, crop: &Image) -> Result<PatchPrediction> {
        self.model.predict_patches(&self.params, &crop.to_tensor())
    }
}

impl QualityPredictor for ModelPredictor {
    fn predict_crop(&self, _item: &DatasetItem, crop: &Image) -> Result<f64> {
        Ok(self.patches(crop)?.score)
    }
}

/// Seed for the test crops of item `index` under split seed `seed`.
pub fn crop_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(0x6372_6f70)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub test_items: usize,
    pub plcc: Option<f64>,
    pub srocc: Option<f64>,
    /// Why a correlation is undefined, when it is.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemPrediction {
    pub seed: u64,
    pub id: String,
    pub mos: f64,
    pub prediction: f64,
}

/// Per-seed and mean correlations with per-item predictions on the raw MOS
/// scale. The wall-clock duration is not serialized, so reports of
/// identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub config: TrainConfig,
    pub test_crops: usize,
    pub seeds: Vec<SeedMetrics>,
    pub mean_plcc: Option<f64>,
    pub mean_srocc: Option<f64>,
    pub items: Vec<ItemPrediction>,
    #[serde(skip)]
    pub duration_secs: f64,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Aligned text table: one row per seed and a mean row.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("{:<8} {:>6} {:>10} {:>10}\n", "seed", "items", "PLCC", "SROCC");
        for row in &self.seeds {
            s.push_str(&format!(
                "{:<8} {:>6} {:>10} {:>10}",
                row.seed,
                row.test_items,
                fmt(row.plcc),
                fmt(row.srocc)
            ));
            if let Some(e) = &row.error {
                s.push_str(&format!("  ({e})"));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "{:<8} {:>6} {:>10} {:>10}\n",
            "mean",
            "",
            fmt(self.mean_plcc),
            fmt(self.mean_srocc)
        ));
        s.push_str(&format!("test crops per item: {}\n", self.test_crops));
        s
    }
}

/// Mean of `test_crops` crop scores for every item, in item order.
pub fn predict_items<P: QualityPredictor>(
    config: &TrainConfig,
    test: &Dataset,
    predictor: &P,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            let crops = multi_crop(&test.images[i], config.test_crops, config.crop_size, crop_seed(seed, i))?;
            let scores = crops
                .iter()
                .map(|c| predictor.predict_crop(&test.manifest.items[i], c))
                .collect::<Result<Vec<_>>>()?;
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

/// Correlations on one held-out side.
pub fn evaluate_split<P: QualityPredictor>(
    config: &TrainConfig,
    test: &Dataset,
    predictor: &P,
    seed: u64,
) -> Result<(SeedMetrics, Vec<ItemPrediction>)> {
    let preds = predict_items(config, test, predictor, seed)?;
    if let Some(p) = preds.iter().find(|p| !p.is_finite()) {
        return Err(Error::Numeric {
            name: "prediction".into(),
            detail: format!("{p}"),
        });
    }
    let truth = test.manifest.normalized_mos();
    let mut row = SeedMetrics {
        seed,
        test_items: test.len(),
        plcc: None,
        srocc: None,
        error: None,
    };
    match (plcc(&truth, &preds), srocc(&truth, &preds)) {
        (Ok(p), Ok(s)) => {
            row.plcc = Some(p);
            row.srocc = Some(s);
        }
        (Err(e), _) | (_, Err(e)) => row.error = Some(e.to_string()),
    }
    let items = test
        .manifest
        .items
        .iter()
        .zip(&preds)
        .map(|(item, &p)| ItemPrediction {
            seed,
            id: item.id.clone(),
            mos: item.mos,
            prediction: test.manifest.denormalize(p),
        })
        .collect();
    Ok((row, items))
}

/// For each configured seed: split `data` by reference group, score the test
/// side with the predictor built for that seed, and correlate.
pub fn evaluate<P, F>(config: &TrainConfig, data: &Dataset, mut predictor_for: F) -> Result<MetricReport>
where
    P: QualityPredictor,
    F: FnMut(u64, &Dataset) -> Result<P>,
{
    config.validate()?;
    let start = Instant::now();
    let mut seeds = Vec::with_capacity(config.seeds.len());
    let mut items = Vec::new();
    for &seed in &config.seeds {
        let (train, test) = data.split(config.split_ratio, seed)?;
        let predictor = predictor_for(seed, &train)?;
        let (row, preds) = evaluate_split(config, &test, &predictor, seed)?;
        seeds.push(row);
        items.extend(preds);
    }
    Ok(MetricReport {
        config: config.clone(),
        test_crops: config.test_crops,
        mean_plcc: mean_of(seeds.iter().map(|r| r.plcc)),
        mean_srocc: mean_of(seeds.iter().map(|r| r.srocc)),
        seeds,
        items,
        duration_secs: start.elapsed().as_secs_f64(),
    })
}

/// Test-time score of one image: the mean of per-crop aggregated scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    /// Normalized scale.
    pub score: f64,
    pub crop_scores: Vec<f64>,
    /// Patch maps of the first crop.
    pub first_crop: PatchPrediction,
}

pub fn predict(predictor: &ModelPredictor, image: &Image, test_crops: usize, seed: u64) -> Result<Prediction> {
    let size = predictor.model.config.image_size;
    let crops = multi_crop(image, test_crops, size, seed)?;
    let patches = crops
        .par_iter()
        .map(|c| predictor.patches(c))
        .collect::<Result<Vec<_>>>()?;
    let crop_scores: Vec<f64> = patches.iter().map(|p| p.score).collect();
    Ok(Prediction {
        score: crop_scores.iter().sum::<f64>() / crop_scores.len() as f64,
        crop_scores,
        first_crop: patches.into_iter().next().expect("at least one crop"),
    })
}
