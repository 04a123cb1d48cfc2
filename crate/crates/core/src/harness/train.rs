use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::data::{augment, Dataset, Image};
use crate::error::{Error, Result};
use crate::model::Maniqa;
use crate::optim::{adam_step, cosine_lr, AdamState};
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean MSE per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Squared error of one crop against its normalized label, with the
/// gradient of every parameter.
pub fn item_loss_grad(
    model: &Maniqa,
    params: &ParamStore,
    crop: &Image,
    target: f64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut ctx = Ctx::new(params, true);
    let image = ctx.g.constant(crop.to_tensor());
    let out = model.forward(&mut ctx, image)?;
    let t = ctx.g.constant(crate::tensor::Tensor::scalar(target));
    let diff = ctx.g.sub(out.score, t)?;
    let loss = ctx.g.mul(diff, diff)?;
    ctx.g.backward(loss)?;
    Ok((ctx.g.value(loss)[0], ctx.grads()))
}

/// Fixed-epoch MSE training on every item of `data`. The seed drives the
/// initialisation, shuffling and augmentation; items of a batch run in
/// parallel and their gradients are summed in batch order.
pub fn train(config: &TrainConfig, data: &Dataset, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let model = Maniqa::new(config.model.clone())?;
    let mut params = model.init_params(seed);
    let mut states: BTreeMap<String, AdamState> = params
        .iter()
        .map(|(k, t)| (k.clone(), AdamState::new(t.len())))
        .collect();
    let targets = data.manifest.normalized_mos();
    let schedule = config.schedule();
    let adam = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let lr = cosine_lr(&schedule, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let jobs: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
            let results = jobs
                .par_iter()
                .map(|&(i, crop_seed)| {
                    let crop = augment(&data.images[i], config.crop_size, config.flip_prob, crop_seed)?;
                    item_loss_grad(&model, &params, &crop, targets[i])
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let loss = results.iter().map(|r| r.0).sum::<f64>() * scale;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: step as usize, loss });
            }
            for (name, p) in params.iter_mut() {
                let mut grad = vec![0.0; p.len()];
                for (_, grads) in &results {
                    if let Some(g) = grads.get(name) {
                        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
                grad.iter_mut().for_each(|v| *v *= scale);
                let state = states.get_mut(name).expect("state per parameter");
                adam_step(name, p, &grad, state, lr, &adam)?;
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    let range = (data.manifest.mos_min, data.manifest.mos_max);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(config, seed, step, &params, range),
        epoch_losses,
    })
}
