//! The full quality model: backbone → `stages × (TAB… → SSTB)` → dual-branch
//! head.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod head;
pub mod sstb;
pub mod tab;
pub mod window;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backbone::FeatureMap;
pub use config::{BackboneVariant, ModelConfig, TabTemperature};
pub use head::PatchPrediction;
pub use sstb::SstbParams;

use crate::error::Result;
use crate::graph::Var;
use crate::params::{Ctx, ParamStore};

/// Vars produced by one forward pass.
pub struct ModelOutput {
    /// Aggregated score, shape `(1)`.
    pub score: Var,
    /// `(N, 1)`
    pub scores: Var,
    /// `(N, 1)`; `None` when the dual branch is disabled.
    pub weights: Option<Var>,
    /// Channel attention maps of every TAB, in execution order.
    pub tab_maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Maniqa {
    pub config: ModelConfig,
}

impl Maniqa {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Maniqa { config })
    }

    pub fn tab_prefix(stage: usize, index: usize) -> String {
        format!("tab.{stage}.{index}")
    }

    pub fn sstb_params(&self, stage: usize) -> SstbParams {
        let c = &self.config;
        SstbParams {
            prefix: format!("sstb.{stage}"),
            channels: c.stage_dim(stage),
            heads: c.heads,
            window: c.window_size,
            mlp_hidden: c.mlp_hidden,
            scale: c.scale,
            relative_bias: c.relative_bias,
        }
    }

    /// Seeded initialisation: weights uniform in `±1/√fan_in`, biases and
    /// positional embeddings zero. Disabled blocks get no parameters.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        backbone::init_backbone(&mut store, c, &mut rng);
        for stage in 0..c.stages {
            let dim = c.stage_dim(stage);
            if stage > 0 && c.stage_dim(stage - 1) != dim {
                store.init_linear(&format!("stage_proj.{stage}"), c.stage_dim(stage - 1), dim, &mut rng);
            }
            if c.enable_tab {
                for t in 0..c.tab_per_stage {
                    tab::init_tab(&mut store, &Self::tab_prefix(stage, t), dim, &mut rng);
                }
            }
            if c.enable_sstb {
                self.sstb_params(stage).init(&mut store, &mut rng);
            }
        }
        head::init_head(&mut store, c.head_dim(), &mut rng);
        if !c.enable_dual_branch {
            let weight_branch: Vec<String> = store
                .names()
                .filter(|n| n.starts_with("head.weight."))
                .cloned()
                .collect();
            let mut kept = ParamStore::new();
            for (name, t) in store.iter() {
                if !weight_branch.contains(name) {
                    kept.insert(name.clone(), t.clone());
                }
            }
            store = kept;
        }
        store
    }

    /// Runs the model on a planar `3 × S × S` image var.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<ModelOutput> {
        let c = &self.config;
        let fm = backbone::extract_features(ctx, image, c)?;
        let mut fm = backbone::reduce_channels(ctx, "backbone.reduce", fm, c.d1)?;
        let mut tab_maps = Vec::new();
        for stage in 0..c.stages {
            let dim = c.stage_dim(stage);
            if fm.channels != dim {
                fm = backbone::reduce_channels(ctx, &format!("stage_proj.{stage}"), fm, dim)?;
            }
            if c.enable_tab {
                for t in 0..c.tab_per_stage {
                    let out = tab::tab_forward(ctx, &Self::tab_prefix(stage, t), fm, c.tab_temperature)?;
                    tab_maps.push(out.attn);
                    fm = out.out;
                }
            }
            if c.enable_sstb {
                let tokens = fm.to_tokens(ctx)?;
                let y = sstb::sstb_forward(ctx, &self.sstb_params(stage), tokens, fm.h, fm.w)?;
                fm = FeatureMap::from_tokens(ctx, y, fm.h, fm.w)?;
            }
        }
        let tokens = fm.to_tokens(ctx)?;
        if c.enable_dual_branch {
            let out = head::branch_forward(ctx, tokens)?;
            let score = head::aggregate_on_graph(&mut ctx.g, out.scores, out.weights)?;
            Ok(ModelOutput {
                score,
                scores: out.scores,
                weights: Some(out.weights),
                tab_maps,
            })
        } else {
            let scores = head::score_branch(ctx, tokens)?;
            let score = ctx.g.mean(scores);
            Ok(ModelOutput {
                score,
                scores,
                weights: None,
                tab_maps,
            })
        }
    }

    /// Inference on one crop, returning per-patch maps.
    pub fn predict_patches(&self, params: &ParamStore, image: &crate::tensor::Tensor) -> Result<PatchPrediction> {
        let mut ctx = Ctx::new(params, false);
        let img = ctx.g.constant(image.clone());
        let out = self.forward(&mut ctx, img)?;
        let scores = ctx.g.value(out.scores).to_vec();
        let weights = match out.weights {
            Some(w) => ctx.g.value(w).to_vec(),
            None => vec![1.0; scores.len()],
        };
        let side = self.config.grid();
        Ok(PatchPrediction {
            score: ctx.g.value(out.score)[0],
            scores,
            weights,
            h: side,
            w: side,
        })
    }
}
