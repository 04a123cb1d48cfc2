//! Trainable ViT-style feature extractor: patch embedding, encoder layers,
//! multi-layer concatenation, and pointwise channel reduction.

use rand::Rng;

use super::attention::{init_attention, multi_head_attention};
use super::config::{BackboneVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Channel-major feature map: `var` has shape `(channels, h·w)`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Wraps a token-major `(h·w, C)` var, transposing to channel-major.
    pub fn from_tokens(ctx: &mut Ctx, tokens: Var, h: usize, w: usize) -> Result<Self> {
        let [n, c] = *ctx.g.shape(tokens) else {
            return Err(Error::dim("feature map", ctx.g.shape(tokens), &[h * w, 0]));
        };
        if n != h * w {
            return Err(Error::dim("feature map", &[n, c], &[h * w, c]));
        }
        let var = ctx.g.transpose(tokens)?;
        Ok(FeatureMap { var, channels: c, h, w })
    }

    /// Token-major `(h·w, C)` view.
    pub fn to_tokens(&self, ctx: &mut Ctx) -> Result<Var> {
        ctx.g.transpose(self.var)
    }
}

/// For each patch (row-major over the grid) and each `(channel, dy, dx)`,
/// the flat index into a planar `3 × H × W` image.
pub fn patchify_index(height: usize, width: usize, patch: usize) -> Vec<usize> {
    let (gh, gw) = (height / patch, width / patch);
    let mut idx = Vec::with_capacity(3 * height * width);
    for pr in 0..gh {
        for pc in 0..gw {
            for ch in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        idx.push(ch * height * width + (pr * patch + dy) * width + pc * patch + dx);
                    }
                }
            }
        }
    }
    idx
}

pub fn init_encoder_layer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) {
    store.init_layer_norm(&format!("{prefix}.ln1"), dim);
    init_attention(store, &format!("{prefix}.attn"), dim, rng);
    store.init_layer_norm(&format!("{prefix}.ln2"), dim);
    store.init_linear(&format!("{prefix}.fc1"), dim, hidden, rng);
    store.init_linear(&format!("{prefix}.fc2"), hidden, dim, rng);
}

pub fn init_backbone<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let p = cfg.patch_size;
    store.init_linear("backbone.patch_embed", 3 * p * p, cfg.embed_dim, rng);
    store.insert(
        "backbone.pos_embed",
        Tensor::zeros(&[cfg.num_tokens(), cfg.embed_dim]),
    );
    for l in 0..cfg.num_layers {
        let prefix = format!("backbone.layers.{l}");
        match cfg.backbone {
            BackboneVariant::Vit => {
                init_encoder_layer(store, &prefix, cfg.embed_dim, cfg.mlp_hidden, rng)
            }
            BackboneVariant::Conv => {
                let d = cfg.embed_dim;
                let bound = 1.0 / ((d * 9) as f64).sqrt();
                store.insert(format!("{prefix}.conv.weight"), Tensor::uniform(&[d, d, 3, 3], bound, rng));
                store.insert(format!("{prefix}.conv.bias"), Tensor::zeros(&[d]));
            }
        }
    }
    store.init_linear("backbone.reduce", cfg.concat_channels(), cfg.d1, rng);
}

/// Pixels enter the patch projection as `(x − 0.5) / 0.25`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Flattens non-overlapping `P × P × 3` patches, standardizes them, projects
/// them to `D`, and adds the positional embedding. Returns tokens `(N, D)`.
pub fn patch_embed(ctx: &mut Ctx, image: Var, cfg: &ModelConfig) -> Result<Var> {
    let (c, h, w) = match *ctx.g.shape(image) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim("patch_embed", s, &[3, cfg.image_size, cfg.image_size])),
    };
    if c != 3 {
        return Err(Error::dim("patch_embed channels", &[c, h, w], &[3, h, w]));
    }
    let p = cfg.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Validation(format!(
            "image is {h}x{w} but the model expects {0}x{0}",
            cfg.image_size
        )));
    }
    let n = (h / p) * (w / p);
    let patches = ctx.g.gather(image, patchify_index(h, w, p), vec![n, 3 * p * p])?;
    let shift = ctx.g.constant(Tensor::full(&[n, 3 * p * p], -PIXEL_MEAN));
    let centered = ctx.g.add(patches, shift)?;
    let patches = ctx.g.scale(centered, 1.0 / PIXEL_STD);
    let tokens = ctx.linear("backbone.patch_embed", patches)?;
    let pos = ctx.param("backbone.pos_embed")?;
    ctx.g.add(tokens, pos)
}

/// Pre-norm transformer layer over all tokens.
pub fn encoder_layer(ctx: &mut Ctx, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = ctx.layer_norm(&format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(ctx, &format!("{prefix}.attn"), h, 1, heads, None, None)?;
    let x = ctx.g.add(x, a.out)?;
    let h = ctx.layer_norm(&format!("{prefix}.ln2"), x)?;
    let h = ctx.linear(&format!("{prefix}.fc1"), h)?;
    let h = ctx.g.gelu(h);
    let h = ctx.linear(&format!("{prefix}.fc2"), h)?;
    ctx.g.add(x, h)
}

/// Residual 3×3 convolution over the token grid.
fn conv_layer(ctx: &mut Ctx, prefix: &str, x: Var, side: usize) -> Result<Var> {
    let d = ctx.g.shape(x)[1];
    let chw = ctx.g.transpose(x)?;
    let img = ctx.g.reshape(chw, vec![1, d, side, side])?;
    let k = ctx.param(&format!("{prefix}.conv.weight"))?;
    let b = ctx.param(&format!("{prefix}.conv.bias"))?;
    let y = ctx.g.conv2d(img, k, Some(b), 1)?;
    let y = ctx.g.gelu(y);
    let y = ctx.g.reshape(y, vec![d, side * side])?;
    let y = ctx.g.transpose(y)?;
    ctx.g.add(x, y)
}

/// Runs every backbone layer and concatenates the outputs of
/// `cfg.extract_layers` along channels.
pub fn extract_features(ctx: &mut Ctx, image: Var, cfg: &ModelConfig) -> Result<FeatureMap> {
    if let Some(&bad) = cfg
        .extract_layers
        .iter()
        .find(|&&l| l == 0 || l > cfg.num_layers)
    {
        return Err(Error::Config(format!(
            "extract layer {bad} outside 1..={}",
            cfg.num_layers
        )));
    }
    let side = cfg.grid();
    let mut x = patch_embed(ctx, image, cfg)?;
    let mut captured = Vec::with_capacity(cfg.extract_layers.len());
    for l in 0..cfg.num_layers {
        let prefix = format!("backbone.layers.{l}");
        x = match cfg.backbone {
            BackboneVariant::Vit => encoder_layer(ctx, &prefix, x, cfg.heads)?,
            BackboneVariant::Conv => conv_layer(ctx, &prefix, x, side)?,
        };
        if cfg.extract_layers.contains(&(l + 1)) {
            captured.push(x);
        }
    }
    let cat = if captured.len() == 1 {
        captured[0]
    } else {
        ctx.g.concat_cols(&captured)?
    };
    FeatureMap::from_tokens(ctx, cat, side, side)
}

/// Pointwise learned map from `fm.channels` to the width of `{prefix}.weight`.
pub fn reduce_channels(ctx: &mut Ctx, prefix: &str, fm: FeatureMap, target: usize) -> Result<FeatureMap> {
    if target == 0 {
        return Err(Error::Config("channel reduction target must be positive".into()));
    }
    let tokens = fm.to_tokens(ctx)?;
    let reduced = ctx.linear(prefix, tokens)?;
    let out_c = ctx.g.shape(reduced)[1];
    if out_c != target {
        return Err(Error::dim("reduce_channels", &[out_c], &[target]));
    }
    FeatureMap::from_tokens(ctx, reduced, fm.h, fm.w)
}
