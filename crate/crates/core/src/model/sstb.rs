//! Scale Swin Transformer Block: two (shifted-)window attention layers, a
//! 3×3 convolution, and a residual whose branch is multiplied by `scale`.

use rand::Rng;

use super::attention::{init_attention, init_relative_bias, multi_head_attention};
use super::window::{expand_token_index, invert_permutation, shifted_partition_index, shifted_window_mask};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Static shape of one block; weights live in the [`ParamStore`] under
/// `prefix`.
#[derive(Clone, Debug)]
pub struct SstbParams {
    pub prefix: String,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    pub scale: f64,
    pub relative_bias: bool,
}

impl SstbParams {
    pub fn layer_prefix(&self, j: usize) -> String {
        format!("{}.{j}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.channels;
        for j in 0..2 {
            let p = self.layer_prefix(j);
            store.init_layer_norm(&format!("{p}.ln1"), c);
            init_attention(store, &format!("{p}.attn"), c, rng);
            if self.relative_bias {
                init_relative_bias(store, &format!("{p}.attn"), self.window, self.heads);
            }
            store.init_layer_norm(&format!("{p}.ln2"), c);
            store.init_linear(&format!("{p}.fc1"), c, self.mlp_hidden, rng);
            store.init_linear(&format!("{p}.fc2"), self.mlp_hidden, c, rng);
        }
        let bound = 1.0 / ((c * 9) as f64).sqrt();
        store.insert(
            format!("{}.conv.weight", self.prefix),
            Tensor::uniform(&[c, c, 3, 3], bound, rng),
        );
        store.insert(format!("{}.conv.bias", self.prefix), Tensor::zeros(&[c]));
    }
}

/// Output of one Swin layer plus its attention weights for inspection.
pub struct StlOutput {
    pub out: Var,
    /// `(windows·heads, n, n)`
    pub attn: Var,
}

/// Pre-norm Swin layer on a token-major `(h·w, C)` grid. Layer 0 uses the
/// plain tiling; layer 1 rolls the grid by `⌊win/2⌋` and masks attention
/// between tokens that were not adjacent before the roll.
pub fn stl_forward(ctx: &mut Ctx, p: &SstbParams, x: Var, h: usize, w: usize, layer: usize) -> Result<StlOutput> {
    let c = p.channels;
    if ctx.g.shape(x) != [h * w, c] {
        return Err(Error::dim("stl", ctx.g.shape(x), &[h * w, c]));
    }
    let win = p.window;
    let shift = if layer % 2 == 1 { win / 2 } else { 0 };
    let prefix = p.layer_prefix(layer);

    let normed = ctx.layer_norm(&format!("{prefix}.ln1"), x)?;
    let tokens = shifted_partition_index(h, w, win, shift)?;
    let inverse = invert_permutation(&tokens);
    let windows = ctx.g.gather(normed, expand_token_index(&tokens, c), vec![h * w, c])?;
    let mask = (shift > 0).then(|| shifted_window_mask(h, w, win, shift)).transpose()?;
    let groups = (h / win) * (w / win);
    let a = multi_head_attention(
        ctx,
        &format!("{prefix}.attn"),
        windows,
        groups,
        p.heads,
        mask.as_ref(),
        p.relative_bias.then_some(win),
    )?;
    let restored = ctx.g.gather(a.out, expand_token_index(&inverse, c), vec![h * w, c])?;
    let x = ctx.g.add(x, restored)?;

    let hdn = ctx.layer_norm(&format!("{prefix}.ln2"), x)?;
    let hdn = ctx.linear(&format!("{prefix}.fc1"), hdn)?;
    let hdn = ctx.g.gelu(hdn);
    let hdn = ctx.linear(&format!("{prefix}.fc2"), hdn)?;
    let out = ctx.g.add(x, hdn)?;
    Ok(StlOutput { out, attn: a.attn })
}

/// `scale · conv(stl₂(stl₁(x))) + x` on a token-major grid.
pub fn sstb_forward(ctx: &mut Ctx, p: &SstbParams, x: Var, h: usize, w: usize) -> Result<Var> {
    if !p.scale.is_finite() {
        return Err(Error::Parameter(format!("sstb scale must be finite, got {}", p.scale)));
    }
    let c = p.channels;
    let y = stl_forward(ctx, p, x, h, w, 0)?.out;
    let y = stl_forward(ctx, p, y, h, w, 1)?.out;
    let chw = ctx.g.transpose(y)?;
    let img = ctx.g.reshape(chw, vec![1, c, h, w])?;
    let k = ctx.param(&format!("{}.conv.weight", p.prefix))?;
    let b = ctx.param(&format!("{}.conv.bias", p.prefix))?;
    let conv = ctx.g.conv2d(img, k, Some(b), 1)?;
    let conv = ctx.g.reshape(conv, vec![c, h * w])?;
    let conv = ctx.g.transpose(conv)?;
    let scaled = ctx.g.scale(conv, p.scale);
    ctx.g.add(scaled, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_input;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, scale: f64, relative_bias: bool) -> (SstbParams, ParamStore) {
        let p = SstbParams {
            prefix: "sstb.0".into(),
            channels: c,
            heads: 2,
            window: 2,
            mlp_hidden: c,
            scale,
            relative_bias,
        };
        let mut s = ParamStore::new();
        p.init(&mut s, &mut ChaCha8Rng::seed_from_u64(4));
        (p, s)
    }

    #[test]
    fn zeroed_output_projections_make_stl_identity() {
        let (p, mut s) = block(8, 0.1, false);
        s.zero_prefix("sstb.0.1.attn.proj");
        s.zero_prefix("sstb.0.1.fc2");
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(random_input(&[16, 8], 1));
        let y = stl_forward(&mut ctx, &p, x, 4, 4, 1).unwrap();
        assert_eq!(ctx.g.value(y.out), ctx.g.value(x));
    }

    #[test]
    fn shapes_preserved_on_toy_grid() {
        for rb in [false, true] {
            let (p, s) = block(64, 0.1, rb);
            let mut ctx = Ctx::new(&s, false);
            let x = ctx.g.constant(random_input(&[16, 64], 2));
            let y = sstb_forward(&mut ctx, &p, x, 4, 4).unwrap();
            assert_eq!(ctx.g.shape(y), &[16, 64]);
            assert!(ctx.g.tensor(y).is_finite());
        }
    }

    #[test]
    fn zero_scale_is_identity_and_branch_is_linear_in_scale() {
        let x0 = random_input(&[16, 8], 7);
        let run = |scale: f64| {
            let (p, s) = block(8, scale, false);
            let mut ctx = Ctx::new(&s, false);
            let x = ctx.g.constant(x0.clone());
            let y = sstb_forward(&mut ctx, &p, x, 4, 4).unwrap();
            ctx.g.value(y).to_vec()
        };
        assert_eq!(run(0.0), x0.values());
        let branch = |scale: f64| {
            run(scale)
                .iter()
                .zip(x0.values())
                .map(|(o, i)| (o - i) / scale)
                .collect::<Vec<_>>()
        };
        let base = branch(0.1);
        for s in [0.5, 1.0, 0.8] {
            for (a, b) in branch(s).iter().zip(&base) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_scale_rejected() {
        let (p, s) = block(8, f64::INFINITY, false);
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(random_input(&[16, 8], 7));
        assert!(sstb_forward(&mut ctx, &p, x, 4, 4).is_err());
    }
}
