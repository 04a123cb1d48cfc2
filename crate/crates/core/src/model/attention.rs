//! Multi-head scaled dot-product attention over groups of tokens. A group is
//! a window for the Swin layers and the whole image for the encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub struct AttentionOutput {
    /// `(groups·n, C)`
    pub out: Var,
    /// Softmaxed weights `(groups·heads, n, n)`.
    pub attn: Var,
}

pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) {
    store.init_linear(&format!("{prefix}.qkv"), dim, 3 * dim, rng);
    store.init_linear(&format!("{prefix}.proj"), dim, dim, rng);
}

/// Learned `((2·win − 1)², heads)` table, zero-initialised.
pub fn init_relative_bias(store: &mut ParamStore, prefix: &str, win: usize, heads: usize) {
    let span = 2 * win - 1;
    store.insert(format!("{prefix}.rel_bias"), Tensor::zeros(&[span * span, heads]));
}

/// Table entry for every `(group, head, i, j)` logit.
fn relative_bias_index(groups: usize, heads: usize, win: usize) -> Vec<usize> {
    let n = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(groups * heads * n * n);
    for _ in 0..groups {
        for h in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    let dr = (i / win) + win - 1 - (j / win);
                    let dc = (i % win) + win - 1 - (j % win);
                    idx.push((dr * span + dc) * heads + h);
                }
            }
        }
    }
    idx
}

/// Attention within each of `groups` consecutive blocks of `n` tokens.
///
/// `mask`, if given, is `(groups, n, n)` of additive logits. `rel_bias_win`
/// adds the `{prefix}.rel_bias` table, treating each group as a `win × win`
/// window.
pub fn multi_head_attention(
    ctx: &mut Ctx,
    prefix: &str,
    x: Var,
    groups: usize,
    heads: usize,
    mask: Option<&Tensor>,
    rel_bias_win: Option<usize>,
) -> Result<AttentionOutput> {
    let (rows, c) = match *ctx.g.shape(x) {
        [r, c] => (r, c),
        ref s => return Err(Error::dim("attention", s, &[0, 0])),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "channel dim {c} is not divisible by {heads} heads"
        )));
    }
    if groups == 0 || rows % groups != 0 {
        return Err(Error::dim("attention groups", &[rows], &[groups]));
    }
    let n = rows / groups;
    let d = c / heads;

    let qkv = ctx.linear(&format!("{prefix}.qkv"), x)?;
    // (group, head, token, e) for q/v and (group, head, e, token) for kᵀ.
    let split = |part: usize, transpose: bool| -> Vec<usize> {
        let mut idx = Vec::with_capacity(rows * c);
        for b in 0..groups {
            for h in 0..heads {
                if transpose {
                    for e in 0..d {
                        for t in 0..n {
                            idx.push((b * n + t) * 3 * c + part * c + h * d + e);
                        }
                    }
                } else {
                    for t in 0..n {
                        for e in 0..d {
                            idx.push((b * n + t) * 3 * c + part * c + h * d + e);
                        }
                    }
                }
            }
        }
        idx
    };
    let bh = groups * heads;
    let q = ctx.g.gather(qkv, split(0, false), vec![bh, n, d])?;
    let kt = ctx.g.gather(qkv, split(1, true), vec![bh, d, n])?;
    let v = ctx.g.gather(qkv, split(2, false), vec![bh, n, d])?;

    let logits = ctx.g.bmm(q, kt)?;
    let mut logits = ctx.g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(win) = rel_bias_win {
        if win * win != n {
            return Err(Error::Config(format!(
                "relative bias window {win} does not match group size {n}"
            )));
        }
        let table = ctx.param(&format!("{prefix}.rel_bias"))?;
        let bias = ctx
            .g
            .gather(table, relative_bias_index(groups, heads, win), vec![bh, n, n])?;
        logits = ctx.g.add(logits, bias)?;
    }
    if let Some(mask) = mask {
        if mask.shape() != [groups, n, n] {
            return Err(Error::dim("attention mask", mask.shape(), &[groups, n, n]));
        }
        let mv = mask.values();
        let mut expanded = Vec::with_capacity(bh * n * n);
        for b in 0..groups {
            for _ in 0..heads {
                expanded.extend_from_slice(&mv[b * n * n..(b + 1) * n * n]);
            }
        }
        let m = ctx.g.constant(Tensor::new(vec![bh, n, n], expanded)?);
        logits = ctx.g.add(logits, m)?;
    }
    let attn = ctx.g.softmax(logits, 2)?;
    let heads_out = ctx.g.bmm(attn, v)?;

    let mut merge = Vec::with_capacity(rows * c);
    for b in 0..groups {
        for t in 0..n {
            for h in 0..heads {
                for e in 0..d {
                    merge.push(((b * heads + h) * n + t) * d + e);
                }
            }
        }
    }
    let merged = ctx.g.gather(heads_out, merge, vec![rows, c])?;
    let out = ctx.linear(&format!("{prefix}.proj"), merged)?;
    Ok(AttentionOutput { out, attn })
}
