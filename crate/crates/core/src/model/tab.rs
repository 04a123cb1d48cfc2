//! Transposed attention: self-attention across channels. The `C × C` map is
//! formed by contracting queries and keys over spatial positions, so it is
//! blind to token order. No layer norm and no MLP.

use rand::Rng;

use super::backbone::FeatureMap;
use super::config::TabTemperature;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, ParamStore};

pub fn init_tab<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) {
    for part in ["q", "k", "v", "proj"] {
        store.init_linear(&format!("{prefix}.{part}"), channels, channels, rng);
    }
}

pub struct TabOutput {
    pub out: FeatureMap,
    /// `(C, C)`, row `i` is output channel `i`'s distribution over input channels.
    pub attn: Var,
}

/// `X̂ = W_p · (A · V) + X` with `A = softmax_rows(Q Kᵀ / α_t)` in
/// channel-major form.
pub fn tab_forward(
    ctx: &mut Ctx,
    prefix: &str,
    x: FeatureMap,
    temperature: TabTemperature,
) -> Result<TabOutput> {
    let n = x.tokens();
    if n == 0 {
        return Err(Error::EmptyInput("transposed attention"));
    }
    let tokens = x.to_tokens(ctx)?;
    let q = ctx.linear(&format!("{prefix}.q"), tokens)?;
    let k = ctx.linear(&format!("{prefix}.k"), tokens)?;
    let v = ctx.linear(&format!("{prefix}.v"), tokens)?;

    let qc = ctx.g.transpose(q)?;
    let logits = ctx.g.matmul(qc, k)?;
    let logits = ctx.g.scale(logits, 1.0 / temperature.value(n));
    let attn = ctx.g.softmax(logits, 1)?;

    let vc = ctx.g.transpose(v)?;
    let mixed = ctx.g.matmul(attn, vc)?;
    let mixed_tokens = ctx.g.transpose(mixed)?;
    let projected = ctx.linear(&format!("{prefix}.proj"), mixed_tokens)?;
    let projected = ctx.g.transpose(projected)?;
    let out = ctx.g.add(projected, x.var)?;
    Ok(TabOutput {
        out: FeatureMap { var: out, ..x },
        attn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_input;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(c: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_tab(&mut s, "tab", c, &mut ChaCha8Rng::seed_from_u64(1));
        s
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut s = store(8);
        s.zero_prefix("tab.proj");
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(random_input(&[8, 4], 2));
        let fm = FeatureMap { var: x, channels: 8, h: 2, w: 2 };
        let out = tab_forward(&mut ctx, "tab", fm, TabTemperature::SqrtTokens).unwrap();
        assert_eq!(ctx.g.value(out.out.var), ctx.g.value(x));
    }

    #[test]
    fn shapes_and_row_sums() {
        let s = store(256);
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(random_input(&[256, 16], 3));
        let fm = FeatureMap { var: x, channels: 256, h: 4, w: 4 };
        for temp in [TabTemperature::SqrtTokens, TabTemperature::Tokens] {
            let out = tab_forward(&mut ctx, "tab", fm, temp).unwrap();
            assert_eq!(ctx.g.shape(out.out.var), &[256, 16]);
            assert_eq!(ctx.g.shape(out.attn), &[256, 256]);
            for row in ctx.g.value(out.attn).chunks(256) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
