//! Dual-branch patch-weighted score head and the weighted-mean aggregation
//! `q̃ = Σ wᵢ·sᵢ / Σ wᵢ`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Ctx, ParamStore};

/// Denominators below this fall back to the plain mean of the scores.
pub const AGGREGATE_EPS: f64 = 1e-8;

pub fn hidden_width(channels: usize) -> usize {
    (channels / 2).max(1)
}

pub fn init_head<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) {
    let hidden = hidden_width(channels);
    for branch in ["head.score", "head.weight"] {
        store.init_linear(&format!("{branch}.fc1"), channels, hidden, rng);
        store.init_linear(&format!("{branch}.fc2"), hidden, 1, rng);
    }
}

/// Per-patch outputs of both branches, `(N, 1)` each.
pub struct BranchOutput {
    pub scores: Var,
    pub weights: Var,
}

fn branch(ctx: &mut Ctx, prefix: &str, tokens: Var) -> Result<Var> {
    let h = ctx.linear(&format!("{prefix}.fc1"), tokens)?;
    let h = ctx.g.gelu(h);
    ctx.linear(&format!("{prefix}.fc2"), h)
}

/// Score branch (linear → GELU → linear) and weight branch (same topology,
/// sigmoid output) over token-major features `(N, C)`.
pub fn branch_forward(ctx: &mut Ctx, tokens: Var) -> Result<BranchOutput> {
    if ctx.g.shape(tokens).first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyInput("score head"));
    }
    let scores = branch(ctx, "head.score", tokens)?;
    let logits = branch(ctx, "head.weight", tokens)?;
    let weights = ctx.g.sigmoid(logits);
    Ok(BranchOutput { scores, weights })
}

/// Score branch alone, for the single-branch ablation.
pub fn score_branch(ctx: &mut Ctx, tokens: Var) -> Result<Var> {
    branch(ctx, "head.score", tokens)
}

/// Weighted mean on the graph. Falls back to `mean(s)` when `Σw < ε`.
pub fn aggregate_on_graph(g: &mut Graph, scores: Var, weights: Var) -> Result<Var> {
    let den = g.sum(weights);
    if g.value(den)[0] < AGGREGATE_EPS {
        return Ok(g.mean(scores));
    }
    let prod = g.mul(weights, scores)?;
    let num = g.sum(prod);
    g.div(num, den)
}

/// Weighted mean of `scores` under positive `weights`. Pairs are summed in a
/// canonical order, so permuting `(s, w)` jointly gives a bit-identical result,
/// and the result never leaves `[min s, max s]`.
pub fn aggregate(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.len() != weights.len() {
        return Err(Error::dim("aggregate", &[scores.len()], &[weights.len()]));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Parameter(format!("patch weights must be non-negative, got {w}")));
    }
    let mut pairs: Vec<(f64, f64)> = scores.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let den: f64 = pairs.iter().map(|p| p.1).sum();
    let q = if den < AGGREGATE_EPS {
        pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64
    } else {
        pairs.iter().map(|(s, w)| s * w).sum::<f64>() / den
    };
    Ok(q.clamp(lo, hi))
}

/// Per-patch scores and weights of one crop plus the aggregated score.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchPrediction {
    pub scores: Vec<f64>,
    /// All ones when the weight branch is disabled.
    pub weights: Vec<f64>,
    pub score: f64,
    pub h: usize,
    pub w: usize,
}

impl PatchPrediction {
    /// `wᵢ · sᵢ` per patch.
    pub fn weighted(&self) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s * w)
            .collect()
    }
}
