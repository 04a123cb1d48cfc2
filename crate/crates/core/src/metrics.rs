//! Pearson (PLCC) and Spearman (SROCC) correlation.

use crate::error::{Error, Result};

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::dim("correlation", &[truth.len()], &[pred.len()]));
    }
    if truth.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 items, got {}",
            truth.len()
        )));
    }
    if let Some(v) = truth.iter().chain(pred).find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            name: "correlation input".into(),
            detail: format!("{v}"),
        });
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn plcc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let n = truth.len() as f64;
    let mt = truth.iter().sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let (mut cov, mut vt, mut vp) = (0.0, 0.0, 0.0);
    for (t, p) in truth.iter().zip(pred) {
        let (dt, dp) = (t - mt, p - mp);
        cov += dt * dp;
        vt += dt * dt;
        vp += dp * dp;
    }
    if vt == 0.0 || vp == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the sequences is constant".into(),
        ));
    }
    Ok((cov / (vt.sqrt() * vp.sqrt())).clamp(-1.0, 1.0))
}

/// Ascending fractional ranks starting at 1; tied values share the mean of
/// the positions they occupy.
pub fn rank(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) → mean 1-based rank
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn has_ties(ranks: &[f64]) -> bool {
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// `1 − 6 Σ dᵢ² / (N (N² − 1))`, valid only for tie-free ranks.
pub fn spearman_closed_form(truth_ranks: &[f64], pred_ranks: &[f64]) -> f64 {
    let n = truth_ranks.len() as f64;
    let d2: f64 = truth_ranks
        .iter()
        .zip(pred_ranks)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Spearman rank-order correlation. Uses the closed form when neither side
/// has ties and Pearson correlation of the fractional ranks otherwise.
pub fn srocc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let (rt, rp) = (rank(truth), rank(pred));
    if has_ties(&rt) || has_ties(&rp) {
        return plcc(&rt, &rp);
    }
    Ok(spearman_closed_form(&rt, &rp))
}
