//! Window tiling, cyclic shifts, and the shifted-window attention mask.
//!
//! Grids are token-major: token `(r, c)` of an `h × w` grid sits at row
//! `r·w + c` of an `(h·w, C)` tensor. Everything here is expressed as index
//! maps so the same permutations drive both plain tensors and graph gathers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-overlapping `win × win` windows of an `h × w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid {
    /// `(num_windows, win·win, C)`, windows and their tokens in row-major order.
    pub windows: Tensor,
    pub h: usize,
    pub w: usize,
    pub win: usize,
    pub shift: usize,
}

impl WindowGrid {
    pub fn num_windows(&self) -> usize {
        (self.h / self.win) * (self.w / self.win)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win * self.win
    }
}

fn check_tiling(h: usize, w: usize, win: usize) -> Result<()> {
    if win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        return Err(Error::Config(format!(
            "{h}x{w} grid cannot be tiled by {win}x{win} windows"
        )));
    }
    Ok(())
}

/// Grid token feeding each windowed slot.
pub fn partition_index(h: usize, w: usize, win: usize) -> Result<Vec<usize>> {
    check_tiling(h, w, win)?;
    let mut idx = Vec::with_capacity(h * w);
    for wr in 0..h / win {
        for wc in 0..w / win {
            for r in 0..win {
                for c in 0..win {
                    idx.push((wr * win + r) * w + wc * win + c);
                }
            }
        }
    }
    Ok(idx)
}

/// Source token of each output token for a toroidal roll by `(-offset, -offset)`.
pub fn shift_index(h: usize, w: usize, offset: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            idx.push(((r + offset) % h) * w + (c + offset) % w);
        }
    }
    idx
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Composite map: roll by `-shift`, then partition. Slot `i` reads grid token
/// `index[i]`.
pub fn shifted_partition_index(h: usize, w: usize, win: usize, shift: usize) -> Result<Vec<usize>> {
    let part = partition_index(h, w, win)?;
    let roll = shift_index(h, w, shift);
    Ok(part.into_iter().map(|t| roll[t]).collect())
}

/// Lifts a token permutation to flat indices of a `(tokens, channels)` tensor.
pub fn expand_token_index(tokens: &[usize], channels: usize) -> Vec<usize> {
    tokens
        .iter()
        .flat_map(|&t| (0..channels).map(move |c| t * channels + c))
        .collect()
}

fn grid_dims(grid: &Tensor) -> Result<(usize, usize, usize)> {
    match *grid.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim("grid", s, &[0, 0, 0])),
    }
}

fn permute_tokens(grid: &Tensor, tokens: &[usize], channels: usize, shape: Vec<usize>) -> Tensor {
    let v = grid.values();
    let values = expand_token_index(tokens, channels)
        .into_iter()
        .map(|i| v[i])
        .collect();
    Tensor::new(shape, values).expect("permutation preserves size")
}

/// Splits an `(h, w, C)` grid into windows.
pub fn window_partition(grid: &Tensor, win: usize) -> Result<WindowGrid> {
    let (h, w, c) = grid_dims(grid)?;
    let idx = partition_index(h, w, win)?;
    let windows = permute_tokens(grid, &idx, c, vec![(h / win) * (w / win), win * win, c]);
    Ok(WindowGrid {
        windows,
        h,
        w,
        win,
        shift: 0,
    })
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &WindowGrid) -> Result<Tensor> {
    let c = *windows.windows.shape().last().unwrap_or(&0);
    let idx = partition_index(windows.h, windows.w, windows.win)?;
    let inv = invert_permutation(&idx);
    Ok(permute_tokens(&windows.windows, &inv, c, vec![windows.h, windows.w, c]))
}

/// Toroidal roll of an `(h, w, C)` grid by `(-offset, -offset)`.
pub fn cyclic_shift(grid: &Tensor, offset: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(grid)?;
    if offset >= h.min(w) {
        return Err(Error::Config(format!(
            "shift {offset} must be smaller than the {h}x{w} grid"
        )));
    }
    Ok(permute_tokens(grid, &shift_index(h, w, offset), c, vec![h, w, c]))
}

/// Undoes [`cyclic_shift`].
pub fn cyclic_unshift(grid: &Tensor, offset: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(grid)?;
    if offset >= h.min(w) {
        return Err(Error::Config(format!(
            "shift {offset} must be smaller than the {h}x{w} grid"
        )));
    }
    let inv = invert_permutation(&shift_index(h, w, offset));
    Ok(permute_tokens(grid, &inv, c, vec![h, w, c]))
}

/// Region label per token of the shifted grid; tokens that were not
/// neighbours before the roll get different labels.
fn region_labels(h: usize, w: usize, win: usize, shift: usize) -> Vec<usize> {
    let band = |x: usize, n: usize| {
        if x < n - win {
            0
        } else if x < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            labels.push(band(r, h) * 3 + band(c, w));
        }
    }
    labels
}

/// Additive logits `(num_windows, n, n)`: 0 where two tokens of a window share
/// a region, −∞ otherwise. All zeros when `shift == 0`.
pub fn shifted_window_mask(h: usize, w: usize, win: usize, shift: usize) -> Result<Tensor> {
    let part = partition_index(h, w, win)?;
    let n = win * win;
    let nw = part.len() / n;
    if shift == 0 {
        return Ok(Tensor::zeros(&[nw, n, n]));
    }
    let labels = region_labels(h, w, win, shift);
    let mut mask = Vec::with_capacity(nw * n * n);
    for win_tokens in part.chunks(n) {
        for &a in win_tokens {
            for &b in win_tokens {
                mask.push(if labels[a] == labels[b] {
                    0.0
                } else {
                    f64::NEG_INFINITY
                });
            }
        }
    }
    Tensor::new(vec![nw, n, n], mask)
}
