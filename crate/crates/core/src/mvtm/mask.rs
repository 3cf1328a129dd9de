use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MASK_RATIO: f64 = 0.40;
/// How far above the target ratio a plan may go.
pub const RATIO_SLACK: f64 = 0.05;
pub const MIN_ASPECT: f64 = 0.3;
pub const MAX_ASPECT: f64 = 1.0 / 0.3;

const ATTEMPTS_PER_ROUND: usize = 1000;
const MAX_ROUNDS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn cells(&self, grid_w: usize) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| r * grid_w + c))
    }
}

/// Masked patch set over a `grid_h x grid_w` patch grid, kept together with
/// the rectangles it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub ratio: f64,
    pub min_block: usize,
    pub masked: Vec<bool>,
    pub blocks: Vec<Block>,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// Explicit plan, e.g. for tests that need a fixed mask.
    pub fn from_indices(grid_h: usize, grid_w: usize, indices: &[usize]) -> Result<Self> {
        let n = grid_h * grid_w;
        let mut masked = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("mask index {i} outside {n} patches")));
            }
            masked[i] = true;
        }
        let blocks = indices
            .iter()
            .map(|&i| Block {
                top: i / grid_w,
                left: i % grid_w,
                height: 1,
                width: 1,
            })
            .collect();
        Ok(MaskPlan {
            grid_h,
            grid_w,
            ratio: indices.len() as f64 / n as f64,
            min_block: 1,
            masked,
            blocks,
        })
    }

    /// Count window, block sizes and the union of blocks all check out.
    pub fn check(&self) -> Result<()> {
        let n = self.num_patches();
        let (lo, hi) = count_window(n, self.ratio);
        let count = self.count();
        if count < lo || count > hi {
            return Err(Error::invalid(format!(
                "{count} masked patches outside [{lo}, {hi}]"
            )));
        }
        let mut union = vec![false; n];
        for b in &self.blocks {
            if b.area() < self.min_block
                || b.top + b.height > self.grid_h
                || b.left + b.width > self.grid_w
            {
                return Err(Error::invalid(format!("bad block {b:?}")));
            }
            for c in b.cells(self.grid_w) {
                union[c] = true;
            }
        }
        if union != self.masked {
            return Err(Error::invalid("masked set is not the union of its blocks"));
        }
        Ok(())
    }
}

/// Smallest block, in patches, for a grid: 2x2 on small grids and 4x4 from
/// 12x12 upwards.
pub fn default_min_block(grid_h: usize, grid_w: usize) -> usize {
    if grid_h * grid_w >= 144 {
        16
    } else {
        4
    }
}

/// Allowed masked-patch counts `[ceil(ratio N), floor((ratio + slack) N)]`,
/// the upper end capped at `N`.
pub fn count_window(n: usize, ratio: f64) -> (usize, usize) {
    let lo = (ratio * n as f64 - 1e-9).ceil() as usize;
    let hi = (((ratio + RATIO_SLACK) * n as f64 + 1e-9).floor() as usize).min(n);
    (lo, hi)
}

pub fn sample_block_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    sample_block_mask_with(grid_h, grid_w, ratio, default_min_block(grid_h, grid_w), rng)
}

/// Block-wise masking: rectangles with area in `[min_block, 0.4 * unmasked]`
/// and log-uniform aspect are dropped at uniform positions until the count
/// reaches the target ratio. A block that would overshoot the upper bound or
/// adds nothing new is redrawn.
pub fn sample_block_mask_with<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    min_block: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1]")));
    }
    if grid_h < 2 || grid_w < 2 {
        return Err(Error::invalid(format!("grid {grid_h}x{grid_w} below 2x2")));
    }
    let n = grid_h * grid_w;
    let (lo, hi) = count_window(n, ratio);
    let min_block = min_block.max(1);
    if lo > hi || min_block > hi || !fits(min_block, grid_h, grid_w) {
        return Err(Error::invalid(format!(
            "cannot mask {lo}..={hi} of {n} patches with blocks of at least {min_block}"
        )));
    }
    let (ln_lo, ln_hi) = (MIN_ASPECT.ln(), MAX_ASPECT.ln());
    for _ in 0..MAX_ROUNDS {
        let mut masked = vec![false; n];
        let mut blocks = Vec::new();
        let mut count = 0;
        for _ in 0..ATTEMPTS_PER_ROUND {
            if count >= lo {
                return Ok(MaskPlan {
                    grid_h,
                    grid_w,
                    ratio,
                    min_block,
                    masked,
                    blocks,
                });
            }
            let cap = (0.4 * (n - count) as f64).max(min_block as f64);
            let area = rng.gen_range(min_block as f64..=cap);
            let aspect = rng.gen_range(ln_lo..ln_hi).exp();
            let h = (area * aspect).sqrt().round() as usize;
            let w = (area / aspect).sqrt().round() as usize;
            if h == 0 || w == 0 || h > grid_h || w > grid_w || h * w < min_block {
                continue;
            }
            let block = Block {
                top: rng.gen_range(0..=grid_h - h),
                left: rng.gen_range(0..=grid_w - w),
                height: h,
                width: w,
            };
            let fresh = block.cells(grid_w).filter(|&c| !masked[c]).count();
            if fresh == 0 || count + fresh > hi {
                continue;
            }
            for c in block.cells(grid_w) {
                masked[c] = true;
            }
            count += fresh;
            blocks.push(block);
        }
        if count >= lo {
            return Ok(MaskPlan {
                grid_h,
                grid_w,
                ratio,
                min_block,
                masked,
                blocks,
            });
        }
    }
    Err(Error::invalid(format!(
        "block sampler failed to reach {lo} of {n} patches"
    )))
}

fn fits(min_block: usize, grid_h: usize, grid_w: usize) -> bool {
    (1..=grid_h).any(|h| {
        let w = min_block.div_ceil(h);
        w <= grid_w
    })
}
