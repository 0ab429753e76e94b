//! Precomputed block-pair offset frontiers.
//!
//! Whether a block pair is allowed under ANY semantics depends only on the
//! set of `(|dt|, |dx|, |dy|)` offsets realised by its token pairs, and since
//! membership is antitone in `|dx|` and `|dy|`, only the Pareto-minimal
//! `(|dx|, |dy|)` points per frame distance matter. Block pairs with the same
//! minimal set always agree, so they are collapsed into one class; evaluating
//! a config is then one pass over the classes.

use std::collections::HashMap;

use crate::attention::BlockMask;
use crate::error::{Error, Result};
use crate::layout::{Permutation, TokenCoord, VideoGrid};

use super::{DualWindow, HeadMaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Offset {
    d: u32,
    dx: u32,
    dy: u32,
}

#[derive(Debug, Clone)]
pub struct BlockGeometry {
    grid: VideoGrid,
    n_tokens: usize,
    block_size: usize,
    n_blocks: usize,
    classes: Vec<Vec<Offset>>,
    class_of: Vec<u32>,
    class_count: Vec<usize>,
}

/// Keeps `frontier` as the minimal elements of the inserted points, per `d`.
fn insert_minimal(frontier: &mut Vec<Offset>, p: Offset) {
    if frontier
        .iter()
        .any(|o| o.d == p.d && o.dx <= p.dx && o.dy <= p.dy)
    {
        return;
    }
    frontier.retain(|o| !(o.d == p.d && p.dx <= o.dx && p.dy <= o.dy));
    frontier.push(p);
}

impl BlockGeometry {
    pub fn new(grid: &VideoGrid, perm: &Permutation, block_size: usize) -> Result<Self> {
        grid.validate()?;
        let n = grid.tokens();
        if perm.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "permutation of length {} for a grid of {n} tokens",
                perm.len()
            )));
        }
        if block_size == 0 {
            return Err(Error::InvalidParameter {
                field: "block_size",
                reason: "must be >= 1".into(),
            });
        }
        let n_blocks = n.div_ceil(block_size);
        let coords: Vec<TokenCoord> = (0..n)
            .map(|pos| grid.coord_unchecked(perm.raster_at(pos)))
            .collect();

        let mut index: HashMap<Vec<Offset>, u32> = HashMap::new();
        let mut classes = Vec::new();
        let mut class_count = Vec::new();
        let mut class_of = Vec::with_capacity(n_blocks * n_blocks);
        let mut frontier = Vec::new();
        for qb in 0..n_blocks {
            let qs = &coords[qb * block_size..((qb + 1) * block_size).min(n)];
            for kb in 0..n_blocks {
                let ks = &coords[kb * block_size..((kb + 1) * block_size).min(n)];
                frontier.clear();
                for q in qs {
                    for k in ks {
                        insert_minimal(
                            &mut frontier,
                            Offset {
                                d: q.t.abs_diff(k.t) as u32,
                                dx: q.x.abs_diff(k.x) as u32,
                                dy: q.y.abs_diff(k.y) as u32,
                            },
                        );
                    }
                }
                frontier.sort_unstable();
                let id = match index.get(&frontier) {
                    Some(&id) => id,
                    None => {
                        let id = classes.len() as u32;
                        index.insert(frontier.clone(), id);
                        classes.push(frontier.clone());
                        class_count.push(0);
                        id
                    }
                };
                class_count[id as usize] += 1;
                class_of.push(id);
            }
        }
        Ok(Self {
            grid: *grid,
            n_tokens: n,
            block_size,
            n_blocks,
            classes,
            class_of,
            class_count,
        })
    }

    pub fn grid(&self) -> &VideoGrid {
        &self.grid
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn total_blocks(&self) -> usize {
        self.class_of.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class index of every block pair, row-major.
    pub fn class_of(&self) -> &[u32] {
        &self.class_of
    }

    /// Number of block pairs in each class.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_count
    }

    /// Sums per-block-pair values (row-major) into per-class totals.
    pub fn accumulate(&self, per_block: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes.len()];
        for (&c, &v) in self.class_of.iter().zip(per_block) {
            out[c as usize] += v;
        }
        out
    }

    /// Frame-distance to window lookup; distances outside every group map to `None`.
    fn window_table(&self, config: &HeadMaskConfig) -> Vec<Option<DualWindow>> {
        (0..self.grid.f)
            .map(|d| config.group_for_distance(d).map(|g| g.window))
            .collect()
    }

    /// Allowed flag of every class under `config`.
    pub fn evaluate_classes(&self, config: &HeadMaskConfig, out: &mut Vec<bool>) {
        let table = self.window_table(config);
        out.clear();
        out.extend(self.classes.iter().map(|frontier| {
            frontier.iter().any(|o| {
                table[o.d as usize].is_some_and(|w| w.covers(o.dx as usize, o.dy as usize))
            })
        }));
    }

    pub fn mask_from_classes(&self, allowed: &[bool]) -> Result<BlockMask> {
        BlockMask::from_bits(
            self.n_tokens,
            self.block_size,
            self.class_of.iter().map(|&c| allowed[c as usize]).collect(),
        )
    }

    /// ANY-semantics block mask of `config`; fails if a query block is left empty.
    pub fn rasterize(&self, config: &HeadMaskConfig) -> Result<BlockMask> {
        config.validate_for(&self.grid)?;
        let mut allowed = Vec::new();
        self.evaluate_classes(config, &mut allowed);
        let mask = self.mask_from_classes(&allowed)?;
        mask.check_rows()?;
        Ok(mask)
    }
}
