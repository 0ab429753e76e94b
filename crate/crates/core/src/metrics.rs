//! Measurements over attention maps and block masks.
//!
//! Probability maps carry their grid and the permutation describing the token
//! order of their rows and columns, so spatial and temporal analysis always
//! works in lattice coordinates no matter how the map is flattened.

use serde::{Deserialize, Serialize};

use crate::attention::BlockMask;
use crate::error::{Error, Result};
use crate::layout::{Permutation, TokenCoord, VideoGrid};
use crate::masks::{DualWindow, SpatialWindow};
use crate::tensor::Matrix;

/// Row-sum tolerance for probability maps.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Offset-space coverage above which a head is labelled global.
pub const GLOBAL_AREA_FRACTION: f64 = 0.85;
/// Minimum elongation ratio between the two fitted windows of a cross.
pub const CROSS_ASPECT_RATIO: f64 = 4.0;
/// Max/min ratio of the per-distance profile above which a head is time-variant.
pub const TEMPORAL_RATIO_THRESHOLD: f64 = 2.0;

/// Post-softmax attention probabilities of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbMap {
    probs: Matrix,
    grid: VideoGrid,
    perm: Permutation,
}

impl AttentionProbMap {
    pub fn new(probs: Matrix, grid: VideoGrid, perm: Permutation) -> Result<Self> {
        grid.validate()?;
        let n = grid.tokens();
        if probs.shape() != (n, n) || perm.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "map {:?} with permutation of length {} for grid {grid} ({n} tokens)",
                probs.shape(),
                perm.len()
            )));
        }
        for r in 0..n {
            let row = probs.row(r);
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvariantViolation(format!(
                    "row {r} has a negative or non-finite probability"
                )));
            }
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::NotRowStochastic { row: r, sum });
            }
        }
        Ok(Self { probs, grid, perm })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn grid(&self) -> &VideoGrid {
        &self.grid
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    /// Lattice coordinate of the token at sequence position `pos`.
    #[inline]
    pub fn coord_at(&self, pos: usize) -> TokenCoord {
        self.grid.coord_unchecked(self.perm.raster_at(pos))
    }

    /// The same map expressed in another token order.
    pub fn reordered(&self, target: &Permutation) -> Result<Self> {
        if target.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "permutation of length {} for a map of {} tokens",
                target.len(),
                self.len()
            )));
        }
        let step: Vec<usize> = (0..self.len())
            .map(|pos| target.position_of(self.perm.raster_at(pos)))
            .collect();
        let step = Permutation::from_forward(step)?;
        Ok(Self {
            probs: self.probs.permute_square(&step)?,
            grid: self.grid,
            perm: target.clone(),
        })
    }

    fn row_total(&self, r: usize) -> f64 {
        self.probs.row(r).iter().map(|&p| p as f64).sum()
    }

    /// Per block pair (row-major), the mass of row-normalised probabilities
    /// divided by the number of rows. Summing every entry gives 1.
    pub fn block_masses(&self, block_size: usize) -> Vec<f64> {
        let n = self.len();
        let nb = n.div_ceil(block_size);
        let mut out = vec![0.0; nb * nb];
        for r in 0..n {
            let inv = 1.0 / (self.row_total(r) * n as f64);
            let base = (r / block_size) * nb;
            for (kb, chunk) in self.probs.row(r).chunks(block_size).enumerate() {
                out[base + kb] += chunk.iter().map(|&p| p as f64).sum::<f64>() * inv;
            }
        }
        out
    }
}

/// Mean over query rows of the fraction of row mass inside allowed blocks.
pub fn recall(map: &AttentionProbMap, mask: &BlockMask) -> Result<f64> {
    let n = map.len();
    if mask.n_tokens() != n {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} tokens, map has {n}",
            mask.n_tokens()
        )));
    }
    let mut sum = 0.0;
    for r in 0..n {
        let row = map.probs.row(r);
        let qb = mask.block_of(r);
        let mut total = 0.0f64;
        let mut kept = 0.0f64;
        for (kb, chunk) in row.chunks(mask.block_size()).enumerate() {
            let m: f64 = chunk.iter().map(|&p| p as f64).sum();
            total += m;
            if mask.is_allowed(qb, kb) {
                kept += m;
            }
        }
        sum += if total > 0.0 { kept / total } else { 1.0 };
    }
    Ok(sum / n as f64)
}

/// Mean over rows of the smallest number of key blocks whose mass reaches
/// `target` of the row, divided by the number of key blocks.
pub fn topk_block_fraction(map: &AttentionProbMap, block_size: usize, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidParameter {
            field: "target",
            reason: format!("must be in (0, 1], got {target}"),
        });
    }
    if block_size == 0 {
        return Err(Error::InvalidParameter {
            field: "block_size",
            reason: "must be >= 1".into(),
        });
    }
    let n = map.len();
    let nb = n.div_ceil(block_size);
    let mut masses = Vec::with_capacity(nb);
    let mut counted = 0usize;
    for r in 0..n {
        masses.clear();
        masses.extend(
            map.probs
                .row(r)
                .chunks(block_size)
                .map(|c| c.iter().map(|&p| p as f64).sum::<f64>()),
        );
        let total: f64 = masses.iter().sum();
        masses.retain(|&m| m > 0.0);
        if target >= 1.0 {
            counted += masses.len();
            continue;
        }
        masses.sort_unstable_by(|a, b| b.total_cmp(a));
        let goal = target * total - 1e-12;
        let mut cum = 0.0;
        for (i, m) in masses.iter().enumerate() {
            cum += m;
            if cum >= goal {
                counted += i + 1;
                break;
            }
        }
    }
    Ok(counted as f64 / (n * nb) as f64)
}

/// `|a and b| / |a or b|`; two empty masks are identical and score 1.
pub fn jaccard(a: &BlockMask, b: &BlockMask) -> Result<f64> {
    if a.n_blocks() != b.n_blocks() {
        return Err(Error::ShapeMismatch(format!(
            "{0}x{0} vs {1}x{1} block grids",
            a.n_blocks(),
            b.n_blocks()
        )));
    }
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpatialPattern {
    Local,
    Cross,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemporalPattern {
    TimeVariant,
    TimeInvariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternLabel {
    pub spatial: SpatialPattern,
    pub temporal: TemporalPattern,
}

impl std::fmt::Display for SpatialPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpatialPattern::Local => "Local",
            SpatialPattern::Cross => "Cross",
            SpatialPattern::Global => "Global",
        })
    }
}

impl std::fmt::Display for TemporalPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TemporalPattern::TimeVariant => "TimeVariant",
            TemporalPattern::TimeInvariant => "TimeInvariant",
        })
    }
}

/// Smallest centred dual window that captures a given share of a map's mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialFit {
    pub window: DualWindow,
    /// Mean over queries of the fraction of a frame the window reaches.
    pub area_fraction: f64,
    /// Share of total mass inside the window.
    pub captured: f64,
}

impl SpatialFit {
    /// Elongation of window 1 divided by elongation of window 2, where
    /// elongation is `(2*omega + 1) / (2*eta + 1)`.
    pub fn aspect_ratio(&self) -> f64 {
        match (self.window.w1, self.window.w2) {
            (Some(a), Some(b)) => {
                let e = |w: SpatialWindow| (2 * w.omega + 1) as f64 / (2 * w.eta + 1) as f64;
                e(a) / e(b)
            }
            _ => 1.0,
        }
    }
}

/// Inclusive 2D prefix sum over `(|dy|, |dx|)` cells.
struct OffsetTable {
    w: usize,
    prefix: Vec<f64>,
}

impl OffsetTable {
    fn new(h: usize, w: usize, cells: &[f64]) -> Self {
        let mut prefix = vec![0.0; h * w];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += cells[y * w + x];
                prefix[y * w + x] = row + if y > 0 { prefix[(y - 1) * w + x] } else { 0.0 };
            }
        }
        Self { w, prefix }
    }

    #[inline]
    fn boxed(&self, omega: usize, eta: usize) -> f64 {
        self.prefix[eta * self.w + omega]
    }

    /// Union of boxes `(o1, e1)` and `(o2, e2)` with `o1 >= o2`, `e1 <= e2`.
    #[inline]
    fn union(&self, o1: usize, e1: usize, o2: usize, e2: usize) -> f64 {
        self.boxed(o1, e1) + self.boxed(o2, e2) - self.boxed(o2, e1)
    }
}

/// Fits the smallest dual window (by mean frame coverage) capturing
/// `extent_mass` of the map's row-normalised mass.
pub fn fit_spatial_extent(map: &AttentionProbMap, extent_mass: f64) -> SpatialFit {
    let g = map.grid;
    let (h, w) = (g.h, g.w);
    let n = map.len();
    let mut mass = vec![0.0f64; h * w];
    for r in 0..n {
        let q = map.coord_at(r);
        let inv = 1.0 / (map.row_total(r) * n as f64);
        for (c, &p) in map.probs.row(r).iter().enumerate() {
            if p > 0.0 {
                let k = map.coord_at(c);
                mass[q.y.abs_diff(k.y) * w + q.x.abs_diff(k.x)] += p as f64 * inv;
            }
        }
    }
    // Mean share of one frame reached at each absolute offset.
    let area_norm = 1.0 / ((h * w) as f64 * (h * w) as f64);
    let mut area = vec![0.0f64; h * w];
    for dy in 0..h {
        for dx in 0..w {
            let ny = (h - dy) * if dy > 0 { 2 } else { 1 };
            let nx = (w - dx) * if dx > 0 { 2 } else { 1 };
            area[dy * w + dx] = (ny * nx) as f64 * area_norm;
        }
    }
    let mass_t = OffsetTable::new(h, w, &mass);
    let area_t = OffsetTable::new(h, w, &area);
    let total = mass_t.boxed(w - 1, h - 1);
    let goal = extent_mass * total - 1e-12;

    let mut best: Option<(f64, f64, DualWindow)> = None;
    for o1 in 0..w {
        for o2 in 0..=o1 {
            for e1 in 0..h {
                for e2 in e1..h {
                    let m = mass_t.union(o1, e1, o2, e2);
                    if m < goal {
                        continue;
                    }
                    let a = area_t.union(o1, e1, o2, e2);
                    let better = match best {
                        None => true,
                        Some((ba, bm, _)) => a < ba - 1e-15 || (a <= ba + 1e-15 && m > bm),
                    };
                    if better {
                        let window = if o1 == o2 || e1 == e2 {
                            DualWindow::boxed(SpatialWindow::new(o1, e2))
                        } else {
                            DualWindow::pair(SpatialWindow::new(o1, e1), SpatialWindow::new(o2, e2))
                        };
                        best = Some((a, m, window));
                    }
                }
            }
        }
    }
    let (area_fraction, captured, window) = best.expect("the full window always qualifies");
    SpatialFit {
        window,
        area_fraction,
        captured: if total > 0.0 { captured / total } else { 1.0 },
    }
}

/// Global if the fitted window reaches more than 85% of a frame, cross if it
/// is a cross with elongation ratio at least 4, local otherwise.
pub fn classify_spatial(map: &AttentionProbMap, extent_mass: f64) -> SpatialPattern {
    let fit = fit_spatial_extent(map, extent_mass);
    if fit.area_fraction > GLOBAL_AREA_FRACTION {
        SpatialPattern::Global
    } else if fit.window.is_cross() && fit.aspect_ratio() >= CROSS_ASPECT_RATIO {
        SpatialPattern::Cross
    } else {
        SpatialPattern::Local
    }
}

/// Mean probability per token pair at each absolute frame distance.
pub fn temporal_profile(map: &AttentionProbMap) -> Vec<f64> {
    let g = map.grid;
    let n = map.len();
    let mut mass = vec![0.0f64; g.f];
    for r in 0..n {
        let qt = map.coord_at(r).t;
        let inv = 1.0 / map.row_total(r);
        for (c, &p) in map.probs.row(r).iter().enumerate() {
            mass[qt.abs_diff(map.coord_at(c).t)] += p as f64 * inv;
        }
    }
    let area = (g.frame_area() * g.frame_area()) as f64;
    mass.iter()
        .enumerate()
        .map(|(d, m)| {
            let frame_pairs = if d == 0 { g.f } else { 2 * (g.f - d) };
            m / (frame_pairs as f64 * area)
        })
        .collect()
}

pub fn classify_temporal(map: &AttentionProbMap) -> Result<TemporalPattern> {
    classify_temporal_with(map, TEMPORAL_RATIO_THRESHOLD)
}

/// Time-variant iff the max/min ratio of [`temporal_profile`] exceeds `ratio_threshold`.
pub fn classify_temporal_with(map: &AttentionProbMap, ratio_threshold: f64) -> Result<TemporalPattern> {
    if map.grid.f < 2 {
        return Err(Error::SingleFrame);
    }
    let profile = temporal_profile(map);
    let max = profile.iter().copied().fold(0.0, f64::max);
    let min = profile.iter().copied().fold(f64::INFINITY, f64::min);
    let variant = if min <= 0.0 { max > 0.0 } else { max / min > ratio_threshold };
    Ok(if variant {
        TemporalPattern::TimeVariant
    } else {
        TemporalPattern::TimeInvariant
    })
}

/// Both labels; single-frame maps are reported as time-invariant.
pub fn classify(map: &AttentionProbMap, extent_mass: f64) -> PatternLabel {
    PatternLabel {
        spatial: classify_spatial(map, extent_mass),
        temporal: classify_temporal(map).unwrap_or(TemporalPattern::TimeInvariant),
    }
}

pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// `10 log10(max_val^2 / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Matrix, b: &Matrix, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::InvalidParameter {
            field: "max_val",
            reason: format!("must be > 0, got {max_val}"),
        });
    }
    let e = mse(a, b)?;
    Ok(if e == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / e).log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{raster_order, tile_order, TileShape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_map(g: VideoGrid) -> AttentionProbMap {
        let n = g.tokens();
        AttentionProbMap::new(Matrix::from_fn(n, n, |_, _| 1.0 / n as f32), g, raster_order(&g))
            .unwrap()
    }

    fn random_map(seed: u64, g: VideoGrid) -> AttentionProbMap {
        let n = g.tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::from_fn(n, n, |_, _| rng.gen_range(0.0f32..1.0).powi(4));
        for r in 0..n {
            let s: f32 = m.row(r).iter().sum();
            m.row_mut(r).iter_mut().for_each(|p| *p /= s);
        }
        AttentionProbMap::new(m, g, raster_order(&g)).unwrap()
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let g = VideoGrid::new(1, 2, 2).unwrap();
        let m = Matrix::from_fn(4, 4, |_, _| 0.3);
        assert!(matches!(
            AttentionProbMap::new(m, g, raster_order(&g)),
            Err(Error::NotRowStochastic { row: 0, .. })
        ));
    }

    #[test]
    fn recall_examples() {
        let g = VideoGrid::new(2, 4, 4).unwrap();
        let map = uniform_map(g);
        assert_eq!(recall(&map, &BlockMask::full(32, 8).unwrap()).unwrap(), 1.0);
        let half = BlockMask::from_fn(32, 8, |_, j| j % 2 == 0).unwrap();
        assert!((recall(&map, &half).unwrap() - 0.5).abs() < 1e-12);
        assert!(recall(&map, &BlockMask::full(16, 8).unwrap()).is_err());
    }

    #[test]
    fn topk_examples() {
        let g = VideoGrid::new(1, 8, 8).unwrap();
        let map = uniform_map(g);
        // 8 blocks per row: ceil(0.95 * 8) = 8.
        assert_eq!(topk_block_fraction(&map, 8, 0.95).unwrap(), 1.0);
        // 20 blocks of 3 tokens (last one ragged) is not uniform per block,
        // so use 16 blocks of 4: ceil(0.95 * 16) = 16.
        assert_eq!(topk_block_fraction(&map, 4, 0.95).unwrap(), 1.0);
        // 64 blocks: ceil(0.95 * 64) = 61.
        assert_eq!(topk_block_fraction(&map, 1, 0.95).unwrap(), 61.0 / 64.0);

        let n = 16;
        let g = VideoGrid::new(1, 4, 4).unwrap();
        let one_hot = Matrix::from_fn(n, n, |r, c| if c == (r * 7) % n { 1.0 } else { 0.0 });
        let map = AttentionProbMap::new(one_hot, g, raster_order(&g)).unwrap();
        assert_eq!(topk_block_fraction(&map, 4, 0.95).unwrap(), 0.25);
        assert!(topk_block_fraction(&map, 4, 0.0).is_err());
    }

    /// Per-row greedy count by explicit sorting, independent of the library path.
    fn topk_oracle(map: &AttentionProbMap, bs: usize, target: f64) -> f64 {
        let n = map.len();
        let nb = n.div_ceil(bs);
        let mut total_count = 0;
        for r in 0..n {
            let mut blocks: Vec<f64> = vec![0.0; nb];
            for c in 0..n {
                blocks[c / bs] += map.probs().get(r, c) as f64;
            }
            let row_sum: f64 = blocks.iter().sum();
            blocks.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut acc = 0.0;
            let mut k = 0;
            while acc < target * row_sum - 1e-12 {
                acc += blocks[k];
                k += 1;
            }
            total_count += k;
        }
        total_count as f64 / (n * nb) as f64
    }

    #[test]
    fn topk_matches_sorting_oracle() {
        let g = VideoGrid::new(1, 8, 8).unwrap();
        for seed in 0..5 {
            let map = random_map(seed, g);
            for target in [0.5, 0.8, 0.95] {
                assert_eq!(
                    topk_block_fraction(&map, 8, target).unwrap(),
                    topk_oracle(&map, 8, target)
                );
            }
        }
    }

    #[test]
    fn jaccard_examples() {
        let a = BlockMask::from_fn(4, 1, |i, j| i == j).unwrap();
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let b = BlockMask::from_fn(4, 1, |i, j| i != j).unwrap();
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
        let small = BlockMask::from_bits(2, 1, vec![true, true, true, false]).unwrap();
        let big = BlockMask::full(2, 1).unwrap();
        assert_eq!(jaccard(&small, &big).unwrap(), 0.75);
        let e = BlockMask::empty(2, 1).unwrap();
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(jaccard(&a, &big).is_err());
    }

    #[test]
    fn uniform_map_labels() {
        let g = VideoGrid::new(3, 8, 8).unwrap();
        let map = uniform_map(g);
        assert_eq!(classify_spatial(&map, 0.85), SpatialPattern::Global);
        assert_eq!(classify_temporal(&map).unwrap(), TemporalPattern::TimeInvariant);
        let p = temporal_profile(&map);
        assert!(p.iter().all(|&v| (v / p[0] - 1.0).abs() < 1e-9));
    }

    #[test]
    fn single_frame_temporal_error() {
        let map = uniform_map(VideoGrid::new(1, 4, 4).unwrap());
        assert!(matches!(classify_temporal(&map), Err(Error::SingleFrame)));
    }

    #[test]
    fn mse_psnr_examples() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32 * 0.1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Matrix::from_fn(3, 4, |r, c| a.get(r, c) + 1.0);
        assert!((mse(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        assert!(mse(&a, &Matrix::zeros(4, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_fn(5, 7, |_, _| rng.gen_range(0.0f32..1.0));
        let y = Matrix::from_fn(5, 7, |_, _| rng.gen_range(0.0f32..1.0));
        let mut acc = 0.0f64;
        for r in 0..5 {
            for c in 0..7 {
                let d = x.get(r, c) as f64 - y.get(r, c) as f64;
                acc += d * d;
            }
        }
        let want_mse = acc / 35.0;
        assert!((mse(&x, &y).unwrap() - want_mse).abs() < 1e-12);
        let want_psnr = 10.0 * (1.0 / want_mse).log10();
        assert!((psnr(&x, &y, 1.0).unwrap() - want_psnr).abs() < 1e-9);
    }

    #[test]
    fn reorder_roundtrip() {
        let g = VideoGrid::new(2, 4, 4).unwrap();
        let map = random_map(3, g);
        let tiled = map.reordered(&tile_order(&g, &TileShape::new(1, 2, 2).unwrap()).unwrap()).unwrap();
        assert_ne!(tiled.probs(), map.probs());
        assert_eq!(tiled.reordered(&raster_order(&g)).unwrap(), map);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn recall_full_is_one_and_monotone(seed in any::<u64>(), bs in 1usize..9) {
            let g = VideoGrid::new(2, 3, 4).unwrap();
            let map = random_map(seed, g);
            let n = g.tokens();
            prop_assert!((recall(&map, &BlockMask::full(n, bs).unwrap()).unwrap() - 1.0).abs() <= 1e-6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let b = BlockMask::from_fn(n, bs, |_, _| rng.gen_bool(0.6)).unwrap();
            let a = BlockMask::from_fn(n, bs, |i, j| b.is_allowed(i, j) && rng.gen_bool(0.5)).unwrap();
            prop_assert!(recall(&map, &a).unwrap() <= recall(&map, &b).unwrap() + 1e-12);
        }

        #[test]
        fn jaccard_symmetric_and_one_iff_equal(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = BlockMask::from_fn(6, 1, |_, _| rng.gen_bool(0.5)).unwrap();
            let b = BlockMask::from_fn(6, 1, |_, _| rng.gen_bool(0.5)).unwrap();
            prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
            prop_assert_eq!(jaccard(&a, &b).unwrap() == 1.0, a == b);
        }

        #[test]
        fn topk_full_target_counts_nonzero_blocks(seed in any::<u64>(), bs in 1usize..6) {
            let g = VideoGrid::new(1, 4, 5).unwrap();
            let n = g.tokens();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Matrix::from_fn(n, n, |_, _| if rng.gen_bool(0.3) { rng.gen_range(0.1f32..1.0) } else { 0.0 });
            for r in 0..n {
                m.set(r, r, 1.0);
                let s: f32 = m.row(r).iter().sum();
                m.row_mut(r).iter_mut().for_each(|p| *p /= s);
            }
            let map = AttentionProbMap::new(m.clone(), g, raster_order(&g)).unwrap();
            let nb = n.div_ceil(bs);
            let nonzero: usize = (0..n)
                .map(|r| m.row(r).chunks(bs).filter(|c| c.iter().any(|&p| p > 0.0)).count())
                .sum();
            prop_assert_eq!(topk_block_fraction(&map, bs, 1.0).unwrap(), nonzero as f64 / (n * nb) as f64);
        }

        #[test]
        fn spatial_label_ignores_token_order(seed in any::<u64>()) {
            let g = VideoGrid::new(2, 4, 4).unwrap();
            let map = random_map(seed, g);
            let tiled = map.reordered(&tile_order(&g, &TileShape::new(1, 2, 2).unwrap()).unwrap()).unwrap();
            prop_assert_eq!(classify_spatial(&map, 0.85), classify_spatial(&tiled, 0.85));
            prop_assert_eq!(classify_temporal(&map).unwrap(), classify_temporal(&tiled).unwrap());
        }
    }
}
