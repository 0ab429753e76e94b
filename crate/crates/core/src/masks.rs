//! Frame-grouped dual-window sparse patterns.
//!
//! A [`HeadMaskConfig`] partitions absolute frame distance `|t_k - t_q|` into
//! contiguous [`FrameGroup`]s. Each group carries a [`DualWindow`]: the union
//! of two axis-aligned boxes centred on the query's `(x, y)`. A key is a
//! member when the group for its frame distance has a window with
//! `|x_k - x_q| <= omega` and `|y_k - y_q| <= eta`.
//!
//! One window (or two nested ones) gives a local box; two windows with
//! `(omega1 - omega2) * (eta1 - eta2) < 0` give a cross; extents reaching the
//! frame size give global attention. A non-zero-distance group may have no
//! window at all, which suppresses those frames.

mod geometry;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::BlockMask;
use crate::error::{Error, Result};
use crate::layout::{Permutation, TokenCoord, VideoGrid};

pub use geometry::BlockGeometry;

/// Half-extents of a box around the query: columns (`omega`) and rows (`eta`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpatialWindow {
    pub omega: usize,
    pub eta: usize,
}

impl SpatialWindow {
    pub const fn new(omega: usize, eta: usize) -> Self {
        Self { omega, eta }
    }

    /// Window reaching every token of a frame from any query position.
    pub fn full(grid: &VideoGrid) -> Self {
        Self {
            omega: grid.w - 1,
            eta: grid.h - 1,
        }
    }

    #[inline]
    pub fn covers(&self, dx: usize, dy: usize) -> bool {
        dx <= self.omega && dy <= self.eta
    }

    pub fn contains(&self, other: &SpatialWindow) -> bool {
        self.omega >= other.omega && self.eta >= other.eta
    }

    fn max(self, other: SpatialWindow) -> SpatialWindow {
        SpatialWindow {
            omega: self.omega.max(other.omega),
            eta: self.eta.max(other.eta),
        }
    }
}

/// Union of up to two spatial windows. Both absent means the group is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DualWindow {
    pub w1: Option<SpatialWindow>,
    pub w2: Option<SpatialWindow>,
}

impl DualWindow {
    pub const EMPTY: DualWindow = DualWindow { w1: None, w2: None };

    pub const fn single(w: SpatialWindow) -> Self {
        Self {
            w1: Some(w),
            w2: None,
        }
    }

    pub const fn pair(w1: SpatialWindow, w2: SpatialWindow) -> Self {
        Self {
            w1: Some(w1),
            w2: Some(w2),
        }
    }

    /// Both slots set to the same box.
    pub const fn boxed(w: SpatialWindow) -> Self {
        Self::pair(w, w)
    }

    pub fn full(grid: &VideoGrid) -> Self {
        Self::boxed(SpatialWindow::full(grid))
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_none() && self.w2.is_none()
    }

    #[inline]
    pub fn covers(&self, dx: usize, dy: usize) -> bool {
        self.w1.is_some_and(|w| w.covers(dx, dy)) || self.w2.is_some_and(|w| w.covers(dx, dy))
    }

    pub fn windows(&self) -> impl Iterator<Item = SpatialWindow> {
        self.w1.into_iter().chain(self.w2)
    }

    /// Both windows present with complementary axis dominance.
    pub fn is_cross(&self) -> bool {
        match (self.w1, self.w2) {
            (Some(a), Some(b)) => {
                (a.omega as i64 - b.omega as i64) * (a.eta as i64 - b.eta as i64) < 0
            }
            _ => false,
        }
    }

    /// Largest column and row half-extents over both windows.
    pub fn bounding(&self) -> Option<SpatialWindow> {
        self.windows().reduce(SpatialWindow::max)
    }

    /// Number of `(|dx|, |dy|)` offset cells covered inside an `h x w` frame.
    pub fn offset_area(&self, grid: &VideoGrid) -> usize {
        let clip = |w: SpatialWindow| SpatialWindow {
            omega: w.omega.min(grid.w - 1),
            eta: w.eta.min(grid.h - 1),
        };
        let cells = |w: SpatialWindow| (w.omega + 1) * (w.eta + 1);
        match (self.w1.map(clip), self.w2.map(clip)) {
            (None, None) => 0,
            (Some(a), None) | (None, Some(a)) => cells(a),
            (Some(a), Some(b)) => {
                let inter = SpatialWindow {
                    omega: a.omega.min(b.omega),
                    eta: a.eta.min(b.eta),
                };
                cells(a) + cells(b) - cells(inter)
            }
        }
    }

    /// Slot-wise componentwise maximum; an absent slot contributes nothing.
    pub fn union(&self, other: &DualWindow) -> DualWindow {
        let slot = |a: Option<SpatialWindow>, b: Option<SpatialWindow>| match (a, b) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, None) => a,
            (None, b) => b,
        };
        DualWindow {
            w1: slot(self.w1, other.w1),
            w2: slot(self.w2, other.w2),
        }
    }
}

/// Inclusive range of absolute frame distances sharing one dual window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameGroup {
    pub d_lo: usize,
    pub d_hi: usize,
    #[serde(flatten)]
    pub window: DualWindow,
}

impl FrameGroup {
    #[inline]
    pub fn contains_distance(&self, d: usize) -> bool {
        self.d_lo <= d && d <= self.d_hi
    }
}

/// Start distances of the frame groups, e.g. `[0, 1, 3, 7]` for
/// `{0}, {1-2}, {3-6}, {7+}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupBoundaries(Vec<usize>);

impl GroupBoundaries {
    pub fn new(starts: Vec<usize>) -> Result<Self> {
        if starts.first() != Some(&0) {
            return Err(Error::InvalidParameter {
                field: "group_boundaries",
                reason: "must start at distance 0".into(),
            });
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter {
                field: "group_boundaries",
                reason: format!("must be strictly increasing, got {starts:?}"),
            });
        }
        Ok(Self(starts))
    }

    /// A single group spanning every distance.
    pub fn single() -> Self {
        Self(vec![0])
    }

    pub fn starts(&self) -> &[usize] {
        &self.0
    }

    /// Inclusive `(d_lo, d_hi)` ranges clipped to the distances of `grid`.
    pub fn partition(&self, grid: &VideoGrid) -> Vec<(usize, usize)> {
        let max_d = grid.f - 1;
        let starts: Vec<usize> = self.0.iter().copied().filter(|&s| s <= max_d).collect();
        starts
            .iter()
            .enumerate()
            .map(|(i, &lo)| {
                let hi = starts.get(i + 1).map_or(max_d, |next| next - 1);
                (lo, hi)
            })
            .collect()
    }
}

impl Default for GroupBoundaries {
    fn default() -> Self {
        Self(vec![0, 1, 3, 7])
    }
}

impl std::fmt::Display for GroupBoundaries {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for GroupBoundaries {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let starts = s
            .split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| Error::InvalidParameter {
                    field: "group_boundaries",
                    reason: format!("not an integer: {p:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GroupBoundaries::new(starts)
    }
}

/// Sparse geometry of one attention head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawHeadConfig", into = "RawHeadConfig")]
pub struct HeadMaskConfig {
    groups: Vec<FrameGroup>,
}

#[derive(Serialize, Deserialize)]
struct RawHeadConfig {
    groups: Vec<FrameGroup>,
}

impl TryFrom<RawHeadConfig> for HeadMaskConfig {
    type Error = Error;

    fn try_from(raw: RawHeadConfig) -> Result<Self> {
        HeadMaskConfig::new(raw.groups)
    }
}

impl From<HeadMaskConfig> for RawHeadConfig {
    fn from(c: HeadMaskConfig) -> Self {
        RawHeadConfig { groups: c.groups }
    }
}

impl HeadMaskConfig {
    /// Checks that groups start at distance 0, are contiguous and ordered,
    /// and that the distance-0 group has a window.
    pub fn new(groups: Vec<FrameGroup>) -> Result<Self> {
        let Some(first) = groups.first() else {
            return Err(Error::InvariantViolation("config has no frame groups".into()));
        };
        if first.d_lo != 0 {
            return Err(Error::InvariantViolation(format!(
                "first frame group starts at distance {}, expected 0",
                first.d_lo
            )));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.d_lo > g.d_hi {
                return Err(Error::InvariantViolation(format!(
                    "group {i}: d_lo {} > d_hi {}",
                    g.d_lo, g.d_hi
                )));
            }
            if i > 0 && g.d_lo != groups[i - 1].d_hi + 1 {
                return Err(Error::InvariantViolation(format!(
                    "group {i} starts at {} but previous group ends at {}: groups must be disjoint and contiguous",
                    g.d_lo,
                    groups[i - 1].d_hi
                )));
            }
        }
        if first.window.is_empty() {
            return Err(Error::InvariantViolation(
                "the distance-0 group has no window; every query row would be empty".into(),
            ));
        }
        Ok(Self { groups })
    }

    /// Same window in every group of `boundaries`.
    pub fn uniform(grid: &VideoGrid, boundaries: &GroupBoundaries, window: DualWindow) -> Result<Self> {
        Self::new(
            boundaries
                .partition(grid)
                .into_iter()
                .map(|(d_lo, d_hi)| FrameGroup { d_lo, d_hi, window })
                .collect(),
        )
    }

    pub fn groups(&self) -> &[FrameGroup] {
        &self.groups
    }

    /// Checks that the groups cover every frame distance of `grid`.
    pub fn validate_for(&self, grid: &VideoGrid) -> Result<()> {
        let last = self.groups.last().expect("non-empty by construction");
        if last.d_hi < grid.f - 1 {
            return Err(Error::InvariantViolation(format!(
                "frame groups cover distances up to {}, grid has {} frames",
                last.d_hi, grid.f
            )));
        }
        Ok(())
    }

    pub fn group_for_distance(&self, d: usize) -> Option<&FrameGroup> {
        self.groups.iter().find(|g| g.contains_distance(d))
    }

    pub fn group_index_for_distance(&self, d: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains_distance(d))
    }

    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        self.groups.iter().map(|g| (g.d_lo, g.d_hi)).collect()
    }

    pub fn same_boundaries(&self, other: &HeadMaskConfig) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.d_lo == b.d_lo && a.d_hi == b.d_hi)
    }

    /// Replaces the window of group `index`; the result is re-validated.
    pub fn with_window(&self, index: usize, window: DualWindow) -> Result<Self> {
        let mut groups = self.groups.clone();
        let g = groups.get_mut(index).ok_or(Error::OutOfRange {
            index,
            len: self.groups.len(),
        })?;
        g.window = window;
        Self::new(groups)
    }

    pub(crate) fn set_window_unchecked(&mut self, index: usize, window: DualWindow) {
        self.groups[index].window = window;
    }
}

/// Configs spanning every frame group with a full-frame window.
pub fn full_config(grid: &VideoGrid, boundaries: &GroupBoundaries) -> HeadMaskConfig {
    HeadMaskConfig::uniform(grid, boundaries, DualWindow::full(grid))
        .expect("full windows always satisfy config invariants")
}

/// Whether key `k` is inside the sparse region of query `q`.
pub fn member(config: &HeadMaskConfig, _grid: &VideoGrid, q: TokenCoord, k: TokenCoord) -> bool {
    let d = q.t.abs_diff(k.t);
    config
        .group_for_distance(d)
        .is_some_and(|g| g.window.covers(q.x.abs_diff(k.x), q.y.abs_diff(k.y)))
}

/// Block `(I, J)` is allowed iff some query token of `I` has a member key in `J`.
pub fn rasterize(
    config: &HeadMaskConfig,
    grid: &VideoGrid,
    perm: &Permutation,
    block_size: usize,
) -> Result<BlockMask> {
    BlockGeometry::new(grid, perm, block_size)?.rasterize(config)
}

/// Fraction of blocks that are skipped.
pub fn sparsity(mask: &BlockMask) -> f64 {
    (mask.total_blocks() - mask.count_allowed()) as f64 / mask.total_blocks() as f64
}

/// Group-wise, slot-wise maximum of extents. The result's region contains
/// both inputs' regions.
pub fn union(a: &HeadMaskConfig, b: &HeadMaskConfig) -> Result<HeadMaskConfig> {
    if !a.same_boundaries(b) {
        return Err(Error::GroupBoundaryMismatch);
    }
    HeadMaskConfig::new(
        a.groups
            .iter()
            .zip(&b.groups)
            .map(|(ga, gb)| FrameGroup {
                d_lo: ga.d_lo,
                d_hi: ga.d_hi,
                window: ga.window.union(&gb.window),
            })
            .collect(),
    )
}

/// One cached config applied to an inclusive range of denoising steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub step_lo: usize,
    pub step_hi: usize,
    pub config: HeadMaskConfig,
}

/// What a head runs at a given denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMask<'a> {
    Dense,
    Sparse(&'a HeadMaskConfig),
}

/// Per-(layer, head) configs over step ranges, after a dense warm-up prefix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelMaskSchedule {
    full_prefix: usize,
    entries: BTreeMap<(usize, usize), Vec<ScheduleEntry>>,
}

impl ModelMaskSchedule {
    /// Validates that each head's ranges are ordered, disjoint, start right
    /// after the dense prefix and leave no gaps, and that every head ends on
    /// the same step.
    pub fn new(
        full_prefix: usize,
        entries: BTreeMap<(usize, usize), Vec<ScheduleEntry>>,
    ) -> Result<Self> {
        let mut end: Option<usize> = None;
        for (&(layer, head), ranges) in &entries {
            let ctx = |msg: String| {
                Error::InvariantViolation(format!("layer {layer}, head {head}: {msg}"))
            };
            let mut sorted: Vec<&ScheduleEntry> = ranges.iter().collect();
            sorted.sort_by_key(|e| e.step_lo);
            let mut next = full_prefix;
            for e in &sorted {
                if e.step_lo > e.step_hi {
                    return Err(ctx(format!("step_lo {} > step_hi {}", e.step_lo, e.step_hi)));
                }
                if e.step_lo < next {
                    return Err(ctx(format!(
                        "step range {}..={} overlaps the dense prefix or a previous range",
                        e.step_lo, e.step_hi
                    )));
                }
                if e.step_lo > next {
                    return Err(ctx(format!("steps {next}..{} are not covered", e.step_lo)));
                }
                next = e.step_hi + 1;
            }
            match end {
                None => end = Some(next),
                Some(prev) if prev != next => {
                    return Err(ctx(format!(
                        "covers steps up to {}, other heads up to {}",
                        next - 1,
                        prev - 1
                    )))
                }
                _ => {}
            }
        }
        let entries = entries
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by_key(|e| e.step_lo);
                (k, v)
            })
            .collect();
        Ok(Self {
            full_prefix,
            entries,
        })
    }

    pub fn full_prefix(&self) -> usize {
        self.full_prefix
    }

    pub fn entries(&self) -> &BTreeMap<(usize, usize), Vec<ScheduleEntry>> {
        &self.entries
    }

    /// One past the last covered step.
    pub fn total_steps(&self) -> usize {
        self.entries
            .values()
            .filter_map(|v| v.last())
            .map(|e| e.step_hi + 1)
            .max()
            .unwrap_or(self.full_prefix)
    }

    pub fn is_entirely_dense(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }

    pub fn lookup(&self, layer: usize, head: usize, step: usize) -> Option<StepMask<'_>> {
        if step < self.full_prefix {
            return Some(StepMask::Dense);
        }
        self.entries
            .get(&(layer, head))?
            .iter()
            .find(|e| e.step_lo <= step && step <= e.step_hi)
            .map(|e| StepMask::Sparse(&e.config))
    }
}
