//! Greedy boundary contraction of head configs.
//!
//! Search starts from [`full_config`] and repeatedly applies the candidate
//! move with the smallest recall lost per unit of cost saved. Cost is the
//! fraction of key blocks computed; recall is [`crate::metrics::recall`] of
//! the rasterised mask. Both are evaluated on offset classes of a
//! [`BlockGeometry`], so one candidate costs one pass over the classes.
//!
//! A group stops shrinking when its best move would push recall below `tau`
//! or its ratio exceeds `lambda`; search ends once every group has stopped.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{tile_order, Permutation, TileShape, VideoGrid};
use crate::masks::{
    full_config, union, BlockGeometry, DualWindow, GroupBoundaries, HeadMaskConfig,
    ModelMaskSchedule, ScheduleEntry, SpatialWindow,
};
use crate::metrics::{self, AttentionProbMap};

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 0.011;
pub const DEFAULT_STEP_REUSE: usize = 5;
pub const DEFAULT_FULL_PREFIX: usize = 15;

/// Which window shapes the search may produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchFamily {
    /// Per-group dual windows (boxes or crosses), groups may be disabled.
    #[default]
    DualWindow,
    /// Per-group single boxes, groups may be disabled.
    FrameGroupWise,
    /// One box shared by every enabled group; only the farthest enabled
    /// group may be disabled.
    Cubic,
}

impl std::fmt::Display for SearchFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DualWindow => "dual-window",
            Self::FrameGroupWise => "frame-group-wise",
            Self::Cubic => "cubic",
        })
    }
}

impl std::str::FromStr for SearchFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual-window" | "dual" => Ok(Self::DualWindow),
            "frame-group-wise" | "group" => Ok(Self::FrameGroupWise),
            "cubic" => Ok(Self::Cubic),
            _ => Err(Error::InvalidParameter {
                field: "family",
                reason: format!("expected dual-window, frame-group-wise or cubic, got {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub tau: f64,
    pub lambda: f64,
    pub tile: TileShape,
    pub block_size: usize,
    pub group_boundaries: GroupBoundaries,
    pub step_reuse_n: usize,
    pub full_prefix: usize,
    #[serde(default)]
    pub family: SearchFamily,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            tile: TileShape::default(),
            block_size: crate::attention::DEFAULT_BLOCK_SIZE,
            group_boundaries: GroupBoundaries::default(),
            step_reuse_n: DEFAULT_STEP_REUSE,
            full_prefix: DEFAULT_FULL_PREFIX,
            family: SearchFamily::default(),
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidParameter { field, reason });
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", format!("must be in (0, 1], got {}", self.tau));
        }
        if !(self.lambda > 0.0) {
            return bad("lambda", format!("must be > 0, got {}", self.lambda));
        }
        if self.block_size == 0 {
            return bad("block_size", "must be >= 1".into());
        }
        if self.step_reuse_n == 0 {
            return bad("step_reuse_n", "must be >= 1".into());
        }
        Ok(())
    }

    /// Token order the masks are rasterised in.
    pub fn permutation(&self, grid: &VideoGrid) -> Result<Permutation> {
        self.tile
            .check_divides(grid)
            .map_err(|e| Error::IncompatibleGrid(e.to_string()))?;
        tile_order(grid, &self.tile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

/// Window slot a shrink applies to. `Both` moves a box as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Both,
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MoveKind {
    Shrink { slot: Slot, axis: Axis },
    /// Splits a box into a cross by pulling in its four corners.
    CornerCut,
    /// Empties a non-zero-distance group.
    Disable,
}

/// One legal contraction. `steps` counts tile steps taken at once: the
/// smallest jump that changes the rasterised mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateMove {
    pub group: usize,
    #[serde(flatten)]
    pub kind: MoveKind,
    pub steps: usize,
    pub window: DualWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    RecallThreshold,
    CostThreshold,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    #[serde(rename = "move")]
    pub mv: CandidateMove,
    pub recall_after: f64,
    pub cost_after: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub initial_recall: f64,
    pub initial_cost: f64,
    pub steps: Vec<TraceStep>,
    /// Why each group stopped, indexed like the config's groups. Under the
    /// cubic family all entries share one reason.
    pub group_termination: Vec<Termination>,
    /// Reason of the group that stopped last.
    pub termination: Termination,
}

impl SearchTrace {
    pub fn final_recall(&self) -> f64 {
        self.steps.last().map_or(self.initial_recall, |s| s.recall_after)
    }

    pub fn final_cost(&self) -> f64 {
        self.steps.last().map_or(self.initial_cost, |s| s.cost_after)
    }
}

/// Recall and cost of configs on one map, evaluated per offset class.
pub struct Evaluator {
    geometry: BlockGeometry,
    class_mass: Vec<f64>,
    scratch: Vec<bool>,
}

impl Evaluator {
    /// `map` may be in any order; it is brought into `perm` first.
    pub fn new(map: &AttentionProbMap, perm: &Permutation, block_size: usize) -> Result<Self> {
        let geometry = BlockGeometry::new(map.grid(), perm, block_size)?;
        let masses = if map.perm() == perm {
            map.block_masses(block_size)
        } else {
            map.reordered(perm)?.block_masses(block_size)
        };
        let class_mass = geometry.accumulate(&masses);
        Ok(Self {
            geometry,
            class_mass,
            scratch: Vec::new(),
        })
    }

    pub fn geometry(&self) -> &BlockGeometry {
        &self.geometry
    }

    /// `(recall, cost)`; summation order is fixed, so shrinking a config
    /// never raises either value.
    pub fn evaluate(&mut self, config: &HeadMaskConfig) -> (f64, f64) {
        self.geometry.evaluate_classes(config, &mut self.scratch);
        let counts = self.geometry.class_counts();
        let mut recall = 0.0;
        let mut blocks = 0usize;
        for (c, &on) in self.scratch.iter().enumerate() {
            if on {
                recall += self.class_mass[c];
                blocks += counts[c];
            }
        }
        (recall, blocks as f64 / self.geometry.total_blocks() as f64)
    }
}

/// Smallest dual window equivalent to `w`: nested slots collapse to a box
/// and a cross keeps its wide window in slot one.
pub fn canonical(w: DualWindow) -> DualWindow {
    match (w.w1, w.w2) {
        (None, None) => DualWindow::EMPTY,
        (Some(a), None) | (None, Some(a)) => DualWindow::boxed(a),
        (Some(a), Some(b)) => {
            if a.contains(&b) {
                DualWindow::boxed(a)
            } else if b.contains(&a) {
                DualWindow::boxed(b)
            } else if a.omega > b.omega {
                DualWindow::pair(a, b)
            } else {
                DualWindow::pair(b, a)
            }
        }
    }
}

fn is_box(w: &DualWindow) -> bool {
    w.w1.is_some() && w.w1 == w.w2
}

struct Shrinker {
    sx: usize,
    sy: usize,
}

impl Shrinker {
    fn shrink(&self, w: SpatialWindow, axis: Axis, k: usize) -> SpatialWindow {
        match axis {
            Axis::X => SpatialWindow::new(w.omega.saturating_sub(k * self.sx), w.eta),
            Axis::Y => SpatialWindow::new(w.omega, w.eta.saturating_sub(k * self.sy)),
        }
    }

    /// Window after `k` steps of `kind`, or `None` if the move does not apply.
    fn apply(&self, w: DualWindow, kind: MoveKind, k: usize) -> Option<DualWindow> {
        let (a, b) = (w.w1?, w.w2?);
        let out = match kind {
            MoveKind::Shrink { slot: Slot::Both, axis } if is_box(&w) => {
                DualWindow::boxed(self.shrink(a, axis, k))
            }
            MoveKind::CornerCut if is_box(&w) && a.omega > 0 && a.eta > 0 => {
                DualWindow::pair(self.shrink(a, Axis::Y, k), self.shrink(a, Axis::X, k))
            }
            MoveKind::Shrink { slot: Slot::One, axis } if !is_box(&w) => {
                DualWindow::pair(self.shrink(a, axis, k), b)
            }
            MoveKind::Shrink { slot: Slot::Two, axis } if !is_box(&w) => {
                DualWindow::pair(a, self.shrink(b, axis, k))
            }
            _ => return None,
        };
        Some(canonical(out))
    }
}

const BOX_MOVES: [MoveKind; 2] = [
    MoveKind::Shrink { slot: Slot::Both, axis: Axis::X },
    MoveKind::Shrink { slot: Slot::Both, axis: Axis::Y },
];

const DUAL_MOVES: [MoveKind; 7] = [
    MoveKind::Shrink { slot: Slot::Both, axis: Axis::X },
    MoveKind::Shrink { slot: Slot::Both, axis: Axis::Y },
    MoveKind::Shrink { slot: Slot::One, axis: Axis::X },
    MoveKind::Shrink { slot: Slot::One, axis: Axis::Y },
    MoveKind::Shrink { slot: Slot::Two, axis: Axis::X },
    MoveKind::Shrink { slot: Slot::Two, axis: Axis::Y },
    MoveKind::CornerCut,
];

struct Scored {
    mv: CandidateMove,
    config: HeadMaskConfig,
    recall: f64,
    cost: f64,
    ratio: f64,
}

struct State<'a> {
    eval: &'a mut Evaluator,
    shrinker: Shrinker,
    family: SearchFamily,
    config: HeadMaskConfig,
    recall: f64,
    cost: f64,
}

impl State<'_> {
    /// Config with every group in `targets` set to `window`.
    fn with(&self, targets: &[usize], window: DualWindow) -> HeadMaskConfig {
        let mut c = self.config.clone();
        for &g in targets {
            c.set_window_unchecked(g, window);
        }
        c
    }

    fn score(&mut self, mv: CandidateMove, config: HeadMaskConfig) -> Option<Scored> {
        let (recall, cost) = self.eval.evaluate(&config);
        let saved = self.cost - cost;
        (saved > 0.0).then(|| {
            let lost = (self.recall - recall).max(0.0);
            Scored {
                mv,
                config,
                recall,
                cost,
                ratio: lost / saved,
            }
        })
    }

    /// Shrink by the fewest tile steps that saves cost.
    fn jump(&mut self, group: usize, targets: &[usize], kind: MoveKind) -> Option<Scored> {
        let start = self.config.groups()[group].window;
        let mut prev = start;
        for k in 1.. {
            let next = self.shrinker.apply(start, kind, k)?;
            if next == prev {
                return None;
            }
            let mv = CandidateMove {
                group,
                kind,
                steps: k,
                window: next,
            };
            let config = self.with(targets, next);
            if let Some(s) = self.score(mv, config) {
                return Some(s);
            }
            prev = next;
        }
        unreachable!()
    }

    /// Candidates of one freeze unit (a group, or all groups under cubic).
    fn candidates(&mut self, unit: usize) -> Vec<Scored> {
        let groups = self.config.groups().to_vec();
        let mut out = Vec::new();
        match self.family {
            SearchFamily::Cubic => {
                let enabled: Vec<usize> = (0..groups.len())
                    .filter(|&g| !groups[g].window.is_empty())
                    .collect();
                for kind in BOX_MOVES {
                    out.extend(self.jump(0, &enabled, kind));
                }
                if let Some(&last) = enabled.last().filter(|&&g| groups[g].d_lo > 0) {
                    let mv = CandidateMove {
                        group: last,
                        kind: MoveKind::Disable,
                        steps: 1,
                        window: DualWindow::EMPTY,
                    };
                    let config = self.with(&[last], DualWindow::EMPTY);
                    out.extend(self.score(mv, config));
                }
            }
            family => {
                let g = unit;
                if groups[g].window.is_empty() {
                    return out;
                }
                let kinds: &[MoveKind] = if family == SearchFamily::DualWindow {
                    &DUAL_MOVES
                } else {
                    &BOX_MOVES
                };
                for &kind in kinds {
                    out.extend(self.jump(g, &[g], kind));
                }
                if groups[g].d_lo > 0 {
                    let mv = CandidateMove {
                        group: g,
                        kind: MoveKind::Disable,
                        steps: 1,
                        window: DualWindow::EMPTY,
                    };
                    let config = self.with(&[g], DualWindow::EMPTY);
                    out.extend(self.score(mv, config));
                }
            }
        }
        out
    }
}

/// Lowest ratio first; near-ties go to the lexicographically first move.
fn best_of(cands: Vec<Scored>) -> Option<Scored> {
    let mut best: Option<Scored> = None;
    for s in cands {
        let better = match &best {
            None => true,
            Some(b) => {
                let tol = 1e-12 * b.ratio.abs().max(1.0);
                s.ratio < b.ratio - tol
                    || (s.ratio <= b.ratio + tol && (s.mv.group, s.mv.kind) < (b.mv.group, b.mv.kind))
            }
        };
        if better {
            best = Some(s);
        }
    }
    best
}

/// Greedy contraction on a prepared evaluator.
pub fn shrink_search_with(
    eval: &mut Evaluator,
    params: &SearchParams,
) -> Result<(HeadMaskConfig, SearchTrace)> {
    params.validate()?;
    let grid = *eval.geometry().grid();
    let config = full_config(&grid, &params.group_boundaries);
    let n_groups = config.groups().len();
    let (recall, cost) = eval.evaluate(&config);
    let mut state = State {
        eval,
        shrinker: Shrinker {
            sx: params.tile.tw,
            sy: params.tile.th,
        },
        family: params.family,
        config,
        recall,
        cost,
    };
    let units = if params.family == SearchFamily::Cubic { 1 } else { n_groups };
    let mut stopped: Vec<Option<Termination>> = vec![None; units];
    let mut last_reason = Termination::Exhausted;
    let mut steps = Vec::new();

    while stopped.iter().any(Option::is_none) {
        let mut cands = Vec::new();
        for (u, s) in stopped.iter_mut().enumerate() {
            if s.is_none() {
                let c = state.candidates(u);
                if c.is_empty() {
                    *s = Some(Termination::Exhausted);
                    last_reason = Termination::Exhausted;
                }
                cands.extend(c);
            }
        }
        let Some(best) = best_of(cands) else { break };
        let unit = if params.family == SearchFamily::Cubic { 0 } else { best.mv.group };
        let reason = if best.recall < params.tau {
            Some(Termination::RecallThreshold)
        } else if best.ratio > params.lambda {
            Some(Termination::CostThreshold)
        } else {
            None
        };
        if let Some(r) = reason {
            stopped[unit] = Some(r);
            last_reason = r;
            continue;
        }
        steps.push(TraceStep {
            mv: best.mv,
            recall_after: best.recall,
            cost_after: best.cost,
            ratio: best.ratio,
        });
        state.config = best.config;
        state.recall = best.recall;
        state.cost = best.cost;
    }

    let group_termination = (0..n_groups)
        .map(|g| {
            let u = if params.family == SearchFamily::Cubic { 0 } else { g };
            stopped[u].unwrap_or(Termination::Exhausted)
        })
        .collect();
    let trace = SearchTrace {
        initial_recall: recall,
        initial_cost: cost,
        steps,
        group_termination,
        termination: last_reason,
    };
    Ok((state.config, trace))
}

pub fn shrink_search(
    map: &AttentionProbMap,
    params: &SearchParams,
) -> Result<(HeadMaskConfig, SearchTrace)> {
    params.validate()?;
    let perm = params.permutation(map.grid())?;
    let mut eval = Evaluator::new(map, &perm, params.block_size)?;
    shrink_search_with(&mut eval, params)
}

/// Left fold of [`union`].
pub fn merge_prompts(configs: &[HeadMaskConfig]) -> Result<HeadMaskConfig> {
    let (first, rest) = configs.split_first().ok_or_else(|| Error::InvalidParameter {
        field: "configs",
        reason: "nothing to merge".into(),
    })?;
    rest.iter().try_fold(first.clone(), |acc, c| union(&acc, c))
}

/// Searches every map of one head and unions the results.
pub fn search_prompts(maps: &[AttentionProbMap], params: &SearchParams) -> Result<HeadMaskConfig> {
    let configs = maps
        .iter()
        .map(|m| shrink_search(m, params).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    merge_prompts(&configs)
}

/// Per-head schedule over `steps`. Steps before `full_prefix` are dense; the
/// rest are cut into ranges of `step_reuse_n` and each range takes the config
/// searched on its first step. Heads are searched in parallel.
pub fn schedule_search(
    dumps: &BTreeMap<(usize, usize, usize), AttentionProbMap>,
    params: &SearchParams,
    steps: Range<usize>,
) -> Result<ModelMaskSchedule> {
    params.validate()?;
    if steps.start != 0 {
        return Err(Error::InvalidParameter {
            field: "steps",
            reason: format!("schedules start at step 0, got {}", steps.start),
        });
    }
    let heads: Vec<(usize, usize)> = {
        let mut h: Vec<_> = dumps.keys().map(|&(l, h, _)| (l, h)).collect();
        h.dedup();
        h
    };
    let ranges: Vec<(usize, usize)> = (params.full_prefix..steps.end)
        .step_by(params.step_reuse_n)
        .map(|lo| (lo, (lo + params.step_reuse_n).min(steps.end) - 1))
        .collect();
    let jobs: Vec<(usize, usize, usize, usize)> = heads
        .iter()
        .flat_map(|&(l, h)| ranges.iter().map(move |&(lo, hi)| (l, h, lo, hi)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(layer, head, lo, hi)| {
            let map = dumps.get(&(layer, head, lo)).ok_or(Error::MissingDump {
                layer,
                head,
                step: lo,
            })?;
            let (config, _) = shrink_search(map, params)?;
            Ok(ScheduleEntry {
                step_lo: lo,
                step_hi: hi,
                config,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries: BTreeMap<(usize, usize), Vec<ScheduleEntry>> =
        heads.iter().map(|&k| (k, Vec::new())).collect();
    for (&(l, h, _, _), e) in jobs.iter().zip(results) {
        entries.get_mut(&(l, h)).expect("head listed").push(e);
    }
    ModelMaskSchedule::new(params.full_prefix, entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: Vec<f64>,
    pub mean_recall: f64,
    pub sparsity: f64,
    pub flop_proxy: f64,
}

/// Recall of `config` on each map, with masks rasterised in the order and
/// block size of `params`.
pub fn evaluate_config(
    config: &HeadMaskConfig,
    maps: &[AttentionProbMap],
    params: &SearchParams,
) -> Result<EvalReport> {
    let first = maps.first().ok_or_else(|| Error::InvalidParameter {
        field: "maps",
        reason: "nothing to evaluate".into(),
    })?;
    let grid = *first.grid();
    if let Some(m) = maps.iter().find(|m| m.grid() != &grid) {
        return Err(Error::ShapeMismatch(format!("maps on grids {grid} and {}", m.grid())));
    }
    let perm = params.permutation(&grid)?;
    let mask = BlockGeometry::new(&grid, &perm, params.block_size)?.rasterize(config)?;
    let recall = maps
        .iter()
        .map(|m| metrics::recall(&m.reordered(&perm)?, &mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean_recall: recall.iter().sum::<f64>() / recall.len() as f64,
        recall,
        sparsity: crate::masks::sparsity(&mask),
        flop_proxy: crate::attention::flop_proxy(&mask),
    })
}

/// Mean sparsity of the merged searched config at each `tau`.
pub fn tau_sweep(
    maps: &[AttentionProbMap],
    params: &SearchParams,
    taus: &[f64],
) -> Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|&tau| {
            let p = SearchParams {
                tau,
                ..params.clone()
            };
            let config = search_prompts(maps, &p)?;
            Ok((tau, evaluate_config(&config, maps, &p)?.sparsity))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{member, rasterize};
    use crate::synth::{gen_probmap, SpatialKind, SyntheticHeadSpec, TemporalKind};

    fn local_spec(o: usize, e: usize, p: f64) -> SyntheticHeadSpec {
        SyntheticHeadSpec::new(
            SpatialKind::Local {
                window: SpatialWindow::new(o, e),
            },
            TemporalKind::Invariant,
            p,
        )
    }

    fn exact_params(tau: f64) -> SearchParams {
        SearchParams {
            tau,
            lambda: f64::INFINITY,
            tile: TileShape::UNIT,
            block_size: 1,
            group_boundaries: GroupBoundaries::single(),
            ..SearchParams::default()
        }
    }

    #[test]
    fn canonical_forms() {
        let a = SpatialWindow::new(5, 1);
        let b = SpatialWindow::new(1, 5);
        assert_eq!(canonical(DualWindow::pair(b, a)), DualWindow::pair(a, b));
        assert_eq!(
            canonical(DualWindow::pair(a, SpatialWindow::new(2, 1))),
            DualWindow::boxed(a)
        );
        assert_eq!(canonical(DualWindow::single(b)), DualWindow::boxed(b));
        assert_eq!(canonical(DualWindow::EMPTY), DualWindow::EMPTY);
    }

    #[test]
    fn tau_one_keeps_full_config() {
        let g = VideoGrid::new(2, 4, 4).unwrap();
        let spec = local_spec(1, 1, 0.9).with_noise_floor(0.01);
        let map = gen_probmap(&spec, &g).unwrap();
        let params = SearchParams {
            tau: 1.0,
            tile: TileShape::UNIT,
            block_size: 4,
            ..SearchParams::default()
        };
        let (cfg, trace) = shrink_search(&map, &params).unwrap();
        assert_eq!(cfg, full_config(&g, &params.group_boundaries));
        assert!(trace.steps.is_empty());
        assert_eq!(trace.termination, Termination::RecallThreshold);
    }

    #[test]
    fn planted_local_window_is_recovered() {
        let g = VideoGrid::new(2, 10, 10).unwrap();
        let map = gen_probmap(&local_spec(2, 2, 0.95), &g).unwrap();
        let (cfg, trace) = shrink_search(&map, &exact_params(0.9)).unwrap();
        assert_eq!(cfg.groups()[0].window, DualWindow::boxed(SpatialWindow::new(2, 2)));
        assert!(trace.final_recall() >= 0.9);
        for w in trace.steps.windows(2) {
            assert!(w[1].recall_after <= w[0].recall_after);
            assert!(w[1].cost_after < w[0].cost_after);
        }
    }

    #[test]
    fn evaluator_matches_rasterize_and_recall() {
        let g = VideoGrid::new(4, 4, 8).unwrap();
        let spec = local_spec(2, 1, 0.8).with_texture(0.4).with_seed(9);
        let map = gen_probmap(&spec, &g).unwrap();
        let params = SearchParams {
            tile: TileShape::new(1, 2, 4).unwrap(),
            block_size: 8,
            lambda: 0.5,
            tau: 0.7,
            ..SearchParams::default()
        };
        let (cfg, trace) = shrink_search(&map, &params).unwrap();
        assert!(!trace.steps.is_empty());
        let perm = params.permutation(&g).unwrap();
        let mask = rasterize(&cfg, &g, &perm, 8).unwrap();
        let direct = metrics::recall(&map.reordered(&perm).unwrap(), &mask).unwrap();
        assert!((direct - trace.final_recall()).abs() < 1e-9);
        assert!((crate::attention::flop_proxy(&mask) - trace.final_cost()).abs() < 1e-12);
        let report = evaluate_config(&cfg, std::slice::from_ref(&map), &params).unwrap();
        assert!((report.mean_recall - direct).abs() < 1e-12);
        assert!(report.mean_recall >= 0.7);
    }

    #[test]
    fn trace_respects_thresholds() {
        let g = VideoGrid::new(4, 8, 8).unwrap();
        let spec = SyntheticHeadSpec::new(
            SpatialKind::Cross {
                w1: SpatialWindow::new(7, 1),
                w2: SpatialWindow::new(1, 7),
            },
            TemporalKind::Decay { rate: 0.3 },
            0.97,
        );
        let map = gen_probmap(&spec, &g).unwrap();
        for family in [SearchFamily::DualWindow, SearchFamily::FrameGroupWise, SearchFamily::Cubic] {
            let params = SearchParams {
                tile: TileShape::new(1, 2, 2).unwrap(),
                block_size: 4,
                lambda: 0.2,
                family,
                ..SearchParams::default()
            };
            let (cfg, trace) = shrink_search(&map, &params).unwrap();
            assert!(trace.steps.iter().all(|s| s.recall_after >= 0.9 && s.ratio <= 0.2));
            assert!(trace.final_recall() >= 0.9);
            match family {
                SearchFamily::Cubic => {
                    let enabled: Vec<_> =
                        cfg.groups().iter().filter(|g| !g.window.is_empty()).collect();
                    assert!(enabled.windows(2).all(|p| p[0].window == p[1].window));
                }
                SearchFamily::FrameGroupWise => {
                    assert!(cfg.groups().iter().all(|g| g.window.is_empty() || is_box(&g.window)));
                }
                SearchFamily::DualWindow => {}
            }
        }
    }

    #[test]
    fn deterministic() {
        let g = VideoGrid::new(4, 8, 8).unwrap();
        let map = gen_probmap(&local_spec(3, 1, 0.95).with_texture(0.5).with_seed(2), &g).unwrap();
        let params = SearchParams {
            tile: TileShape::new(1, 2, 2).unwrap(),
            block_size: 4,
            lambda: 0.3,
            ..SearchParams::default()
        };
        assert_eq!(shrink_search(&map, &params).unwrap(), shrink_search(&map, &params).unwrap());
    }

    #[test]
    fn incompatible_tile() {
        let g = VideoGrid::new(2, 6, 6).unwrap();
        let map = gen_probmap(&local_spec(1, 1, 0.9), &g).unwrap();
        let params = SearchParams {
            tile: TileShape::new(1, 4, 4).unwrap(),
            ..SearchParams::default()
        };
        assert!(matches!(shrink_search(&map, &params), Err(Error::IncompatibleGrid(_))));
    }

    #[test]
    fn merge_examples() {
        let g = VideoGrid::new(4, 4, 4).unwrap();
        let b = GroupBoundaries::default();
        let full = full_config(&g, &b);
        let small = HeadMaskConfig::uniform(&g, &b, DualWindow::boxed(SpatialWindow::new(1, 0))).unwrap();
        assert_eq!(merge_prompts(std::slice::from_ref(&small)).unwrap(), small);
        assert_eq!(merge_prompts(&[small.clone(), full.clone()]).unwrap(), full);
        let other = full_config(&g, &GroupBoundaries::single());
        assert!(matches!(merge_prompts(&[small, other]), Err(Error::GroupBoundaryMismatch)));
        assert!(merge_prompts(&[]).is_err());
    }

    #[test]
    fn merged_config_covers_each_member() {
        let g = VideoGrid::new(2, 8, 8).unwrap();
        let maps: Vec<_> = [(2, 1), (1, 3)]
            .iter()
            .map(|&(o, e)| gen_probmap(&local_spec(o, e, 0.95), &g).unwrap())
            .collect();
        let params = exact_params(0.9);
        let merged = search_prompts(&maps, &params).unwrap();
        for m in &maps {
            let (own, _) = shrink_search(m, &params).unwrap();
            let own_r = evaluate_config(&own, std::slice::from_ref(m), &params).unwrap().mean_recall;
            let merged_r = evaluate_config(&merged, std::slice::from_ref(m), &params).unwrap().mean_recall;
            assert!(merged_r >= own_r);
            for q in g.coords() {
                for k in g.coords() {
                    if member(&own, &g, q, k) {
                        assert!(member(&merged, &g, q, k));
                    }
                }
            }
        }
    }

    fn dumps(g: &VideoGrid, heads: usize, steps: Range<usize>) -> BTreeMap<(usize, usize, usize), AttentionProbMap> {
        let map = gen_probmap(&local_spec(1, 1, 0.9), g).unwrap();
        let mut out = BTreeMap::new();
        for h in 0..heads {
            for s in steps.clone() {
                out.insert((0, h, s), map.clone());
            }
        }
        out
    }

    #[test]
    fn schedule_ranges() {
        let g = VideoGrid::new(2, 4, 4).unwrap();
        let params = SearchParams {
            tile: TileShape::new(1, 2, 2).unwrap(),
            block_size: 4,
            ..SearchParams::default()
        };
        let d = dumps(&g, 2, 0..50);
        let s = schedule_search(&d, &params, 0..50).unwrap();
        assert_eq!(s.entries().len(), 2);
        for ranges in s.entries().values() {
            assert_eq!(ranges.len(), 7);
            assert_eq!((ranges[0].step_lo, ranges[6].step_hi), (15, 49));
        }

        let one = SearchParams {
            step_reuse_n: 35,
            ..params.clone()
        };
        let s = schedule_search(&d, &one, 0..50).unwrap();
        assert!(s.entries().values().all(|r| r.len() == 1));

        let dense = SearchParams {
            full_prefix: 50,
            ..params.clone()
        };
        assert!(schedule_search(&d, &dense, 0..50).unwrap().is_entirely_dense());

        let mut missing = d.clone();
        missing.remove(&(0, 1, 20));
        assert!(matches!(
            schedule_search(&missing, &params, 0..50),
            Err(Error::MissingDump { layer: 0, head: 1, step: 20 })
        ));
    }
}
