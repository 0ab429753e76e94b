//! Synthetic attention maps with planted spatial and temporal patterns, and
//! random Q/K/V inputs.
//!
//! Each row of a generated map puts mass `p` on the planted region, spread in
//! proportion to the temporal weight of each key's frame distance, and the
//! remaining `1 - p` uniformly over every other key. A noise floor `nu` then
//! mixes in `nu / n` everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionInputs;
use crate::error::{Error, Result};
use crate::layout::{raster_order, VideoGrid};
use crate::masks::{DualWindow, SpatialWindow};
use crate::metrics::AttentionProbMap;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialKind {
    Local { window: SpatialWindow },
    /// Two corridors, typically one wide along x and one tall along y.
    Cross { w1: SpatialWindow, w2: SpatialWindow },
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemporalKind {
    Invariant,
    /// Weight `rate^d` at frame distance `d`.
    Decay { rate: f64 },
    /// Weight 1 when `|d - center| <= width`, 0 otherwise.
    Band { center: usize, width: usize },
}

impl TemporalKind {
    pub fn weight(&self, d: usize) -> f64 {
        match *self {
            TemporalKind::Invariant => 1.0,
            TemporalKind::Decay { rate } => rate.powi(d as i32),
            TemporalKind::Band { center, width } => {
                if d.abs_diff(center) <= width {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticHeadSpec {
    pub spatial: SpatialKind,
    pub temporal: TemporalKind,
    /// Share of each row's mass inside the planted region.
    pub p: f64,
    #[serde(default)]
    pub noise_floor: f64,
    /// Relative amplitude of seeded per-key jitter on in-region weights.
    /// Zero gives a flat region.
    #[serde(default)]
    pub texture: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticHeadSpec {
    pub fn new(spatial: SpatialKind, temporal: TemporalKind, p: f64) -> Self {
        Self {
            spatial,
            temporal,
            p,
            noise_floor: 0.0,
            texture: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise_floor(mut self, nu: f64) -> Self {
        self.noise_floor = nu;
        self
    }

    pub fn with_texture(mut self, texture: f64) -> Self {
        self.texture = texture;
        self
    }

    /// Spatial region as a dual window; `None` means the whole frame.
    pub fn region(&self) -> Option<DualWindow> {
        match self.spatial {
            SpatialKind::Local { window } => Some(DualWindow::single(window)),
            SpatialKind::Cross { w1, w2 } => Some(DualWindow::pair(w1, w2)),
            SpatialKind::Global => None,
        }
    }

    /// Caps every window extent at the largest value `grid` admits.
    pub fn clamped_to(self, grid: &VideoGrid) -> Self {
        let fit = |w: SpatialWindow| {
            SpatialWindow::new(w.omega.min(grid.w - 1), w.eta.min(grid.h - 1))
        };
        let spatial = match self.spatial {
            SpatialKind::Local { window } => SpatialKind::Local { window: fit(window) },
            SpatialKind::Cross { w1, w2 } => SpatialKind::Cross { w1: fit(w1), w2: fit(w2) },
            SpatialKind::Global => SpatialKind::Global,
        };
        Self { spatial, ..self }
    }

    pub fn validate_for(&self, grid: &VideoGrid) -> Result<()> {
        grid.validate()?;
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidParameter {
                field: "p",
                reason: format!("must be in (0, 1], got {}", self.p),
            });
        }
        if !(0.0..1.0).contains(&self.noise_floor) {
            return Err(Error::InvalidParameter {
                field: "noise_floor",
                reason: format!("must be in [0, 1), got {}", self.noise_floor),
            });
        }
        if !(0.0..1.0).contains(&self.texture) {
            return Err(Error::InvalidParameter {
                field: "texture",
                reason: format!("must be in [0, 1), got {}", self.texture),
            });
        }
        for w in self.region().iter().flat_map(DualWindow::windows) {
            if w.omega > grid.w - 1 {
                return Err(Error::ExtentTooLarge {
                    field: "omega",
                    value: w.omega,
                    limit: grid.w - 1,
                });
            }
            if w.eta > grid.h - 1 {
                return Err(Error::ExtentTooLarge {
                    field: "eta",
                    value: w.eta,
                    limit: grid.h - 1,
                });
            }
        }
        match self.temporal {
            TemporalKind::Invariant => {}
            TemporalKind::Decay { rate } => {
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(Error::InvalidParameter {
                        field: "rate",
                        reason: format!("must be in (0, 1], got {rate}"),
                    });
                }
            }
            TemporalKind::Band { center, .. } => {
                if center > grid.f - 1 {
                    return Err(Error::ExtentTooLarge {
                        field: "center",
                        value: center,
                        limit: grid.f - 1,
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether key offset `(dt, dx, dy)` lies in the planted region.
    pub fn in_region(&self, dt: usize, dx: usize, dy: usize) -> bool {
        self.temporal.weight(dt) > 0.0 && self.region().is_none_or(|r| r.covers(dx, dy))
    }
}

/// Planted map in raster order.
pub fn gen_probmap(spec: &SyntheticHeadSpec, grid: &VideoGrid) -> Result<AttentionProbMap> {
    spec.validate_for(grid)?;
    let n = grid.tokens();
    let region = spec.region();
    let coords: Vec<_> = grid.coords().collect();
    let temporal: Vec<f64> = (0..grid.f).map(|d| spec.temporal.weight(d)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter: Vec<f64> = (0..n)
        .map(|_| {
            if spec.texture > 0.0 {
                1.0 + spec.texture * rng.gen_range(-1.0..=1.0)
            } else {
                1.0
            }
        })
        .collect();

    let nu = spec.noise_floor;
    let mut probs = Matrix::zeros(n, n);
    let mut inside = vec![0.0f64; n];
    for (r, q) in coords.iter().enumerate() {
        let mut in_sum = 0.0;
        let mut out_count = 0usize;
        for (c, k) in coords.iter().enumerate() {
            let w = temporal[q.t.abs_diff(k.t)];
            let spatial = region.is_none_or(|reg| reg.covers(q.x.abs_diff(k.x), q.y.abs_diff(k.y)));
            inside[c] = if spatial && w > 0.0 { w * jitter[c] } else { 0.0 };
            if inside[c] > 0.0 {
                in_sum += inside[c];
            } else {
                out_count += 1;
            }
        }
        // An empty side hands its share to the other one.
        let (p_in, p_out) = match (in_sum > 0.0, out_count > 0) {
            (true, true) => (spec.p, 1.0 - spec.p),
            (true, false) => (1.0, 0.0),
            (false, _) => (0.0, 1.0),
        };
        let out_each = if out_count > 0 { p_out / out_count as f64 } else { 0.0 };
        let row = probs.row_mut(r);
        for c in 0..n {
            let base = if inside[c] > 0.0 {
                p_in * inside[c] / in_sum
            } else {
                out_each
            };
            row[c] = ((1.0 - nu) * base + nu / n as f64) as f32;
        }
    }
    AttentionProbMap::new(probs, *grid, raster_order(grid))
}

/// Seeded `n x d` Q, K and V with entries in `[-1, 1]`.
pub fn gen_qkv(grid: &VideoGrid, d: usize, seed: u64) -> Result<AttentionInputs> {
    if d == 0 {
        return Err(Error::InvalidParameter {
            field: "d",
            reason: "head dimension must be >= 1".into(),
        });
    }
    grid.validate()?;
    let n = grid.tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = || Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0f32..=1.0));
    let (q, k, v) = (next(), next(), next());
    AttentionInputs::new(q, k, v)
}

/// Bounds of a prompt-to-prompt perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    /// Each extent moves by an integer in `[-extent_jitter, extent_jitter]`.
    pub extent_jitter: usize,
    /// `p` moves by a value in `[-mass_jitter, mass_jitter]`.
    pub mass_jitter: f64,
}

impl Perturbation {
    pub const MAX_MASS_JITTER: f64 = 0.02;

    pub fn is_zero(&self) -> bool {
        self.extent_jitter == 0 && self.mass_jitter == 0.0
    }
}

/// A nearby spec of the same family. Extents are clamped at 0 and `p` to
/// `(0, 1]`; the texture seed is redrawn unless the perturbation is zero.
pub fn gen_prompt_variant(
    spec: &SyntheticHeadSpec,
    perturbation: Perturbation,
    seed: u64,
) -> Result<SyntheticHeadSpec> {
    if !(0.0..=Perturbation::MAX_MASS_JITTER).contains(&perturbation.mass_jitter) {
        return Err(Error::InvalidParameter {
            field: "mass_jitter",
            reason: format!(
                "must be in [0, {}], got {}",
                Perturbation::MAX_MASS_JITTER,
                perturbation.mass_jitter
            ),
        });
    }
    if perturbation.is_zero() {
        return Ok(*spec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = perturbation.extent_jitter as i64;
    let mut shift = |v: usize| (v as i64 + rng.gen_range(-j..=j)).max(0) as usize;
    let mut window = |w: SpatialWindow| SpatialWindow::new(shift(w.omega), shift(w.eta));
    let spatial = match spec.spatial {
        SpatialKind::Local { window: w } => SpatialKind::Local { window: window(w) },
        SpatialKind::Cross { w1, w2 } => SpatialKind::Cross {
            w1: window(w1),
            w2: window(w2),
        },
        SpatialKind::Global => SpatialKind::Global,
    };
    let mj = perturbation.mass_jitter;
    let p = if mj > 0.0 {
        (spec.p + rng.gen_range(-mj..=mj)).clamp(f64::MIN_POSITIVE, 1.0)
    } else {
        spec.p
    };
    Ok(SyntheticHeadSpec {
        spatial,
        p,
        seed: rng.gen(),
        ..*spec
    })
}

/// One spec per pattern family: local, cross and global (time-invariant),
/// then a decaying local head and a banded global head (time-variant).
pub fn battery(grid: &VideoGrid, seed: u64) -> Vec<(&'static str, SyntheticHeadSpec)> {
    let (wm, hm) = (grid.w - 1, grid.h - 1);
    let local = SpatialWindow::new(2.min(wm), 2.min(hm));
    let cross = SpatialKind::Cross {
        w1: SpatialWindow::new(wm, 1.min(hm)),
        w2: SpatialWindow::new(1.min(wm), hm),
    };
    let band = TemporalKind::Band {
        center: 1.min(grid.f - 1),
        width: 0,
    };
    let specs = [
        ("local", SpatialKind::Local { window: local }, TemporalKind::Invariant),
        ("cross", cross, TemporalKind::Invariant),
        ("global", SpatialKind::Global, TemporalKind::Invariant),
        ("local-decay", SpatialKind::Local { window: local }, TemporalKind::Decay { rate: 0.5 }),
        ("global-band", SpatialKind::Global, band),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, s, t))| {
            (name, SyntheticHeadSpec::new(s, t, 0.9).with_seed(seed.wrapping_add(i as u64)))
        })
        .collect()
}
