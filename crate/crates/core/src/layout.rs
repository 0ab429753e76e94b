//! Video token lattice and its flattening orders.
//!
//! Tokens of a latent video live on an `(f, h, w)` lattice. Attention kernels
//! see them as a 1D sequence, and the way that lattice is flattened decides
//! which tokens share a computational block. Two orders are provided:
//!
//! - [`raster_order`]: frame-major, then row, then column (the identity).
//! - [`tile_order`]: tokens are grouped into `(tf, th, tw)` tiles; tiles are
//!   laid out in raster order of their tile indices and tokens inside a tile
//!   follow raster order of their local coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the latent token lattice: frames, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoGrid {
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl VideoGrid {
    pub fn new(f: usize, h: usize, w: usize) -> Result<Self> {
        let grid = Self { f, h, w };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidGrid(format!(
                "all dimensions must be >= 1, got {}x{}x{}",
                self.f, self.h, self.w
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.f * self.h * self.w
    }

    #[inline]
    pub fn frame_area(&self) -> usize {
        self.h * self.w
    }

    pub fn coord_of(&self, index: usize) -> Result<TokenCoord> {
        let n = self.tokens();
        if index >= n {
            return Err(Error::OutOfRange { index, len: n });
        }
        Ok(self.coord_unchecked(index))
    }

    pub fn index_of(&self, coord: TokenCoord) -> Result<usize> {
        if coord.t >= self.f || coord.y >= self.h || coord.x >= self.w {
            return Err(Error::OutOfRange {
                index: (coord.t * self.h + coord.y) * self.w + coord.x,
                len: self.tokens(),
            });
        }
        Ok(self.index_unchecked(coord))
    }

    #[inline]
    pub(crate) fn coord_unchecked(&self, index: usize) -> TokenCoord {
        let x = index % self.w;
        let y = (index / self.w) % self.h;
        let t = index / (self.w * self.h);
        TokenCoord { t, y, x }
    }

    #[inline]
    pub(crate) fn index_unchecked(&self, c: TokenCoord) -> usize {
        (c.t * self.h + c.y) * self.w + c.x
    }

    /// All token coordinates in raster order.
    pub fn coords(&self) -> impl Iterator<Item = TokenCoord> + '_ {
        (0..self.tokens()).map(move |i| self.coord_unchecked(i))
    }
}

impl std::fmt::Display for VideoGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.f, self.h, self.w)
    }
}

impl std::str::FromStr for VideoGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let [f, h, w] = parse_triple(s, "grid")?;
        VideoGrid::new(f, h, w)
    }
}

/// Tile extents in frames, rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileShape {
    pub tf: usize,
    pub th: usize,
    pub tw: usize,
}

impl TileShape {
    pub const UNIT: TileShape = TileShape { tf: 1, th: 1, tw: 1 };

    pub fn new(tf: usize, th: usize, tw: usize) -> Result<Self> {
        if tf == 0 || th == 0 || tw == 0 {
            return Err(Error::InvalidParameter {
                field: "tile",
                reason: format!("all dimensions must be >= 1, got {tf}x{th}x{tw}"),
            });
        }
        Ok(Self { tf, th, tw })
    }

    #[inline]
    pub fn volume(&self) -> usize {
        self.tf * self.th * self.tw
    }

    pub fn check_divides(&self, grid: &VideoGrid) -> Result<()> {
        if self.tf == 0
            || self.th == 0
            || self.tw == 0
            || grid.f % self.tf != 0
            || grid.h % self.th != 0
            || grid.w % self.tw != 0
        {
            return Err(Error::NonDivisibleTile {
                grid: (grid.f, grid.h, grid.w),
                tile: (self.tf, self.th, self.tw),
            });
        }
        Ok(())
    }
}

impl Default for TileShape {
    fn default() -> Self {
        Self { tf: 1, th: 4, tw: 4 }
    }
}

impl std::fmt::Display for TileShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.tf, self.th, self.tw)
    }
}

impl std::str::FromStr for TileShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let [tf, th, tw] = parse_triple(s, "tile")?;
        TileShape::new(tf, th, tw)
    }
}

fn parse_triple(s: &str, field: &'static str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).map(str::trim).collect();
    let bad = || Error::InvalidParameter {
        field,
        reason: format!("expected FxHxW, got {s:?}"),
    };
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

/// Position of one token: frame, row, column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenCoord {
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

impl TokenCoord {
    pub const fn new(t: usize, y: usize, x: usize) -> Self {
        Self { t, y, x }
    }
}

/// A bijection on `[0, n)`.
///
/// `forward[raster_index]` is the position of that token in the reordered
/// sequence; `inverse[position]` is the raster index stored at that position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        let forward: Vec<usize> = (0..n).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    /// Builds a permutation from its forward map, rejecting non-bijections.
    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (src, &dst) in forward.iter().enumerate() {
            if dst >= n {
                return Err(Error::OutOfRange { index: dst, len: n });
            }
            if inverse[dst] != usize::MAX {
                return Err(Error::InvariantViolation(format!(
                    "position {dst} assigned twice"
                )));
            }
            inverse[dst] = src;
        }
        Ok(Self { forward, inverse })
    }

    /// Builds a permutation from the sequence of raster indices in new order.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        Ok(Self::from_forward(order)?.inverted())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Raster indices listed in their new order (same as [`Self::inverse`]).
    pub fn order(&self) -> &[usize] {
        &self.inverse
    }

    #[inline]
    pub fn position_of(&self, raster_index: usize) -> usize {
        self.forward[raster_index]
    }

    #[inline]
    pub fn raster_at(&self, position: usize) -> usize {
        self.inverse[position]
    }

    pub fn inverted(self) -> Self {
        Self {
            forward: self.inverse,
            inverse: self.forward,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Plain frame/row/column flattening.
pub fn raster_order(grid: &VideoGrid) -> Permutation {
    Permutation::identity(grid.tokens())
}

/// Flattening that makes every tile a contiguous run of `tile.volume()` tokens.
pub fn tile_order(grid: &VideoGrid, tile: &TileShape) -> Result<Permutation> {
    grid.validate()?;
    tile.check_divides(grid)?;
    let (nf, nh, nw) = (grid.f / tile.tf, grid.h / tile.th, grid.w / tile.tw);
    let mut order = Vec::with_capacity(grid.tokens());
    for bt in 0..nf {
        for by in 0..nh {
            for bx in 0..nw {
                for lt in 0..tile.tf {
                    for ly in 0..tile.th {
                        for lx in 0..tile.tw {
                            order.push(grid.index_unchecked(TokenCoord {
                                t: bt * tile.tf + lt,
                                y: by * tile.th + ly,
                                x: bx * tile.tw + lx,
                            }));
                        }
                    }
                }
            }
        }
    }
    Permutation::from_order(order)
}

/// Which flattening a map or mask is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenOrder {
    Raster,
    #[default]
    Tiled,
}

impl TokenOrder {
    pub fn permutation(&self, grid: &VideoGrid, tile: &TileShape) -> Result<Permutation> {
        match self {
            TokenOrder::Raster => Ok(raster_order(grid)),
            TokenOrder::Tiled => tile_order(grid, tile),
        }
    }
}

impl std::fmt::Display for TokenOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenOrder::Raster => "raster",
            TokenOrder::Tiled => "tiled",
        })
    }
}

impl std::str::FromStr for TokenOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raster" => Ok(TokenOrder::Raster),
            "tile" | "tiled" => Ok(TokenOrder::Tiled),
            other => Err(Error::InvalidParameter {
                field: "order",
                reason: format!("expected raster or tiled, got {other:?}"),
            }),
        }
    }
}
