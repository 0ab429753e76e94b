//! Binary tensor and mask files, JSON configs and schedules.
//!
//! Tensor files (`*.catn`):
//!
//! ```text
//! "CATN" | version: u16 LE = 1 | dtype: u8 (0 = f32 LE) | rank: u8 |
//! dims: rank x u64 LE | payload: row-major values
//! ```
//!
//! Mask files (`*.camk`):
//!
//! ```text
//! "CAMK" | version: u16 LE = 1 | n_tokens: u64 LE | block_size: u64 LE |
//! bits: ceil(B*B / 8) bytes, row-major, least significant bit first
//! ```
//!
//! Probability-map dumps are rank-2 tensors named `*.probs.catn` whose rows
//! and columns are in raster token order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::BlockMask;
use crate::error::{Error, Result};
use crate::layout::{TileShape, VideoGrid};
use crate::masks::{FrameGroup, HeadMaskConfig, ModelMaskSchedule, ScheduleEntry};
use crate::tensor::Matrix;

pub const TENSOR_MAGIC: [u8; 4] = *b"CATN";
pub const MASK_MAGIC: [u8; 4] = *b"CAMK";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.as_slice().len() * 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(2);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::TruncatedPayload {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { found, expected });
        }
        let version = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::ShapeMismatch(format!("dimension {v} overflows")))
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingData(extra)),
        }
    }
}

/// Parses a rank-2 tensor file image.
pub fn decode_tensor(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(TENSOR_MAGIC)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let rank = r.u8()?;
    let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let (rows, cols) = match dims[..] {
        [rows, cols] => (rows, cols),
        [len] => (1, len),
        _ => return Err(Error::ShapeMismatch(format!("expected a rank-2 tensor, got dims {dims:?}"))),
    };
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::ShapeMismatch(format!("dims {dims:?} overflow")))?;
    let payload = r.take(len)?;
    r.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_tensor(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(m)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    decode_tensor(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_mask(mask: &BlockMask) -> Vec<u8> {
    let bits = mask.bits();
    let mut out = Vec::with_capacity(22 + bits.len().div_ceil(8));
    out.extend_from_slice(&MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.n_tokens() as u64).to_le_bytes());
    out.extend_from_slice(&(mask.block_size() as u64).to_le_bytes());
    for chunk in bits.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &on)| b | ((on as u8) << i)));
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<BlockMask> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(MASK_MAGIC)?;
    let n_tokens = r.u64()?;
    let block_size = r.u64()?;
    if block_size == 0 {
        return Err(Error::InvariantViolation("mask block size is 0".into()));
    }
    let nb = n_tokens.div_ceil(block_size);
    let total = nb
        .checked_mul(nb)
        .ok_or_else(|| Error::ShapeMismatch(format!("{nb} blocks per side overflow")))?;
    let packed = r.take(total.div_ceil(8))?;
    r.finish()?;
    let bits = (0..total).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    BlockMask::from_bits(n_tokens, block_size, bits)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BlockMask) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BlockMask> {
    let path = path.as_ref();
    decode_mask(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// A head config with the grid, tile and block size it was made for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigDocument {
    pub grid: VideoGrid,
    pub tile: TileShape,
    pub block_size: usize,
    pub config: HeadMaskConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleDocument {
    pub grid: VideoGrid,
    pub tile: TileShape,
    pub block_size: usize,
    pub schedule: ModelMaskSchedule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigFile {
    Head(ConfigDocument),
    Schedule(ScheduleDocument),
}

// Wire forms carry unvalidated groups so that schema errors and invariant
// errors stay distinguishable.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    grid: VideoGrid,
    tile: TileShape,
    block_size: usize,
    groups: Vec<FrameGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroups {
    groups: Vec<FrameGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    layer: usize,
    head: usize,
    step_lo: usize,
    step_hi: usize,
    config: RawGroups,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    grid: VideoGrid,
    tile: TileShape,
    block_size: usize,
    full_prefix: usize,
    entries: Vec<RawEntry>,
}

fn invariant(e: Error) -> Error {
    match e {
        Error::InvariantViolation(_) => e,
        other => Error::InvariantViolation(other.to_string()),
    }
}

fn check_frame(grid: &VideoGrid, tile: &TileShape, block_size: usize) -> Result<()> {
    grid.validate().map_err(invariant)?;
    TileShape::new(tile.tf, tile.th, tile.tw).map_err(invariant)?;
    tile.check_divides(grid).map_err(invariant)?;
    if block_size == 0 {
        return Err(Error::InvariantViolation("block_size must be >= 1".into()));
    }
    Ok(())
}

fn head_config(grid: &VideoGrid, groups: Vec<FrameGroup>) -> Result<HeadMaskConfig> {
    let config = HeadMaskConfig::new(groups).map_err(invariant)?;
    config.validate_for(grid).map_err(invariant)?;
    Ok(config)
}

impl ConfigDocument {
    fn from_raw(raw: RawConfig) -> Result<Self> {
        check_frame(&raw.grid, &raw.tile, raw.block_size)?;
        Ok(Self {
            config: head_config(&raw.grid, raw.groups)?,
            grid: raw.grid,
            tile: raw.tile,
            block_size: raw.block_size,
        })
    }

    fn to_raw(&self) -> RawConfig {
        RawConfig {
            grid: self.grid,
            tile: self.tile,
            block_size: self.block_size,
            groups: self.config.groups().to_vec(),
        }
    }
}

impl ScheduleDocument {
    fn from_raw(raw: RawSchedule) -> Result<Self> {
        check_frame(&raw.grid, &raw.tile, raw.block_size)?;
        let mut entries: BTreeMap<(usize, usize), Vec<ScheduleEntry>> = BTreeMap::new();
        for e in raw.entries {
            let config = head_config(&raw.grid, e.config.groups)?;
            entries.entry((e.layer, e.head)).or_default().push(ScheduleEntry {
                step_lo: e.step_lo,
                step_hi: e.step_hi,
                config,
            });
        }
        Ok(Self {
            schedule: ModelMaskSchedule::new(raw.full_prefix, entries).map_err(invariant)?,
            grid: raw.grid,
            tile: raw.tile,
            block_size: raw.block_size,
        })
    }

    fn to_raw(&self) -> RawSchedule {
        let entries = self
            .schedule
            .entries()
            .iter()
            .flat_map(|(&(layer, head), v)| {
                v.iter().map(move |e| RawEntry {
                    layer,
                    head,
                    step_lo: e.step_lo,
                    step_hi: e.step_hi,
                    config: RawGroups {
                        groups: e.config.groups().to_vec(),
                    },
                })
            })
            .collect();
        RawSchedule {
            grid: self.grid,
            tile: self.tile,
            block_size: self.block_size,
            full_prefix: self.schedule.full_prefix(),
            entries,
        }
    }
}

/// Deserialises `value`, reporting the failing field path.
fn from_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| Error::SchemaViolation {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn parse_value(text: &str) -> Result<serde_json::Value> {
    serde_json::from_str(text).map_err(|e| Error::SchemaViolation {
        path: ".".into(),
        message: e.to_string(),
    })
}

/// Parses a config or schedule document; schedules are told apart by their
/// `entries` key.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let value = parse_value(text)?;
    if value.get("entries").is_some() {
        ScheduleDocument::from_raw(from_value(value)?).map(ConfigFile::Schedule)
    } else {
        ConfigDocument::from_raw(from_value(value)?).map(ConfigFile::Head)
    }
}

pub fn config_to_json(file: &ConfigFile) -> String {
    let out = match file {
        ConfigFile::Head(d) => serde_json::to_string_pretty(&d.to_raw()),
        ConfigFile::Schedule(d) => serde_json::to_string_pretty(&d.to_raw()),
    };
    out.expect("config documents always serialise")
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigFile> {
    let path = path.as_ref();
    parse_config(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_config(path: impl AsRef<Path>, file: &ConfigFile) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, config_to_json(file) + "\n").map_err(|e| Error::io(path, e))
}

/// Loads a document that must be a single head config.
pub fn load_head_config(path: impl AsRef<Path>) -> Result<ConfigDocument> {
    match load_config(path)? {
        ConfigFile::Head(d) => Ok(d),
        ConfigFile::Schedule(_) => Err(Error::SchemaViolation {
            path: "entries".into(),
            message: "expected a head config, found a schedule".into(),
        }),
    }
}

/// Any other JSON document (specs, manifests, traces).
pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    from_value(parse_value(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::SchemaViolation {
        path: ".".into(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
