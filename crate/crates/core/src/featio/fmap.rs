//! In-memory feature maps and the FMAP1 binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     5 bytes  "FMAP1"
//! version   u8       1
//! flags     u8       bit 0 = nonnegative, other bits zero
//! scales    u32
//! per scale:
//!   height  u32
//!   width   u32
//!   dim     u32
//!   values  height*width*dim f64, row-major, dim fastest
//! id_len    u32
//! image_id  id_len bytes of UTF-8
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"FMAP1";
pub const VERSION: u8 = 1;
pub const FLAG_NONNEGATIVE: u8 = 0b0000_0001;

#[derive(Debug, Error)]
pub enum FmapError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected FMAP1")]
    BadMagic,
    #[error("unsupported FMAP version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown flag bits {0:#04x}")]
    UnknownFlags(u8),
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension mismatch across scales: scale 0 has D={expected}, scale {scale} has D={found}")]
    DimMismatch {
        scale: usize,
        expected: usize,
        found: usize,
    },
    #[error("scale {scale} has a zero extent ({height}x{width}x{dim})")]
    ZeroExtent {
        scale: usize,
        height: usize,
        width: usize,
        dim: usize,
    },
    #[error("feature map has no scales")]
    NoScales,
    #[error("scale {scale} holds {found} values, expected {expected}")]
    ValueCount {
        scale: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at scale {scale}, index {index}")]
    NonFinite { scale: usize, index: usize },
    #[error("negative value {value} at scale {scale}, index {index} in a map flagged nonnegative")]
    Negative {
        scale: usize,
        index: usize,
        value: f64,
    },
    #[error("image id is not valid UTF-8")]
    BadImageId,
    #[error("{0} trailing bytes after image id")]
    TrailingBytes(usize),
}

impl FmapError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        FmapError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One H×W grid of D-dimensional local features.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ScaleGrid {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self, FmapError> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(FmapError::ZeroExtent {
                scale: 0,
                height,
                width,
                dim,
            });
        }
        let expected = height * width * dim;
        if values.len() != expected {
            return Err(FmapError::ValueCount {
                scale: 0,
                expected,
                found: values.len(),
            });
        }
        Ok(ScaleGrid {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Feature vector at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// Position of a local feature inside a (possibly multi-scale) feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocationRef {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
}

/// Grid geometry needed to turn a [`LocationRef`] into normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl LocationRef {
    /// Cell-center coordinates scaled into [0, 1) by the grid extent.
    pub fn normalized(&self, shape: GridShape) -> (f64, f64) {
        (
            (self.row as f64 + 0.5) / shape.height as f64,
            (self.col as f64 + 0.5) / shape.width as f64,
        )
    }
}

/// All local features of one image, across one or more scales.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    image_id: String,
    nonnegative: bool,
    scales: Vec<ScaleGrid>,
}

impl FeatureMap {
    pub fn new(image_id: impl Into<String>, scales: Vec<ScaleGrid>, nonnegative: bool) -> Result<Self, FmapError> {
        let fm = FeatureMap {
            image_id: image_id.into(),
            nonnegative,
            scales,
        };
        fm.validate()?;
        Ok(fm)
    }

    /// Single-scale map; the nonnegative flag is inferred from the values.
    pub fn single(image_id: impl Into<String>, height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self, FmapError> {
        let nonneg = values.iter().all(|v| *v >= 0.0);
        FeatureMap::new(image_id, vec![ScaleGrid::new(height, width, dim, values)?], nonneg)
    }

    /// Wraps a list of vectors as a 1×n single-scale map.
    pub fn from_vectors(image_id: impl Into<String>, vectors: &[Vec<f64>]) -> Result<Self, FmapError> {
        let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
        if let Some((scale, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
            return Err(FmapError::DimMismatch {
                scale,
                expected: dim,
                found: v.len(),
            });
        }
        let values: Vec<f64> = vectors.iter().flatten().copied().collect();
        FeatureMap::single(image_id, 1, vectors.len(), dim, values)
    }

    fn validate(&self) -> Result<(), FmapError> {
        let first = self.scales.first().ok_or(FmapError::NoScales)?;
        for (s, grid) in self.scales.iter().enumerate() {
            if grid.dim != first.dim {
                return Err(FmapError::DimMismatch {
                    scale: s,
                    expected: first.dim,
                    found: grid.dim,
                });
            }
            for (index, &v) in grid.values.iter().enumerate() {
                if !v.is_finite() {
                    return Err(FmapError::NonFinite { scale: s, index });
                }
                if self.nonnegative && v < 0.0 {
                    return Err(FmapError::Negative {
                        scale: s,
                        index,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }

    pub fn scales(&self) -> &[ScaleGrid] {
        &self.scales
    }

    pub fn dim(&self) -> usize {
        self.scales[0].dim
    }

    /// Total location count `n` across all scales.
    pub fn location_count(&self) -> usize {
        self.scales.iter().map(ScaleGrid::len).sum()
    }

    pub fn shape_of(&self, scale: usize) -> GridShape {
        let g = &self.scales[scale];
        GridShape {
            height: g.height,
            width: g.width,
        }
    }

    /// Every local feature as one orderless set: scale-major, then row-major.
    pub fn flatten_locations(&self) -> Vec<(LocationRef, &[f64])> {
        let mut out = Vec::with_capacity(self.location_count());
        for (scale, grid) in self.scales.iter().enumerate() {
            for row in 0..grid.height {
                for col in 0..grid.width {
                    out.push((LocationRef { scale, row, col }, grid.at(row, col)));
                }
            }
        }
        out
    }

    /// Feature vectors only, in [`flatten_locations`](Self::flatten_locations) order.
    pub fn vectors(&self) -> Vec<&[f64]> {
        self.scales
            .iter()
            .flat_map(|g| g.values.chunks_exact(g.dim))
            .collect()
    }

    /// Location refs only, in [`flatten_locations`](Self::flatten_locations) order.
    pub fn location_refs(&self) -> Vec<LocationRef> {
        self.flatten_locations().into_iter().map(|(r, _)| r).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.scales.iter().map(|g| 12 + 8 * g.values.len()).sum();
        let mut buf = Vec::with_capacity(11 + payload + 4 + self.image_id.len());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(if self.nonnegative { FLAG_NONNEGATIVE } else { 0 });
        buf.extend_from_slice(&(self.scales.len() as u32).to_le_bytes());
        for g in &self.scales {
            buf.extend_from_slice(&(g.height as u32).to_le_bytes());
            buf.extend_from_slice(&(g.width as u32).to_le_bytes());
            buf.extend_from_slice(&(g.dim as u32).to_le_bytes());
            for v in &g.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.image_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.image_id.as_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FmapError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FmapError::BadMagic);
        }
        cur.pos = MAGIC.len();
        let version = cur.u8()?;
        if version != VERSION {
            return Err(FmapError::UnsupportedVersion(version));
        }
        let flags = cur.u8()?;
        if flags & !FLAG_NONNEGATIVE != 0 {
            return Err(FmapError::UnknownFlags(flags));
        }
        let scale_count = cur.u32()? as usize;
        if scale_count == 0 {
            return Err(FmapError::NoScales);
        }
        let mut scales = Vec::with_capacity(scale_count.min(64));
        let mut expected_dim = None;
        for scale in 0..scale_count {
            let height = cur.u32()? as usize;
            let width = cur.u32()? as usize;
            let dim = cur.u32()? as usize;
            if height == 0 || width == 0 || dim == 0 {
                return Err(FmapError::ZeroExtent {
                    scale,
                    height,
                    width,
                    dim,
                });
            }
            match expected_dim {
                None => expected_dim = Some(dim),
                Some(expected) if expected != dim => {
                    return Err(FmapError::DimMismatch {
                        scale,
                        expected,
                        found: dim,
                    })
                }
                _ => {}
            }
            let count = height
                .checked_mul(width)
                .and_then(|c| c.checked_mul(dim))
                .ok_or(FmapError::Truncated {
                    offset: cur.pos,
                    needed: usize::MAX,
                })?;
            let raw = cur.take(count.checked_mul(8).unwrap_or(usize::MAX))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            scales.push(ScaleGrid {
                height,
                width,
                dim,
                values,
            });
        }
        let id_len = cur.u32()? as usize;
        let id = cur.take(id_len)?;
        let image_id = std::str::from_utf8(id).map_err(|_| FmapError::BadImageId)?.to_owned();
        if cur.pos != bytes.len() {
            return Err(FmapError::TrailingBytes(bytes.len() - cur.pos));
        }
        FeatureMap::new(image_id, scales, flags & FLAG_NONNEGATIVE != 0)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FmapError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(FmapError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FmapError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FmapError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn write_fmap(fm: &FeatureMap, path: impl AsRef<Path>) -> Result<(), FmapError> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| FmapError::io(path, e))?;
    file.write_all(&fm.to_bytes()).map_err(|e| FmapError::io(path, e))
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<FeatureMap, FmapError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FmapError::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}
