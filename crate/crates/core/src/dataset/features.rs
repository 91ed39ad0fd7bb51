//! The `GSFV` patch-feature container.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size          field
//! 0       4             magic "GSFV"
//! 4       2             version (u16, currently 1)
//! 6       4             patch_count N (u32)
//! 10      4             dim D (u32)
//! 14      variable      index table, N entries of
//!                         u16 id_len | id_len bytes UTF-8 image id | u32 patch index
//! ...     N * D * 4     row-major f32 matrix, row r belongs to index entry r
//! ```
//!
//! Nothing follows the matrix; trailing bytes are an error.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::DatasetError;
use crate::patchgrid::PatchGrid;

pub const MAGIC: &[u8; 4] = b"GSFV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

/// Identifies one patch across the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct PatchKey {
    pub image_id: String,
    pub index: u32,
}

impl PatchKey {
    pub fn new(image_id: impl Into<String>, index: u32) -> Self {
        Self { image_id: image_id.into(), index }
    }
}

/// Feature matrix with a row per patch and constant-time keyed lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlob {
    dim: usize,
    keys: Vec<PatchKey>,
    data: Vec<f32>,
    lookup: HashMap<String, HashMap<u32, usize>>,
}

impl FeatureBlob {
    pub fn new(dim: usize) -> Self {
        Self { dim, keys: Vec::new(), data: Vec::new(), lookup: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[PatchKey] {
        &self.keys
    }

    pub fn push(&mut self, key: PatchKey, row: &[f32]) -> Result<(), DatasetError> {
        if row.len() != self.dim {
            return Err(DatasetError::Features(format!(
                "row for {}#{} has {} values, expected {}",
                key.image_id,
                key.index,
                row.len(),
                self.dim
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(DatasetError::Features(format!(
                "non-finite value {bad} in row for {}#{}",
                key.image_id, key.index
            )));
        }
        let slot = self.keys.len();
        let per_image = self.lookup.entry(key.image_id.clone()).or_default();
        if per_image.insert(key.index, slot).is_some() {
            return Err(DatasetError::Features(format!(
                "duplicate row for {}#{}",
                key.image_id, key.index
            )));
        }
        self.keys.push(key);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn row(&self, image_id: &str, index: u32) -> Option<&[f32]> {
        let slot = *self.lookup.get(image_id)?.get(&index)?;
        Some(self.row_at(slot))
    }

    pub fn row_at(&self, slot: usize) -> &[f32] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Like [`row`](Self::row) but a missing row is an error.
    pub fn require(&self, image_id: &str, index: u32) -> Result<&[f32], DatasetError> {
        self.row(image_id, index).ok_or_else(|| DatasetError::MissingFeature {
            image_id: image_id.to_string(),
            index,
        })
    }

    /// Verifies that every patch of every grid has a row.
    pub fn check_covers<'a>(&self, grids: impl IntoIterator<Item = &'a PatchGrid>) -> Result<(), DatasetError> {
        for grid in grids {
            for patch in &grid.patches {
                self.require(&grid.image_id, patch.index)?;
            }
        }
        Ok(())
    }

    /// Size in bytes of the encoded blob.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self.keys.iter().map(|k| 2 + k.image_id.len() + 4).sum::<usize>()
            + self.data.len() * 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for key in &self.keys {
            let id = key.image_id.as_bytes();
            let len = u16::try_from(id.len()).map_err(|_| {
                DatasetError::Features(format!("image id '{}' longer than 65535 bytes", key.image_id))
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id);
            out.extend_from_slice(&key.index.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(DatasetError::Features("bad magic, expected \"GSFV\"".into()));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(DatasetError::Features(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut keys = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| DatasetError::Features("image id is not UTF-8".into()))?
                .to_string();
            keys.push(PatchKey { image_id: id, index: cur.u32()? });
        }
        let remaining = bytes.len() - cur.pos;
        if remaining != count * dim * 4 {
            return Err(DatasetError::Features(format!(
                "matrix section has {remaining} bytes, header implies {count} x {dim} f32 = {}",
                count * dim * 4
            )));
        }
        let mut blob = FeatureBlob::new(dim);
        let mut row = vec![0f32; dim];
        for key in keys {
            for v in row.iter_mut() {
                *v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            }
            blob.push(key, &row)?;
        }
        Ok(blob)
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path).map_err(|e| DatasetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| DatasetError::io(path, e))
    }
}

/// Reads a blob and checks that it covers the given grids.
pub fn load_features<'a>(
    path: &Path,
    grids: impl IntoIterator<Item = &'a PatchGrid>,
) -> Result<FeatureBlob, DatasetError> {
    let blob = FeatureBlob::read(path)?;
    blob.check_covers(grids)?;
    Ok(blob)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DatasetError::Features(format!("truncated blob at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
