//! On-disk dataset artifacts: manifest, mask sidecars, patch features and
//! similarity scores.

mod features;
mod manifest;
mod mask;
mod similarity;

use std::path::{Path, PathBuf};

pub use features::{load_features, FeatureBlob, PatchKey, HEADER_LEN as GSFV_HEADER_LEN, MAGIC as GSFV_MAGIC};
pub use manifest::{ImageEntry, ImageRecord, Manifest, ManifestFile, MergeTable};
pub use mask::{BitMask, SegmentMask};
pub use similarity::SimilarityScores;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid run-length mask: {0}")]
    InvalidRle(String),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error("feature blob: {0}")]
    Features(String),
    #[error("no feature row for patch {index} of image '{image_id}'")]
    MissingFeature { image_id: String, index: u32 },
    #[error("similarity scores: {0}")]
    Scores(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        DatasetError::Json { path: path.to_path_buf(), source }
    }
}
