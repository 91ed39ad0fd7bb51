//! Label-efficient part segmentation guidance.
//!
//! Patches of an image are scored by a per-part kernel classifier trained
//! from a handful of prototype-level annotations; confident patches are
//! grouped into regions of interest with a positional prompt, and a
//! promptable segmentation backend turns each region into a mask.

pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod guidance;
pub mod patchgrid;
pub mod prototypes;
pub mod service;
pub mod synthetic;

pub use geometry::PixelBox;

/// Any error the pipeline can produce.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Grid(#[from] patchgrid::GridError),
    #[error(transparent)]
    Prototype(#[from] prototypes::PrototypeError),
    #[error(transparent)]
    Classifier(#[from] classifier::ClassifierError),
    #[error(transparent)]
    Guidance(#[from] guidance::GuidanceError),
    #[error(transparent)]
    Evaluation(#[from] evaluation::EvalError),
}
