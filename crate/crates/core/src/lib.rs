//! Generalized alpha-pooling of local feature grids, the kernel view of the
//! pooled descriptors, and decision explanations built on it.

pub mod alphapool;
pub mod cli;
pub mod dualclf;
pub mod featio;
pub mod influence;
pub mod kernelview;
pub mod sketch;

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Fmap(#[from] featio::FmapError),
    #[error(transparent)]
    Manifest(#[from] featio::ManifestError),
    #[error(transparent)]
    Synth(#[from] featio::SynthError),
    #[error(transparent)]
    Pool(#[from] alphapool::PoolError),
    #[error(transparent)]
    Fit(#[from] alphapool::FitError),
    #[error(transparent)]
    Sketch(#[from] sketch::SketchError),
    #[error(transparent)]
    Kernel(#[from] kernelview::KernelError),
    #[error(transparent)]
    Dual(#[from] dualclf::DualError),
    #[error(transparent)]
    Influence(#[from] influence::InfluenceError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
