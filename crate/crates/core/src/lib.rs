//! Storage-budgeted compressed replay buffers for continual learning.
//!
//! Lossy compression lets a fixed replay budget hold more exemplars at the
//! cost of fidelity. The crate picks the compression quality without any
//! training: for each candidate quality it packs the mean-of-feature ranking
//! into the budget, then compares the Gram volume of the compressed exemplar
//! features against that of the same exemplars uncompressed. The lowest
//! quality whose volume ratio stays near one wins.
//!
//! - [`features`]: FMX1 feature files and dataset manifests
//! - [`selection`]: mean-of-feature ranking
//! - [`compression`]: backends, budgets, prefix packing
//! - [`volume`]: normalized Gram log-volumes and `R_q`
//! - [`selector`]: the constrained quality choice
//! - [`buffer`]: the on-disk replay buffer
//! - [`harness`]: synthetic benchmark and grid-search oracle
//! - [`pipeline`]: file-backed orchestration used by the CLI

pub mod buffer;
pub mod compression;
pub mod features;
mod fsutil;
pub mod harness;
pub mod pipeline;
pub mod selection;
pub mod selector;
pub mod volume;

pub use fsutil::{to_json_bytes, write_atomic};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Features(#[from] features::FeatureIoError),
    #[error(transparent)]
    Selection(#[from] selection::SelectionError),
    #[error(transparent)]
    Compression(#[from] compression::CompressionError),
    #[error(transparent)]
    Volume(#[from] volume::VolumeError),
    #[error(transparent)]
    Selector(#[from] selector::SelectorError),
    #[error(transparent)]
    Buffer(#[from] buffer::BufferError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}

impl Error {
    /// True when the failure came from the filesystem rather than from invalid input.
    pub fn is_io(&self) -> bool {
        let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(self);
        while let Some(e) = cur {
            if e.is::<std::io::Error>() {
                return true;
            }
            cur = e.source();
        }
        false
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
