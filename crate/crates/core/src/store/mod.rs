//! Page repository and crash-safe checkpoints. The byte layout of every
//! file is specified in `FORMAT.md` at the repository root.

pub mod checkpoint;
pub mod codec;
pub mod repo;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{
    checkpoint_path, list_checkpoints, load_latest, read_checkpoint, recover, write_checkpoint, Checkpoint,
    LoadedCheckpoint, RecoveredState,
};
pub use repo::{OpenReport, PageMeta, PageRecord, PageRepo};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no stored page for {0}")]
    Missing(String),
    #[error("storage device is full")]
    StorageFull,
    #[error("I/O failure: {0}")]
    IoFailure(std::io::Error),
    #[error("corrupt record at offset {offset}: {reason}")]
    CorruptRecord { offset: u64, reason: String },
    #[error("corrupt checkpoint {}: {reason}", path.display())]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("body does not match the fingerprint given for {0}")]
    FingerprintMismatch(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::IoFailure(e)
        }
    }
}
