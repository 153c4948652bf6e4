//! On-disk formats: binary episodes, text sidecars, checkpoints, teacher
//! targets and manifests.

pub mod checkpoint;
pub mod container;
pub mod dataset_dir;
pub mod episode;
pub mod targets;
pub mod text;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {major}.{minor} (reader supports {supported}.x)")]
    Version { major: u16, minor: u16, supported: u16 },

    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: u64, needed: u64 },

    #[error("checksum mismatch in section `{section}` at offset {offset}")]
    Checksum { section: String, offset: u64 },

    #[error("malformed section `{section}` at offset {offset}: {detail}")]
    Malformed {
        section: String,
        offset: u64,
        detail: String,
    },

    #[error("calibration mismatch: expected {expected}, found {found}")]
    CalibrationMismatch { expected: String, found: String },

    #[error("dataset mismatch: target set built for {expected}, dataset is {found}")]
    DatasetMismatch { expected: String, found: String },

    #[error("content hash mismatch for {file}: manifest has {expected}, file hashes to {found}")]
    HashMismatch {
        file: String,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    Text(String),
}
