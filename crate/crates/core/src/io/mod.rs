//! Binary and text file formats shared by the solver, scene generator and evaluator.
//!
//! Every reader reports the offending path in its error so corrupted inputs can
//! be traced from the command line.

mod bundle;
mod ply;
mod tensor;
mod text;

use std::path::{Path, PathBuf};
use thiserror::Error;

pub use bundle::{
    disparity_paths, read_bundle, read_manifest, write_bundle, write_disparities, Bundle,
    EdgeRecord, KeyframeRecord, Manifest, PoseRecord, BUNDLE_VERSION, MANIFEST,
};
pub use ply::{encode_ply, read_ply, write_ply, PlyCloud};
pub use tensor::{
    decode_tensor, encode_tensor, read_pca, read_tensor, write_pca, write_tensor, Dtype, Tensor,
    PCA_MAGIC, TENSOR_MAGIC, TENSOR_VERSION,
};
pub use text::{
    format_labels_csv, format_tum, parse_labels_csv, parse_tum, read_labels_csv, read_tum,
    write_labels_csv, write_tum,
};

#[derive(Debug, Error)]
pub enum FormatError {
    // the cause is part of the message, not a source, so chained reports print it once
    #[error("{}: {error}", path.display())]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },
    #[error("{}: bad magic bytes {found:?} (expected {expected:?})", path.display())]
    BadMagic {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },
    #[error("{}: unsupported format version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{}: unsupported dtype tag {tag}", path.display())]
    UnsupportedDtype { path: PathBuf, tag: u32 },
    #[error("{}: truncated file ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

impl FormatError {
    pub fn path(&self) -> &Path {
        match self {
            FormatError::Io { path, .. }
            | FormatError::BadMagic { path, .. }
            | FormatError::UnsupportedVersion { path, .. }
            | FormatError::UnsupportedDtype { path, .. }
            | FormatError::Truncated { path, .. }
            | FormatError::Parse { path, .. }
            | FormatError::Invalid { path, .. } => path,
        }
    }

    /// Replaces the placeholder path used by in-memory decoders.
    pub(crate) fn at(mut self, p: &Path) -> Self {
        match &mut self {
            FormatError::Io { path, .. }
            | FormatError::BadMagic { path, .. }
            | FormatError::UnsupportedVersion { path, .. }
            | FormatError::UnsupportedDtype { path, .. }
            | FormatError::Truncated { path, .. }
            | FormatError::Parse { path, .. }
            | FormatError::Invalid { path, .. } => *path = p.to_path_buf(),
        }
        self
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|error| FormatError::Io {
        path: path.to_path_buf(),
        error,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|error| FormatError::Io {
                path: parent.to_path_buf(),
                error,
            })?;
        }
    }
    std::fs::write(path, bytes).map_err(|error| FormatError::Io {
        path: path.to_path_buf(),
        error,
    })
}
