//! Text formats: KITTI poses, g2o graphs, window edge files, detection traces and loop logs.
//!
//! Every float is written with 17 significant digits, so parsing a written file restores the
//! exact bits.

mod edges;
mod g2o;
mod kitti;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use edges::{
    format_detections, format_edge_file, format_loop_log, parse_detections, parse_edge_file, parse_loop_log, EdgeFile,
    WindowKind,
};
pub use g2o::{format_g2o, parse_g2o};
pub use kitti::{format_kitti, load_kitti_poses, parse_kitti, save_kitti_poses};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot serialize: {0}")]
    Format(String),
}

pub(crate) fn parse_error(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { line, message: message.into() }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

/// Appends `v` with 17 significant digits.
pub(crate) fn push_float(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

pub(crate) fn push_floats(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for (k, v) in values.into_iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        push_float(out, v);
    }
}

pub(crate) fn parse_float(token: &str, line: usize) -> Result<f64, IoError> {
    let v: f64 = token.parse().map_err(|_| parse_error(line, format!("'{token}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(line, format!("non-finite value '{token}'")));
    }
    Ok(v)
}

pub(crate) fn parse_index(token: &str, line: usize) -> Result<usize, IoError> {
    token.parse().map_err(|_| parse_error(line, format!("'{token}' is not a frame index")))
}

/// Non-blank lines that are not `#` comments, numbered from 1.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}
