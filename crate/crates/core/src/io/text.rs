//! TUM trajectories and label-embedding CSV files.

use super::{read_file, write_file, FormatError};
use crate::geometry::Pose;
use nalgebra::{DMatrix, Quaternion, UnitQuaternion, Vector3};
use std::path::{Path, PathBuf};

/// One `timestamp tx ty tz qx qy qz qw` line per pose.
///
/// Lines hold camera-to-world transforms (camera position and orientation), the
/// convention of trajectory-evaluation tools; world-to-camera poses must be
/// inverted by the caller. Values use the shortest round-trip decimal form so
/// parsing returns bit-identical numbers.
pub fn format_tum(timestamps: &[f64], camera_to_world: &[Pose]) -> String {
    assert_eq!(timestamps.len(), camera_to_world.len());
    let mut out = String::new();
    for (t, c2w) in timestamps.iter().zip(camera_to_world) {
        let q = c2w.rotation.quaternion();
        let p = c2w.translation;
        out.push_str(&format!(
            "{t:.6} {} {} {} {} {} {} {}\n",
            p.x, p.y, p.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}

pub fn write_tum(
    path: &Path,
    timestamps: &[f64],
    camera_to_world: &[Pose],
) -> Result<(), FormatError> {
    write_file(path, format_tum(timestamps, camera_to_world).as_bytes())
}

/// Parses TUM text into timestamps and camera-to-world poses.
pub fn parse_tum(text: &str, path: &Path) -> Result<(Vec<f64>, Vec<Pose>), FormatError> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| FormatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let vals = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| parse_err(format!("`{t}`: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != 8 {
            return Err(parse_err(format!(
                "expected 8 fields, found {}",
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-12 {
            return Err(parse_err("zero quaternion".into()));
        }
        // a written unit quaternion renormalizes to itself up to an ulp; keep stored bits when already unit
        let rotation = if (q.norm() - 1.0).abs() < 1e-15 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        stamps.push(vals[0]);
        poses.push(Pose::new(rotation, Vector3::new(vals[1], vals[2], vals[3])));
    }
    Ok((stamps, poses))
}

pub fn read_tum(path: &Path) -> Result<(Vec<f64>, Vec<Pose>), FormatError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| FormatError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_tum(&text, path)
}

/// Parses `name,v1,...,vC` rows into class names and an `L × C` matrix.
pub fn parse_labels_csv(
    text: &str,
    path: &Path,
) -> Result<(Vec<String>, DMatrix<f64>), FormatError> {
    let mut names = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| FormatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default().trim().to_string();
        if name.is_empty() {
            return Err(err("empty class name".into()));
        }
        let vals = fields
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| err(format!("`{}`: {e}", t.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vals.is_empty() {
            return Err(err("no embedding values".into()));
        }
        if let Some(first) = rows.first() {
            if first.len() != vals.len() {
                return Err(err(format!(
                    "row has {} values, previous rows have {}",
                    vals.len(),
                    first.len()
                )));
            }
        }
        names.push(name);
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(FormatError::Invalid {
            path: PathBuf::from(path),
            message: "no label rows".into(),
        });
    }
    let c = rows[0].len();
    let m = DMatrix::from_row_iterator(rows.len(), c, rows.into_iter().flatten());
    Ok((names, m))
}

pub fn read_labels_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>), FormatError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| FormatError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_labels_csv(&text, path)
}

/// Writes label rows with shortest round-trip decimals.
pub fn format_labels_csv(names: &[String], embeddings: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for (name, row) in names.iter().zip(embeddings.row_iter()) {
        out.push_str(name);
        for v in row.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_labels_csv(
    path: &Path,
    names: &[String],
    embeddings: &DMatrix<f64>,
) -> Result<(), FormatError> {
    write_file(path, format_labels_csv(names, embeddings).as_bytes())
}
