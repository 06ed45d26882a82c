//! Binary little-endian PLY point clouds with `x y z` floats and an `i32` label.

use super::{read_file, write_file, FormatError};
use nalgebra::Point3;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyCloud {
    pub points: Vec<Point3<f32>>,
    /// One label per point; −1 means unlabeled.
    pub labels: Vec<i32>,
}

pub fn encode_ply(cloud: &PlyCloud) -> Vec<u8> {
    assert_eq!(cloud.points.len(), cloud.labels.len());
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty int label\nend_header\n",
        cloud.points.len()
    );
    let mut out = header.into_bytes();
    out.reserve(cloud.points.len() * 16);
    for (p, l) in cloud.points.iter().zip(&cloud.labels) {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.z.to_le_bytes());
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PlyCloud) -> Result<(), FormatError> {
    write_file(path, &encode_ply(cloud))
}

pub fn read_ply(path: &Path) -> Result<PlyCloud, FormatError> {
    let bytes = read_file(path)?;
    let invalid = |message: String| FormatError::Invalid {
        path: path.to_path_buf(),
        message,
    };
    if !bytes.starts_with(b"ply\n") {
        return Err(FormatError::BadMagic {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            expected: "ply\n",
        });
    }
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| invalid("missing end_header".into()))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| invalid(e.to_string()))?;

    let mut count = None;
    let mut props = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["ply"] | ["end_header"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(invalid(format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| FormatError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?)
            }
            ["element", other, ..] => return Err(invalid(format!("unexpected element {other}"))),
            ["property", ty, name] => props.push(((*ty).to_string(), (*name).to_string())),
            _ => {
                return Err(FormatError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("unrecognized header line `{line}`"),
                })
            }
        }
    }
    let expected = [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("int", "label"),
    ];
    let layout_ok = props.len() == expected.len()
        && props
            .iter()
            .zip(expected)
            .all(|((t, n), (et, en))| t == et && n == en);
    if !layout_ok {
        return Err(invalid(format!("unsupported vertex layout {props:?}")));
    }
    let count = count.ok_or_else(|| invalid("missing vertex element".into()))?;
    let body = &bytes[end..];
    if body.len() != count * 16 {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} body bytes for {count} vertices", body.len()),
        });
    }
    let mut cloud = PlyCloud::default();
    for rec in body.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
        cloud.points.push(Point3::new(f(0), f(4), f(8)));
        cloud
            .labels
            .push(i32::from_le_bytes(rec[12..16].try_into().unwrap()));
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PlyCloud {
            points: vec![
                Point3::new(0.1, -2.5, 3.25),
                Point3::new(f32::MIN_POSITIVE, 1e30, -0.0),
            ],
            labels: vec![3, -1],
        };
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        for (a, b) in back.points.iter().zip(&cloud.points) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        assert_eq!(back.labels, cloud.labels);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, b"plx\nstuff").unwrap();
        let err = read_ply(&path).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { .. }));
        assert!(err.to_string().contains("bad.ply"));

        let mut bytes = encode_ply(&PlyCloud {
            points: vec![Point3::new(1.0, 2.0, 3.0)],
            labels: vec![0],
        });
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_ply(&path),
            Err(FormatError::Truncated { .. })
        ));

        std::fs::write(
            &path,
            b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(FormatError::Invalid { .. })));
    }
}
