//! Problem-bundle directories: a `graph.json` manifest plus tensor files.
//!
//! ```text
//! graph.json
//! keyframes/{k}_features.kmvt   K × H × W
//! keyframes/{k}_disparity.kmvt  1 × H × W  (initial state)
//! keyframes/{k}_prior.kmvt      1 × H × W
//! edges/{i}_{j}_flow.kmvt       2 × H × W  (x plane, y plane)
//! edges/{i}_{j}_conf.kmvt       1 × H × W
//! pca.kmvp                      optional
//! ```
//!
//! Poses are stored world-to-camera with the quaternion as `[x, y, z, w]`.

use super::{
    read_file, read_pca, read_tensor, write_file, write_pca, write_tensor, Dtype, FormatError,
    Tensor,
};
use crate::features::PcaModel;
use crate::geometry::{DisparityMap, Intrinsics, Pose};
use crate::graph::{Keyframe, KeyframeGraph};
use crate::residuals::FlowObservation;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST: &str = "graph.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    pub rotation_xyzw: [f64; 4],
}

impl PoseRecord {
    pub fn from_pose(p: &Pose) -> Self {
        let q = p.rotation.quaternion();
        Self {
            translation: [p.translation.x, p.translation.y, p.translation.z],
            rotation_xyzw: [q.i, q.j, q.k, q.w],
        }
    }

    pub fn to_pose(&self) -> Option<Pose> {
        let [x, y, z, w] = self.rotation_xyzw;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !(n > 1e-12) || self.translation.iter().any(|v| !v.is_finite()) {
            return None;
        }
        // keep stored bits of an already-unit quaternion
        let rotation = if (n - 1.0).abs() < 1e-15 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        let [tx, ty, tz] = self.translation;
        Some(Pose::new(rotation, Vector3::new(tx, ty, tz)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeRecord {
    pub index: usize,
    pub stream: usize,
    pub world_to_camera: PoseRecord,
    pub frozen: bool,
    pub features: String,
    pub disparity: String,
    pub disparity_prior: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub source: usize,
    pub target: usize,
    pub flow: String,
    pub confidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Vec<Intrinsics>,
    pub keyframes: Vec<KeyframeRecord>,
    pub edges: Vec<EdgeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<String>,
}

/// A loaded bundle.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub graph: KeyframeGraph,
    pub pca: Option<PcaModel>,
}

fn invalid(path: &Path, message: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `graph` (and optionally the PCA model) under `dir`.
pub fn write_bundle(
    dir: &Path,
    graph: &KeyframeGraph,
    pca: Option<&PcaModel>,
    dtype: Dtype,
) -> Result<(), FormatError> {
    let mut manifest = Manifest {
        version: BUNDLE_VERSION,
        width: graph.width(),
        height: graph.height(),
        intrinsics: graph.intrinsics.clone(),
        keyframes: Vec::new(),
        edges: Vec::new(),
        pca: pca.map(|_| "pca.kmvp".to_string()),
    };
    for (k, kf) in graph.keyframes.iter().enumerate() {
        let rec = KeyframeRecord {
            index: kf.index,
            stream: kf.stream,
            world_to_camera: PoseRecord::from_pose(&kf.pose),
            frozen: kf.frozen,
            features: format!("keyframes/{k:03}_features.kmvt"),
            disparity: format!("keyframes/{k:03}_disparity.kmvt"),
            disparity_prior: format!("keyframes/{k:03}_prior.kmvt"),
        };
        write_tensor(
            &dir.join(&rec.features),
            &Tensor::from_feature_map(&kf.features).with_dtype(dtype),
        )?;
        write_tensor(
            &dir.join(&rec.disparity),
            &Tensor::from_disparity(&kf.disparity).with_dtype(dtype),
        )?;
        write_tensor(
            &dir.join(&rec.disparity_prior),
            &Tensor::from_disparity(&kf.disparity_prior).with_dtype(dtype),
        )?;
        manifest.keyframes.push(rec);
    }
    for e in &graph.edges {
        let rec = EdgeRecord {
            source: e.source,
            target: e.target,
            flow: format!("edges/{:03}_{:03}_flow.kmvt", e.source, e.target),
            confidence: format!("edges/{:03}_{:03}_conf.kmvt", e.source, e.target),
        };
        write_tensor(
            &dir.join(&rec.flow),
            &Tensor::new(2, e.height, e.width, e.flow.clone()).with_dtype(dtype),
        )?;
        write_tensor(
            &dir.join(&rec.confidence),
            &Tensor::scalar_grid(e.height, e.width, e.confidence.clone()).with_dtype(dtype),
        )?;
        manifest.edges.push(rec);
    }
    if let (Some(model), Some(name)) = (pca, &manifest.pca) {
        write_pca(&dir.join(name), model)?;
    }
    let path = dir.join(MANIFEST);
    let mut json =
        serde_json::to_string_pretty(&manifest).map_err(|e| invalid(&path, e.to_string()))?;
    json.push('\n');
    write_file(&path, json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, FormatError> {
    let path = dir.join(MANIFEST);
    let bytes = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| FormatError::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.version != BUNDLE_VERSION {
        return Err(FormatError::UnsupportedVersion {
            path,
            version: manifest.version,
        });
    }
    Ok(manifest)
}

fn grid_tensor(path: &Path, channels: usize, w: usize, h: usize) -> Result<Tensor, FormatError> {
    let t = read_tensor(path)?;
    if t.channels != channels || t.width != w || t.height != h {
        return Err(invalid(
            path,
            format!(
                "tensor is {}x{}x{}, expected {channels}x{h}x{w}",
                t.channels, t.height, t.width
            ),
        ));
    }
    Ok(t)
}

/// Loads and validates a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<Bundle, FormatError> {
    let m = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST);
    let (w, h) = (m.width, m.height);
    let mut keyframes = Vec::with_capacity(m.keyframes.len());
    for rec in &m.keyframes {
        let pose = rec.world_to_camera.to_pose().ok_or_else(|| {
            invalid(
                &manifest_path,
                format!("keyframe {}: invalid pose", rec.index),
            )
        })?;
        let fpath = dir.join(&rec.features);
        let ft = read_tensor(&fpath)?;
        if ft.width != w || ft.height != h {
            return Err(invalid(
                &fpath,
                format!("features are {}x{}, grid is {h}x{w}", ft.height, ft.width),
            ));
        }
        let features = ft
            .into_feature_map()
            .map_err(|e| invalid(&fpath, e.to_string()))?;
        let disp = |name: &str| -> Result<DisparityMap, FormatError> {
            let p = dir.join(name);
            Ok(DisparityMap::from_values(
                w,
                h,
                grid_tensor(&p, 1, w, h)?.data,
            ))
        };
        keyframes.push(Keyframe {
            index: rec.index,
            stream: rec.stream,
            pose,
            disparity: disp(&rec.disparity)?,
            disparity_prior: disp(&rec.disparity_prior)?,
            features,
            frozen: rec.frozen,
        });
    }
    let mut edges = Vec::with_capacity(m.edges.len());
    for rec in &m.edges {
        let fp = dir.join(&rec.flow);
        let flow = grid_tensor(&fp, 2, w, h)?.data;
        let cp = dir.join(&rec.confidence);
        let conf = grid_tensor(&cp, 1, w, h)?.data;
        edges.push(
            FlowObservation::new(rec.source, rec.target, w, h, flow, conf)
                .map_err(|e| invalid(&fp, e.to_string()))?,
        );
    }
    let graph = KeyframeGraph::new(keyframes, edges, m.intrinsics.clone())
        .map_err(|e| invalid(&manifest_path, e.to_string()))?;
    let pca = m
        .pca
        .as_ref()
        .map(|name| read_pca(&dir.join(name)))
        .transpose()?;
    Ok(Bundle { graph, pca })
}

/// Paths of the per-keyframe disparity tensors written by [`write_disparities`].
pub fn disparity_paths(dir: &Path, n: usize) -> Vec<PathBuf> {
    (0..n)
        .map(|k| dir.join(format!("disparity/{k:03}.kmvt")))
        .collect()
}

/// Writes each keyframe's current disparity as `disparity/{k}.kmvt`.
pub fn write_disparities(
    dir: &Path,
    graph: &KeyframeGraph,
    dtype: Dtype,
) -> Result<Vec<PathBuf>, FormatError> {
    let paths = disparity_paths(dir, graph.keyframes.len());
    for (p, kf) in paths.iter().zip(&graph.keyframes) {
        write_tensor(p, &Tensor::from_disparity(&kf.disparity).with_dtype(dtype))?;
    }
    Ok(paths)
}
