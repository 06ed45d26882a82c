//! Trajectory error after alignment, and semantic-map evaluation: point-cloud
//! fusion, cosine-argmax labeling, 5-NN label transfer and segmentation metrics.

use crate::features::{pca_decode, PcaModel};
use crate::graph::KeyframeGraph;
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Label of points whose embedding is missing.
pub const UNLABELED: i32 = -1;
/// Embedding rows at or below this norm are unlabeled.
pub const MIN_NORM: f64 = 1e-8;
/// Neighbors gathered per ground-truth vertex.
pub const TRANSFER_NEIGHBORS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectories differ in length: {est} estimated vs {gt} ground-truth poses")]
    LengthMismatch { est: usize, gt: usize },
    #[error("alignment needs at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("ground-truth positions are degenerate (rank < 2)")]
    Degenerate,
    #[error("embedding dimension {points} does not match label dimension {labels}")]
    DimensionMismatch { points: usize, labels: usize },
    #[error("invalid label set: {0}")]
    InvalidLabels(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("label arrays differ in length: {0} vs {1}")]
    LabelLength(usize, usize),
    #[error("unknown alignment `{0}` (expected rigid, sim or none)")]
    UnknownAlignment(String),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

/// World-frame points with decoded embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPointCloud {
    pub points: Vec<Vector3<f64>>,
    /// `N × C`, one row per point.
    pub embeddings: DMatrix<f64>,
}

/// Unprojects every `stride`-th positive-disparity pixel of each keyframe into the
/// world and decodes its embedding. Coincident observations stay separate points.
pub fn fuse_point_cloud(
    graph: &KeyframeGraph,
    pca: &PcaModel,
    stride: usize,
) -> Result<SemanticPointCloud, EvalError> {
    if graph.keyframes.is_empty() {
        return Err(EvalError::Empty("graph has no keyframes"));
    }
    let stride = stride.max(1);
    let mut points = Vec::new();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for kf in &graph.keyframes {
        let k = graph.intrinsics[kf.stream];
        let c2w = kf.pose.inverse();
        let (w, h) = (kf.disparity.width, kf.disparity.height);
        let mut valid = 0usize;
        for y in 0..h {
            for x in 0..w {
                let d = kf.disparity.get(x, y);
                if !(d > 0.0 && d.is_finite()) {
                    continue;
                }
                valid += 1;
                if !(valid - 1).is_multiple_of(stride) {
                    continue;
                }
                let p = k.unproject(&Vector2::new(x as f64, y as f64), d);
                points.push(c2w.transform_point(&p));
                rows.push(pca_decode(&kf.features.pixel(x, y), pca)?);
            }
        }
    }
    let c = pca.input_dim();
    let embeddings = DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]);
    Ok(SemanticPointCloud { points, embeddings })
}

/// Class names and their text vectors in the decoded feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub names: Vec<String>,
    /// `L × C`.
    pub text_embeddings: DMatrix<f64>,
}

impl LabelSet {
    pub fn new(names: Vec<String>, text_embeddings: DMatrix<f64>) -> Result<Self, EvalError> {
        if names.len() < 2 {
            return Err(EvalError::InvalidLabels("need at least 2 classes".into()));
        }
        if names.len() != text_embeddings.nrows() {
            return Err(EvalError::InvalidLabels(format!(
                "{} names for {} embedding rows",
                names.len(),
                text_embeddings.nrows()
            )));
        }
        if let Some(i) = text_embeddings
            .row_iter()
            .position(|r| !(r.norm() > MIN_NORM))
        {
            return Err(EvalError::InvalidLabels(format!(
                "class `{}` has a zero embedding",
                names[i]
            )));
        }
        Ok(Self {
            names,
            text_embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Cosine-argmax class per embedding row; ties go to the lowest class index.
pub fn assign_labels(embeddings: &DMatrix<f64>, labels: &LabelSet) -> Result<Vec<i32>, EvalError> {
    let t = &labels.text_embeddings;
    if embeddings.ncols() != t.ncols() {
        return Err(EvalError::DimensionMismatch {
            points: embeddings.ncols(),
            labels: t.ncols(),
        });
    }
    let norms: Vec<f64> = t.row_iter().map(|r| r.norm()).collect();
    Ok(embeddings
        .row_iter()
        .map(|e| {
            let n = e.norm();
            if !(n > MIN_NORM) {
                return UNLABELED;
            }
            let mut best = (f64::NEG_INFINITY, UNLABELED);
            for (c, (row, tn)) in t.row_iter().zip(&norms).enumerate() {
                let cs = e.dot(&row) / (n * tn);
                if cs > best.0 {
                    best = (cs, c as i32);
                }
            }
            best.1
        })
        .collect())
}

/// Static 3-D KD-tree over a point set, split on the widest axis at the median.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices in implicit-tree order: the median of `[lo, hi)` sits at `(lo + hi) / 2`.
    order: Vec<usize>,
    axes: Vec<u8>,
}

/// A neighbor and its squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

fn closer(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index))
}

impl KdTree {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut axes = vec![0u8; n];
        Self::build(&points, &mut order, &mut axes, 0, n);
        Self {
            points,
            order,
            axes,
        }
    }

    fn build(points: &[Vector3<f64>], order: &mut [usize], axes: &mut [u8], lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let slice = &mut order[lo..hi];
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in slice.iter() {
            min = min.inf(&points[i]);
            max = max.sup(&points[i]);
        }
        let axis = (max - min).imax();
        let mid = (hi - lo) / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let m = lo + mid;
        axes[m] = axis as u8;
        Self::build(points, order, axes, lo, m);
        Self::build(points, order, axes, m + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Up to `k` nearest points, closest first; equal distances order by index.
    pub fn nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(q, k, 0, self.points.len(), &mut best);
        }
        best
    }

    fn search(&self, q: &Vector3<f64>, k: usize, lo: usize, hi: usize, best: &mut Vec<Neighbor>) {
        if lo >= hi {
            return;
        }
        let m = lo + (hi - lo) / 2;
        let idx = self.order[m];
        let p = &self.points[idx];
        let cand = Neighbor {
            index: idx,
            dist2: (p - q).norm_squared(),
        };
        let pos = best.partition_point(|b| closer(b, &cand) == Ordering::Less);
        if pos < k {
            best.insert(pos, cand);
            best.truncate(k);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[m] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, m), (m + 1, hi))
        } else {
            ((m + 1, hi), (lo, m))
        };
        self.search(q, k, near.0, near.1, best);
        // ties at the splitting plane must still be visited
        if best.len() < k || diff * diff <= best[best.len() - 1].dist2 {
            self.search(q, k, far.0, far.1, best);
        }
    }
}

/// Majority label of `neighbors` (closest first); a tie goes to the label of the
/// single nearest point.
pub fn vote(neighbors: &[Neighbor], labels: &[i32]) -> i32 {
    let mut counts: Vec<(i32, usize)> = Vec::new();
    for n in neighbors {
        let l = labels[n.index];
        match counts.iter_mut().find(|(c, _)| *c == l) {
            Some(e) => e.1 += 1,
            None => counts.push((l, 1)),
        }
    }
    let top = counts.iter().map(|c| c.1).max().unwrap_or(0);
    let leaders: Vec<i32> = counts.iter().filter(|c| c.1 == top).map(|c| c.0).collect();
    match leaders.as_slice() {
        [] => UNLABELED,
        [only] => *only,
        _ => labels[neighbors[0].index],
    }
}

/// Predicted label for every ground-truth vertex from its 5 nearest labeled
/// predicted points; fewer are used when fewer exist.
pub fn knn_transfer(
    pred_points: &[Vector3<f64>],
    pred_labels: &[i32],
    gt_points: &[Vector3<f64>],
) -> Result<Vec<i32>, EvalError> {
    if pred_points.len() != pred_labels.len() {
        return Err(EvalError::LabelLength(pred_points.len(), pred_labels.len()));
    }
    if pred_points.is_empty() || gt_points.is_empty() {
        return Err(EvalError::Empty(
            "knn transfer needs predicted and ground-truth points",
        ));
    }
    let keep: Vec<usize> = (0..pred_points.len())
        .filter(|&i| pred_labels[i] != UNLABELED)
        .collect();
    if keep.is_empty() {
        return Ok(vec![UNLABELED; gt_points.len()]);
    }
    let labels: Vec<i32> = keep.iter().map(|&i| pred_labels[i]).collect();
    let tree = KdTree::new(keep.iter().map(|&i| pred_points[i]).collect());
    Ok(gt_points
        .par_iter()
        .map(|q| vote(&tree.nearest(q, TRANSFER_NEIGHBORS), &labels))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Common,
    Tail,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Head => "head",
            Group::Common => "common",
            Group::Tail => "tail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub iou: f64,
    pub acc: f64,
    /// Ground-truth points of this class.
    pub count: usize,
    pub group: Group,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMetrics {
    pub group: Group,
    pub classes: usize,
    pub miou: f64,
    pub fmiou: f64,
    pub macc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    /// Classes present in the ground truth, by class index.
    pub classes: Vec<ClassMetrics>,
    pub miou: f64,
    pub fmiou: f64,
    pub macc: f64,
    pub groups: Vec<GroupMetrics>,
}

fn summarize(classes: &[&ClassMetrics]) -> (f64, f64, f64) {
    if classes.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = classes.len() as f64;
    let total: usize = classes.iter().map(|c| c.count).sum();
    let miou = classes.iter().map(|c| c.iou).sum::<f64>() / n;
    // one division keeps a perfect score exactly 1
    let fmiou = classes.iter().map(|c| c.count as f64 * c.iou).sum::<f64>() / total as f64;
    let macc = classes.iter().map(|c| c.acc).sum::<f64>() / n;
    (miou, fmiou, macc)
}

/// IoU, accuracy and their means over classes present in `gt`.
///
/// Points with an unlabeled ground truth are ignored; unlabeled predictions count as misses.
/// Present classes are ranked by count (descending, then by index) and split into
/// head/common/tail groups of equal size, earlier groups taking the remainder.
pub fn seg_metrics(pred: &[i32], gt: &[i32]) -> Result<SegMetrics, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LabelLength(pred.len(), gt.len()));
    }
    let l = gt.iter().chain(pred).copied().max().unwrap_or(-1);
    if l < 0 {
        return Err(EvalError::Empty("no labeled ground-truth points"));
    }
    let l = l as usize + 1;
    let mut tp = vec![0usize; l];
    let mut fp = vec![0usize; l];
    let mut count = vec![0usize; l];
    for (&p, &g) in pred.iter().zip(gt) {
        if g < 0 {
            continue;
        }
        count[g as usize] += 1;
        if p == g {
            tp[g as usize] += 1;
        } else if p >= 0 {
            fp[p as usize] += 1;
        }
    }
    let mut classes: Vec<ClassMetrics> = (0..l)
        .filter(|&c| count[c] > 0)
        .map(|c| {
            let fneg = count[c] - tp[c];
            ClassMetrics {
                class: c,
                iou: tp[c] as f64 / (tp[c] + fp[c] + fneg) as f64,
                acc: tp[c] as f64 / count[c] as f64,
                count: count[c],
                group: Group::Head,
            }
        })
        .collect();
    if classes.is_empty() {
        return Err(EvalError::Empty("no labeled ground-truth points"));
    }
    let mut ranked: Vec<usize> = (0..classes.len()).collect();
    ranked.sort_by(|&a, &b| {
        classes[b]
            .count
            .cmp(&classes[a].count)
            .then(classes[a].class.cmp(&classes[b].class))
    });
    let m = ranked.len();
    let sizes = [m.div_ceil(3), m / 3 + usize::from(m % 3 > 1), m / 3];
    let mut start = 0;
    for (g, size) in [Group::Head, Group::Common, Group::Tail]
        .into_iter()
        .zip(sizes)
    {
        for &i in &ranked[start..start + size] {
            classes[i].group = g;
        }
        start += size;
    }
    let all: Vec<&ClassMetrics> = classes.iter().collect();
    let (miou, fmiou, macc) = summarize(&all);
    let groups = [Group::Head, Group::Common, Group::Tail]
        .into_iter()
        .map(|g| {
            let members: Vec<&ClassMetrics> = classes.iter().filter(|c| c.group == g).collect();
            let (miou, fmiou, macc) = summarize(&members);
            GroupMetrics {
                group: g,
                classes: members.len(),
                miou,
                fmiou,
                macc,
            }
        })
        .collect();
    Ok(SegMetrics {
        classes,
        miou,
        fmiou,
        macc,
        groups,
    })
}

/// `class,iou,acc,count,group` rows followed by a `metric,value` summary block.
pub fn format_metrics_csv(m: &SegMetrics, names: Option<&[String]>) -> String {
    let mut out = String::from("class,iou,acc,count,group\n");
    for c in &m.classes {
        let name = names
            .and_then(|n| n.get(c.class).cloned())
            .unwrap_or_else(|| c.class.to_string());
        out.push_str(&format!(
            "{name},{:.6},{:.6},{},{}\n",
            c.iou, c.acc, c.count, c.group
        ));
    }
    out.push_str("\nmetric,value\n");
    out.push_str(&format!(
        "mIoU,{:.6}\nfmIoU,{:.6}\nmAcc,{:.6}\n",
        m.miou, m.fmiou, m.macc
    ));
    for g in &m.groups {
        out.push_str(&format!(
            "{0}_mIoU,{1:.6}\n{0}_fmIoU,{2:.6}\n{0}_mAcc,{3:.6}\n",
            g.group, g.miou, g.fmiou, g.macc
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Rigid,
    /// Rigid plus uniform scale.
    #[default]
    #[serde(rename = "sim")]
    Similarity,
    /// Compare positions as given.
    None,
}

impl FromStr for AlignMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rigid" => Ok(AlignMode::Rigid),
            "sim" | "similarity" => Ok(AlignMode::Similarity),
            "none" => Ok(AlignMode::None),
            other => Err(EvalError::UnknownAlignment(other.to_string())),
        }
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Closed-form least-squares alignment of `est` positions onto `gt` (Umeyama).
pub fn align_trajectories(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    mode: AlignMode,
) -> Result<(Vec<Vector3<f64>>, Alignment), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    if mode == AlignMode::None {
        return Ok((est.to_vec(), Alignment::identity()));
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewPoses(n));
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut gt_scatter = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        let dg = g - mu_g;
        cov += dg * de.transpose();
        gt_scatter += dg * dg.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    var_e /= nf;
    let sv = gt_scatter.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(EvalError::Degenerate);
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if mode == AlignMode::Similarity {
        if !(var_e > 0.0) {
            return Err(EvalError::Degenerate);
        }
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_e
    } else {
        1.0
    };
    let translation = mu_g - scale * rotation * mu_e;
    let a = Alignment {
        rotation,
        translation,
        scale,
    };
    Ok((est.iter().map(|p| a.apply(p)).collect(), a))
}

/// Root mean square of position differences (meters).
pub fn ate_rmse(aligned: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, EvalError> {
    if aligned.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            est: aligned.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(EvalError::Empty("trajectory has no poses"));
    }
    let s: f64 = aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a - g).norm_squared())
        .sum();
    Ok((s / gt.len() as f64).sqrt())
}

/// Aligns and returns the ATE.
pub fn ate(est: &[Vector3<f64>], gt: &[Vector3<f64>], mode: AlignMode) -> Result<f64, EvalError> {
    let (aligned, _) = align_trajectories(est, gt, mode)?;
    ate_rmse(&aligned, gt)
}
