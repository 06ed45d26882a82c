//! Self-consistent synthetic scenes: a height-field world seen by a moving
//! pinhole camera, with flow, confidence and embeddings rendered from ground
//! truth and optional dynamic-object contamination.
//!
//! On static pixels the rendered flow equals the reprojection-induced flow
//! bit for bit, and embeddings are per-class constant, so every residual is
//! zero at the ground-truth state.

use crate::features::{FeatureMap, PcaModel};
use crate::geometry::{se3_exp, DisparityMap, EdgeProjector, Intrinsics, Pose, Twist};
use crate::graph::{build_graph, EdgePolicy, GraphError, Keyframe, KeyframeGraph};
use crate::io::{
    write_bundle, write_labels_csv, write_ply, write_tensor, write_tum, Dtype, FormatError,
    PlyCloud, Tensor,
};
use crate::residuals::FlowObservation;
use nalgebra::{DMatrix, DVector, Matrix3, Point3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Tolerance on the measured dynamic fraction.
pub const DYNAMIC_FRACTION_TOLERANCE: f64 = 0.02;
/// Correspondences landing closer than this to the image border get zero confidence (pixels).
pub const BORDER_MARGIN: f64 = 1.0;
const MIN_CLASS_ANGLE_DEG: f64 = 30.0;
const NUM_BLOBS: usize = 3;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("degenerate trajectory: camera centers span {0:.3e} m")]
    DegenerateTrajectory(f64),
    #[error("ray through pixel ({x}, {y}) of keyframe {keyframe} misses the surface")]
    Miss { keyframe: usize, x: usize, y: usize },
    #[error("could not place {0} class vectors at least 30 degrees apart")]
    ClassVectors(usize),
    #[error("dynamic fraction {target} unreachable (closest {achieved:.4})")]
    DynamicFraction { target: f64, achieved: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    #[default]
    Arc,
    Orbit,
    RandomWalk,
}

/// Every knob of the generator; all randomness derives from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_keyframes: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub trajectory: TrajectoryKind,
    /// Path length of the camera centers (meters).
    pub magnitude: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Channels `K` of the stored embeddings.
    pub embedding_dim: usize,
    /// Channels `C` of the decoded feature space.
    pub decoded_dim: usize,
    pub num_classes: usize,
    /// Fraction of all keyframe pixels covered by moving objects.
    pub dynamic_fraction: f64,
    /// Extra image motion of moving objects per edge (pixels).
    pub motion_px: f64,
    /// Blend toward fresh per-frame vectors on moving objects, 0..=1.
    pub decorrelation: f64,
    /// Gaussian flow noise (pixels).
    pub flow_noise: f64,
    /// Smooth world-anchored embedding noise amplitude.
    pub embedding_noise: f64,
    /// Relative Gaussian noise on the initial disparities.
    pub disparity_noise: f64,
    /// Twist noise on the initial poses.
    pub pose_noise: f64,
    pub edges: EdgePolicy,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_keyframes: 8,
            width: 64,
            height: 48,
            intrinsics: Intrinsics {
                fx: 60.0,
                fy: 60.0,
                cx: 31.5,
                cy: 23.5,
            },
            trajectory: TrajectoryKind::Arc,
            magnitude: 0.6,
            depth_min: 1.0,
            depth_max: 5.0,
            embedding_dim: 16,
            decoded_dim: 32,
            num_classes: 6,
            dynamic_fraction: 0.0,
            motion_px: 5.0,
            decorrelation: 1.0,
            flow_noise: 0.0,
            embedding_noise: 0.0,
            disparity_noise: 0.0,
            pose_noise: 0.0,
            edges: EdgePolicy::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if self.num_keyframes < 2 {
            return bad("num_keyframes must be >= 2");
        }
        if self.width < 8 || self.height < 8 {
            return bad("grid must be at least 8x8");
        }
        if self.intrinsics.validate().is_err() {
            return bad("intrinsics must be finite with positive focal lengths");
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return bad("magnitude must be finite and >= 0");
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min && self.depth_max.is_finite())
        {
            return bad("depth range must satisfy 0 < depth_min < depth_max");
        }
        if self.embedding_dim < 2 || self.decoded_dim < self.embedding_dim {
            return bad("need 2 <= embedding_dim <= decoded_dim");
        }
        if self.num_classes < 4 {
            return bad("num_classes must be >= 4");
        }
        for (name, v) in [
            ("dynamic_fraction", self.dynamic_fraction),
            ("decorrelation", self.decorrelation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SceneError::InvalidConfig(format!(
                    "{name} must lie in [0, 1]"
                )));
            }
        }
        for (name, v) in [
            ("motion_px", self.motion_px),
            ("flow_noise", self.flow_noise),
            ("embedding_noise", self.embedding_noise),
            ("disparity_noise", self.disparity_noise),
            ("pose_noise", self.pose_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SceneError::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy)]
enum Stream {
    World = 1,
    Classes,
    Trajectory,
    Dynamics,
    FlowNoise,
    Init,
    Lift,
}

fn rng(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s as u64);
    r
}

#[derive(Debug, Clone, PartialEq)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Plateau {
    center: Vector2<f64>,
    radius: f64,
    height: f64,
}

/// Height field `Z = g(X, Y)` with Voronoi class regions and moving discs.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    base: f64,
    waves: Vec<Wave>,
    plateaus: Vec<Plateau>,
    sites: Vec<Vector2<f64>>,
    blobs: Vec<(Vector2<f64>, f64)>,
}

const PLATEAU_EDGE: f64 = 0.08;

impl World {
    fn generate(cfg: &SceneConfig) -> Self {
        let mut r = rng(cfg.seed, Stream::World);
        let span = cfg.depth_max - cfg.depth_min;
        let base = cfg.depth_min + 0.5 * span;
        let waves = (0..3)
            .map(|_| Wave {
                kx: r.random_range(0.8..2.0),
                ky: r.random_range(0.8..2.0),
                phase: r.random_range(0.0..std::f64::consts::TAU),
                amp: r.random_range(0.02..0.05) * span,
            })
            .collect();
        let plateaus = (0..4)
            .map(|_| Plateau {
                center: Vector2::new(r.random_range(-0.9..0.9), r.random_range(-0.7..0.7)),
                radius: r.random_range(0.2..0.4),
                height: r.random_range(-0.08..0.08) * span,
            })
            .collect();
        let l = cfg.num_classes;
        let sites = (0..l)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / l as f64 + r.random_range(-0.2..0.2);
                let rad = r.random_range(0.35..0.6);
                Vector2::new(rad * a.cos(), rad * a.sin())
            })
            .collect();
        Self {
            base,
            waves,
            plateaus,
            sites,
            blobs: Vec::new(),
        }
    }

    pub fn height(&self, p: &Vector2<f64>) -> f64 {
        let mut z = self.base;
        for w in &self.waves {
            z += w.amp * (w.kx * p.x + w.phase).sin() * (w.ky * p.y).cos();
        }
        for t in &self.plateaus {
            let s = (t.radius - (p - t.center).norm()) / PLATEAU_EDGE;
            z += t.height / (1.0 + (-s).exp());
        }
        z
    }

    /// Class of the nearest Voronoi site; ties go to the lower index.
    pub fn label(&self, p: &Vector2<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, s) in self.sites.iter().enumerate() {
            let d = (p - s).norm_squared();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    pub fn blob(&self, p: &Vector2<f64>) -> Option<usize> {
        self.blobs.iter().position(|(c, r)| (p - c).norm() <= *r)
    }
}

fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let r_wc = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    let q = UnitQuaternion::from_rotation_matrix(&r_wc).inverse();
    Pose::new(q, -(q * center))
}

/// Ground-truth world-to-camera poses.
pub fn trajectory(cfg: &SceneConfig, world_base: f64) -> Result<Vec<Pose>, SceneError> {
    let n = cfg.num_keyframes;
    let mut r = rng(cfg.seed, Stream::Trajectory);
    let target = Vector3::new(0.0, 0.0, world_base);
    let m = cfg.magnitude;
    let centers: Vec<Vector3<f64>> = match cfg.trajectory {
        TrajectoryKind::Arc => {
            let radius = 1.0;
            let sweep = m / radius;
            (0..n)
                .map(|k| {
                    let phi = sweep * (k as f64 / (n - 1) as f64 - 0.5);
                    Vector3::new(
                        radius * phi.sin(),
                        0.3 * radius * (1.0 - phi.cos()),
                        0.05 * (2.0 * phi).sin(),
                    )
                })
                .collect()
        }
        TrajectoryKind::Orbit => {
            let radius = m * n as f64 / (std::f64::consts::TAU * (n - 1) as f64);
            (0..n)
                .map(|k| {
                    let th = std::f64::consts::TAU * k as f64 / n as f64;
                    Vector3::new(radius * th.cos(), radius * th.sin(), 0.0)
                })
                .collect()
        }
        TrajectoryKind::RandomWalk => {
            let step = m / (n - 1) as f64;
            let mut c = Vector3::zeros();
            let mut out = vec![c];
            for _ in 1..n {
                let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
                let dz: f64 = r.random_range(-0.2..0.2);
                c += step * Vector3::new(a.cos(), a.sin(), dz).normalize();
                out.push(c);
            }
            out
        }
    };
    let spread = centers
        .iter()
        .flat_map(|a| centers.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max);
    if !(spread > 1e-6) {
        return Err(SceneError::DegenerateTrajectory(spread));
    }
    Ok(centers
        .into_iter()
        .map(|c| {
            let jitter = Vector3::new(
                r.random_range(-0.02..0.02),
                r.random_range(-0.02..0.02),
                0.0,
            );
            look_at(c, target + jitter)
        })
        .collect())
}

/// Camera-frame depth of the first surface hit along the ray through `u`.
fn cast(
    world: &World,
    pose: &Pose,
    k: &Intrinsics,
    u: &Vector2<f64>,
    t_max: f64,
) -> Option<(f64, Vector3<f64>)> {
    let inv = pose.inverse();
    let c = inv.translation;
    // ray(u) has unit camera z, so the parameter is the camera depth
    let dir = inv.rotation * k.ray(u);
    let f = |t: f64| {
        let p = c + dir * t;
        p.z - world.height(&p.xy())
    };
    let step = 0.01;
    let mut t0 = step;
    if f(t0) >= 0.0 {
        return None;
    }
    while t0 < t_max {
        let t1 = t0 + step;
        let f1 = f(t1);
        if f1 >= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if f(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = 0.5 * (lo + hi);
            return Some((t, c + dir * t));
        }
        t0 = t1;
    }
    None
}

/// Per-keyframe rendering of the static world.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeTruth {
    pub disparity: DisparityMap,
    /// World point seen at each pixel.
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<usize>,
}

fn render(
    world: &World,
    pose: &Pose,
    cfg: &SceneConfig,
    keyframe: usize,
) -> Result<KeyframeTruth, SceneError> {
    let (w, h) = (cfg.width, cfg.height);
    let mut disparity = DisparityMap::zeros(w, h);
    let mut points = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let u = Vector2::new(x as f64, y as f64);
            let (t, p) = cast(world, pose, &cfg.intrinsics, &u, 3.0 * cfg.depth_max)
                .ok_or(SceneError::Miss { keyframe, x, y })?;
            disparity.set(x, y, 1.0 / t);
            labels.push(world.label(&p.xy()));
            points.push(p);
        }
    }
    Ok(KeyframeTruth {
        disparity,
        points,
        labels,
    })
}

fn class_vectors(cfg: &SceneConfig) -> Result<Vec<DVector<f64>>, SceneError> {
    let mut r = rng(cfg.seed, Stream::Classes);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let min_cos = MIN_CLASS_ANGLE_DEG.to_radians().cos();
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut attempts = 0;
    while out.len() < cfg.num_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(SceneError::ClassVectors(cfg.num_classes));
        }
        let v = DVector::from_fn(cfg.embedding_dim, |_, _| normal.sample(&mut r)).normalize();
        if out.iter().all(|o| o.dot(&v) <= min_cos) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Orthonormal lift from `K` to `C` dimensions, rounded to `f32` so the PCA file is exact.
fn lift_model(cfg: &SceneConfig) -> PcaModel {
    let mut r = rng(cfg.seed, Stream::Lift);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let g = DMatrix::from_fn(cfg.decoded_dim, cfg.embedding_dim, |_, _| {
        normal.sample(&mut r)
    });
    let q = g.qr().q();
    let basis = q.map(|v| v as f32 as f64);
    PcaModel::from_parts(DVector::zeros(cfg.decoded_dim), basis).expect("valid lift")
}

fn embedding_noise(world_xy: &Vector2<f64>, channel: usize, amp: f64) -> f64 {
    let c = channel as f64;
    amp * ((1.3 + 0.17 * c) * world_xy.x + 0.7 * c).sin()
        * ((0.9 + 0.11 * c) * world_xy.y + 0.3 * c).cos()
}

/// Ground truth plus everything the solver consumes.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub config: SceneConfig,
    pub world: World,
    /// Ground-truth state: poses, disparities and priors at truth.
    pub graph: KeyframeGraph,
    pub truth: Vec<KeyframeTruth>,
    /// Pixels whose flow or embeddings were altered by moving objects.
    pub dynamic_masks: Vec<Vec<bool>>,
    pub class_names: Vec<String>,
    /// Class vectors in the stored `K`-dim space, one per row.
    pub class_embeddings: DMatrix<f64>,
    pub pca: PcaModel,
}

impl SceneBundle {
    pub fn gt_poses(&self) -> Vec<Pose> {
        self.graph.keyframes.iter().map(|k| k.pose).collect()
    }

    /// Class vectors decoded to the `C`-dim space, one per row.
    pub fn text_embeddings(&self) -> DMatrix<f64> {
        let rows: Vec<DVector<f64>> = self
            .class_embeddings
            .row_iter()
            .map(|r| crate::features::pca_decode(&r.transpose(), &self.pca).unwrap())
            .collect();
        DMatrix::from_fn(rows.len(), self.pca.input_dim(), |i, j| rows[i][j])
    }

    pub fn dynamic_fraction(&self) -> f64 {
        let total: usize = self.dynamic_masks.iter().map(Vec::len).sum();
        let hit: usize = self.dynamic_masks.iter().flatten().filter(|&&m| m).count();
        hit as f64 / total.max(1) as f64
    }
}

/// Renders a static scene, then applies the configured dynamics and flow noise.
pub fn gen_scene(cfg: &SceneConfig) -> Result<SceneBundle, SceneError> {
    cfg.validate()?;
    let world = World::generate(cfg);
    let poses = trajectory(cfg, world.base)?;
    let truth = poses
        .iter()
        .enumerate()
        .map(|(k, p)| render(&world, p, cfg, k))
        .collect::<Result<Vec<_>, _>>()?;
    let classes = class_vectors(cfg)?;
    let kdim = cfg.embedding_dim;
    let (w, h) = (cfg.width, cfg.height);

    let keyframes: Vec<Keyframe> = poses
        .iter()
        .zip(&truth)
        .enumerate()
        .map(|(k, (pose, t))| {
            let features = FeatureMap::from_fn(kdim, h, w, |c, y, x| {
                let p = y * w + x;
                let v = classes[t.labels[p]][c];
                if cfg.embedding_noise > 0.0 {
                    v + embedding_noise(&t.points[p].xy(), c, cfg.embedding_noise)
                } else {
                    v
                }
            });
            Keyframe {
                index: k,
                stream: 0,
                pose: *pose,
                disparity: t.disparity.clone(),
                disparity_prior: t.disparity.clone(),
                features,
                frozen: false,
            }
        })
        .collect();

    let k = cfg.intrinsics;
    let graph = build_graph(keyframes, vec![k], &cfg.edges, |src, tgt, i, j| {
        render_flow(src, tgt, &truth[i].labels, &truth[j].labels, k, i, j)
    })?;

    let mut bundle = SceneBundle {
        config: *cfg,
        world,
        graph,
        truth,
        dynamic_masks: vec![vec![false; w * h]; cfg.num_keyframes],
        class_names: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        class_embeddings: DMatrix::from_fn(cfg.num_classes, kdim, |i, j| classes[i][j]),
        pca: lift_model(cfg),
    };
    inject_dynamics(
        &mut bundle,
        cfg.dynamic_fraction,
        cfg.motion_px,
        cfg.decorrelation,
    )?;
    if cfg.flow_noise > 0.0 {
        let mut r = rng(cfg.seed, Stream::FlowNoise);
        let normal = Normal::new(0.0, cfg.flow_noise).unwrap();
        for e in bundle.graph.edges.iter_mut() {
            e.flow.iter_mut().for_each(|f| *f += normal.sample(&mut r));
        }
    }
    Ok(bundle)
}

/// Flow from ground truth; confidence is zero where the target's bilinear neighbors
/// carry a different class, so embedding samples never straddle class boundaries.
fn render_flow(
    src: &Keyframe,
    tgt: &Keyframe,
    src_labels: &[usize],
    tgt_labels: &[usize],
    k: Intrinsics,
    i: usize,
    j: usize,
) -> Result<FlowObservation, GraphError> {
    let (w, h) = (src.disparity.width, src.disparity.height);
    let proj = EdgeProjector::new(&src.pose, &tgt.pose, k, k);
    let mut flow = vec![0.0; 2 * w * h];
    let mut conf = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let u = Vector2::new(x as f64, y as f64);
            match proj.project(&u, src.disparity.get(x, y)) {
                Ok(r) => {
                    let f = r.pixel - u;
                    flow[p] = f.x;
                    flow[w * h + p] = f.y;
                    let inner = r.pixel.x >= BORDER_MARGIN
                        && r.pixel.y >= BORDER_MARGIN
                        && r.pixel.x <= (w - 1) as f64 - BORDER_MARGIN
                        && r.pixel.y <= (h - 1) as f64 - BORDER_MARGIN;
                    if inner {
                        let cell = crate::features::BilinearCell::locate(&r.pixel, w, h);
                        let mixed = cell
                            .neighbors()
                            .iter()
                            .any(|&(nx, ny)| tgt_labels[ny * w + nx] != src_labels[p]);
                        if mixed {
                            conf[p] = 0.0;
                        }
                    } else {
                        // near the border a small pose change toggles the embedding term on and off
                        conf[p] = 0.0;
                    }
                }
                Err(_) => conf[p] = 0.0,
            }
        }
    }
    Ok(FlowObservation::new(i, j, w, h, flow, conf)?)
}

fn blob_masks(bundle: &SceneBundle, blobs: &[(Vector2<f64>, f64)]) -> Vec<Vec<Option<usize>>> {
    bundle
        .truth
        .iter()
        .map(|t| {
            t.points
                .iter()
                .map(|p| blobs.iter().position(|(c, r)| (p.xy() - c).norm() <= *r))
                .collect()
        })
        .collect()
}

fn masked_fraction(masks: &[Vec<Option<usize>>]) -> f64 {
    let total: usize = masks.iter().map(Vec::len).sum();
    let hit = masks.iter().flatten().filter(|m| m.is_some()).count();
    hit as f64 / total.max(1) as f64
}

/// Places moving discs covering `fraction` of all keyframe pixels, shifts their
/// flow by `motion_px` per edge, and blends their embeddings toward fresh vectors.
/// Confidence is left untouched.
pub fn inject_dynamics(
    bundle: &mut SceneBundle,
    fraction: f64,
    motion_px: f64,
    decorrelation: f64,
) -> Result<(), SceneError> {
    if !(0.0..=1.0).contains(&fraction)
        || !(0.0..=1.0).contains(&decorrelation)
        || !(motion_px >= 0.0)
    {
        return Err(SceneError::InvalidConfig(
            "fraction and decorrelation must lie in [0, 1], motion_px >= 0".into(),
        ));
    }
    if fraction == 0.0 {
        return Ok(());
    }
    let mut r = rng(bundle.config.seed, Stream::Dynamics);
    let centers: Vec<Vector2<f64>> = (0..NUM_BLOBS)
        .map(|b| {
            let a = std::f64::consts::TAU * b as f64 / NUM_BLOBS as f64 + r.random_range(-0.3..0.3);
            let rad = r.random_range(0.15..0.35);
            Vector2::new(rad * a.cos(), rad * a.sin())
        })
        .collect();
    let with_radius = |rad: f64| centers.iter().map(|c| (*c, rad)).collect::<Vec<_>>();
    let (mut lo, mut hi) = (0.0, 2.0);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = masked_fraction(&blob_masks(bundle, &with_radius(mid)));
        if (f - fraction).abs() < best.0 {
            best = ((f - fraction).abs(), mid, f);
        }
        if f < fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > DYNAMIC_FRACTION_TOLERANCE {
        return Err(SceneError::DynamicFraction {
            target: fraction,
            achieved: best.2,
        });
    }
    let blobs = with_radius(best.1);
    let masks = blob_masks(bundle, &blobs);
    bundle.world.blobs = blobs;

    let kdim = bundle.config.embedding_dim;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = bundle.graph.keyframes.len();
    let fresh: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|_| {
            (0..NUM_BLOBS)
                .map(|_| DVector::from_fn(kdim, |_, _| normal.sample(&mut r)).normalize())
                .collect()
        })
        .collect();
    let motions: Vec<Vec<Vector2<f64>>> = bundle
        .graph
        .edges
        .iter()
        .map(|_| {
            (0..NUM_BLOBS)
                .map(|_| {
                    let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
                    motion_px * Vector2::new(a.cos(), a.sin())
                })
                .collect()
        })
        .collect();

    let (w, h) = (bundle.config.width, bundle.config.height);
    if decorrelation > 0.0 {
        for (k, kf) in bundle.graph.keyframes.iter_mut().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if let Some(b) = masks[k][y * w + x] {
                        let orig = kf.features.pixel(x, y);
                        let mixed = orig * (1.0 - decorrelation) + &fresh[k][b] * decorrelation;
                        kf.features.set_pixel(x, y, mixed.as_slice());
                    }
                }
            }
        }
    }
    if motion_px > 0.0 {
        for (e, m) in bundle.graph.edges.iter_mut().zip(&motions) {
            for (p, blob) in masks[e.source].iter().enumerate() {
                if let Some(b) = blob {
                    e.flow[p] += m[*b].x;
                    e.flow[w * h + p] += m[*b].y;
                }
            }
        }
    }
    bundle.dynamic_masks = masks
        .iter()
        .map(|m| m.iter().map(Option::is_some).collect())
        .collect();
    Ok(())
}

/// Initial solver state: poses left-composed with twists of scale `pose_sigma`,
/// disparities scaled by `1 + N(0, disparity_sigma)` and clamped positive.
/// Priors keep their ground-truth values.
pub fn perturb_init(
    bundle: &SceneBundle,
    pose_sigma: f64,
    disparity_sigma: f64,
    seed: u64,
) -> KeyframeGraph {
    let mut g = bundle.graph.clone();
    let mut r = rng(seed, Stream::Init);
    if pose_sigma > 0.0 {
        let n = Normal::new(0.0, pose_sigma).unwrap();
        for kf in g.keyframes.iter_mut() {
            let t = Twist::from_fn(|_, _| n.sample(&mut r));
            kf.pose = se3_exp(&t).compose(&kf.pose);
        }
    }
    if disparity_sigma > 0.0 {
        let n = Normal::new(0.0, disparity_sigma).unwrap();
        for kf in g.keyframes.iter_mut() {
            for d in kf.disparity.values.iter_mut() {
                *d = (*d * (1.0 + n.sample(&mut r))).max(crate::graph::MIN_DISPARITY);
            }
        }
    }
    g
}

/// Ground-truth world points and labels, every `stride`-th pixel of every keyframe.
pub fn gt_cloud(bundle: &SceneBundle, stride: usize) -> PlyCloud {
    let stride = stride.max(1);
    let mut cloud = PlyCloud::default();
    for t in &bundle.truth {
        for (p, (pt, l)) in t.points.iter().zip(&t.labels).enumerate() {
            if p % stride == 0 {
                cloud
                    .points
                    .push(Point3::new(pt.x as f32, pt.y as f32, pt.z as f32));
                cloud.labels.push(*l as i32);
            }
        }
    }
    cloud
}

/// Writes the initial-state bundle plus `ground_truth/`.
pub fn write_scene(
    dir: &Path,
    bundle: &SceneBundle,
    initial: &KeyframeGraph,
    dtype: Dtype,
) -> Result<(), SceneError> {
    write_bundle(dir, initial, Some(&bundle.pca), dtype)?;
    let gt = dir.join("ground_truth");
    let stamps: Vec<f64> = bundle
        .graph
        .keyframes
        .iter()
        .map(|k| k.index as f64)
        .collect();
    let c2w: Vec<Pose> = bundle.gt_poses().iter().map(Pose::inverse).collect();
    write_tum(&gt.join("trajectory.txt"), &stamps, &c2w)?;
    let (w, h) = (bundle.config.width, bundle.config.height);
    for (k, (t, m)) in bundle.truth.iter().zip(&bundle.dynamic_masks).enumerate() {
        let labels = t.labels.iter().map(|&l| l as f64).collect();
        write_tensor(
            &gt.join(format!("labels/{k:03}.kmvt")),
            &Tensor::scalar_grid(h, w, labels),
        )?;
        let mask = m.iter().map(|&b| f64::from(u8::from(b))).collect();
        write_tensor(
            &gt.join(format!("dynamic/{k:03}.kmvt")),
            &Tensor::scalar_grid(h, w, mask),
        )?;
        write_tensor(
            &gt.join(format!("disparity/{k:03}.kmvt")),
            &Tensor::from_disparity(&t.disparity).with_dtype(dtype),
        )?;
    }
    write_ply(&gt.join("cloud.ply"), &gt_cloud(bundle, 2))?;
    write_labels_csv(
        &gt.join("labels.csv"),
        &bundle.class_names,
        &bundle.text_embeddings(),
    )?;
    Ok(())
}
