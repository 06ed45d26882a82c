//! Rigid-body poses on SE(3), the pinhole camera model, and dense reprojection
//! with analytic derivatives.
//!
//! Poses are world-to-camera transforms. Tangent vectors are ordered
//! `[v; ω]` (translation first) and perturbations are applied on the left:
//! `δ ⊞ T = exp(δ) · T`.

use nalgebra::{Matrix2x4, Matrix2x6, Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum depth in the target camera for a correspondence to count as valid (meters).
pub const MIN_DEPTH: f64 = 1e-4;

/// Rotations closer than this to π have an ill-conditioned logarithm.
pub const LOG_ANGLE_MARGIN: f64 = 1e-6;

const SERIES_THRESHOLD: f64 = 1e-2;

/// Twist vector `[v; ω]`.
pub type Twist = Vector6<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind the target camera (z = {z:.3e})")]
    BehindCamera { z: f64 },
    #[error("non-positive disparity {0}")]
    NonPositiveDisparity(f64),
    #[error("rotation angle {0} too close to pi for a stable logarithm")]
    IllConditionedLog(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid transform stored as a unit quaternion and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Left retraction `exp(δ) · self`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        se3_exp(delta).compose(self)
    }

    /// Camera center in world coordinates (for a world-to-camera pose).
    pub fn center(&self) -> Vector3<f64> {
        self.inverse().translation
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SE(3) exponential of a twist `[v; ω]`.
pub fn se3_exp(twist: &Twist) -> Pose {
    let v = Vector3::new(twist[0], twist[1], twist[2]);
    let w = Vector3::new(twist[3], twist[4], twist[5]);
    let theta = w.norm();

    let half = 0.5 * theta;
    // sin(θ/2)/θ
    let sinc_half = if theta < SERIES_THRESHOLD {
        0.5 - theta * theta / 48.0 + theta.powi(4) / 3840.0
    } else {
        half.sin() / theta
    };
    let q = nalgebra::Quaternion::new(
        half.cos(),
        sinc_half * w.x,
        sinc_half * w.y,
        sinc_half * w.z,
    );
    let rotation = UnitQuaternion::new_normalize(q);

    let (b, c) = if theta < SERIES_THRESHOLD {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = half.sin();
        (
            2.0 * s * s / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    let wx = skew(&w);
    let v_mat = Matrix3::identity() + wx * b + wx * wx * c;
    Pose {
        rotation,
        translation: v_mat * v,
    }
}

/// SE(3) logarithm, the inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &Pose) -> Result<Twist, GeometryError> {
    let mut q = *pose.rotation.quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    let xyz = Vector3::new(q.i, q.j, q.k);
    let s = xyz.norm();
    let theta = 2.0 * s.atan2(q.w);
    if theta >= std::f64::consts::PI - LOG_ANGLE_MARGIN {
        return Err(GeometryError::IllConditionedLog(theta));
    }
    let w = if s < 1e-12 {
        // θ/sin(θ/2) → 2/w as θ → 0
        xyz * (2.0 / q.w)
    } else {
        xyz * (theta / s)
    };

    let d = if theta < SERIES_THRESHOLD {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    let wx = skew(&w);
    let v_inv = Matrix3::identity() - wx * 0.5 + wx * wx * d;
    let v = v_inv * pose.translation;
    Ok(Twist::new(v.x, v.y, v.z, w.x, w.y, w.z))
}

/// Transform taking camera-`i` coordinates to camera-`j` coordinates: `T_j ∘ T_i⁻¹`.
pub fn relative_pose(pose_i: &Pose, pose_j: &Pose) -> Pose {
    pose_j.compose(&pose_i.inverse())
}

/// Pinhole intrinsics `[fx, fy, cx, cy]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn as_vector(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.fx, self.fy, self.cx, self.cy)
    }

    /// Additive update in `[fx, fy, cx, cy]` order.
    pub fn updated(&self, delta: &[f64]) -> Self {
        Self {
            fx: self.fx + delta[0],
            fy: self.fy + delta[1],
            cx: self.cx + delta[2],
            cy: self.cy + delta[3],
        }
    }

    /// Normalized viewing ray `(x/z, y/z, 1)` through pixel `u`.
    pub fn ray(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at pixel `u` with disparity `d` (depth `1/d`).
    pub fn unproject(&self, u: &Vector2<f64>, d: f64) -> Vector3<f64> {
        self.ray(u) / d
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    fn projection_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// Inverse-depth map on the optimization grid. Zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DisparityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            width * height,
            "disparity buffer size mismatch"
        );
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Elementwise reciprocal of a depth map; non-positive and non-finite depths become 0.
pub fn depth_to_disparity(depth: &[f64], width: usize, height: usize) -> DisparityMap {
    let values = depth
        .iter()
        .map(|&z| {
            if z.is_finite() && z > 0.0 {
                1.0 / z
            } else {
                0.0
            }
        })
        .collect();
    DisparityMap::from_values(width, height, values)
}

/// Precomputed transform for projecting pixels across one edge `i → j`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeProjector {
    pub relative: Pose,
    rot: Matrix3<f64>,
    pub source: Intrinsics,
    pub target: Intrinsics,
}

/// Intermediate quantities of a single reprojection.
#[derive(Debug, Clone, Copy)]
pub struct Reprojection {
    pub pixel: Vector2<f64>,
    pub point_source: Vector3<f64>,
    pub point_target: Vector3<f64>,
}

/// Analytic derivatives of a reprojected pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionJacobian {
    pub d_pose_i: Matrix2x6<f64>,
    pub d_pose_j: Matrix2x6<f64>,
    pub d_disparity: Vector2<f64>,
    /// W.r.t. the source intrinsics (used for unprojection).
    pub d_intrinsics_source: Matrix2x4<f64>,
    /// W.r.t. the target intrinsics (used for projection).
    pub d_intrinsics_target: Matrix2x4<f64>,
}

impl EdgeProjector {
    pub fn new(pose_i: &Pose, pose_j: &Pose, source: Intrinsics, target: Intrinsics) -> Self {
        let relative = relative_pose(pose_i, pose_j);
        Self {
            relative,
            rot: relative.rotation_matrix(),
            source,
            target,
        }
    }

    pub fn project(&self, u: &Vector2<f64>, d: f64) -> Result<Reprojection, GeometryError> {
        if !(d > 0.0) {
            return Err(GeometryError::NonPositiveDisparity(d));
        }
        let point_source = self.source.unproject(u, d);
        let point_target = self.rot * point_source + self.relative.translation;
        let pixel = self.target.project(&point_target)?;
        Ok(Reprojection {
            pixel,
            point_source,
            point_target,
        })
    }

    pub fn jacobian(&self, u: &Vector2<f64>, d: f64, proj: &Reprojection) -> ReprojectionJacobian {
        let xi = proj.point_source;
        let xj = proj.point_target;
        let dpix = self.target.projection_jacobian(&xj);
        let dpix_r = dpix * self.rot;

        let mut d_pose_j = Matrix2x6::zeros();
        d_pose_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&dpix);
        d_pose_j
            .fixed_view_mut::<2, 3>(0, 3)
            .copy_from(&(-dpix * skew(&xj)));

        let mut d_pose_i = Matrix2x6::zeros();
        d_pose_i.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-dpix_r));
        d_pose_i
            .fixed_view_mut::<2, 3>(0, 3)
            .copy_from(&(dpix_r * skew(&xi)));

        let d_disparity = dpix_r * (-xi / d);

        let ks = &self.source;
        let inv_d = 1.0 / d;
        // columns: fx, fy, cx, cy of the source camera's unprojection
        let mut dxi_dk = nalgebra::Matrix3x4::zeros();
        dxi_dk[(0, 0)] = -(u.x - ks.cx) / (ks.fx * ks.fx) * inv_d;
        dxi_dk[(1, 1)] = -(u.y - ks.cy) / (ks.fy * ks.fy) * inv_d;
        dxi_dk[(0, 2)] = -inv_d / ks.fx;
        dxi_dk[(1, 3)] = -inv_d / ks.fy;
        let d_intrinsics_source = dpix_r * dxi_dk;

        let iz = 1.0 / xj.z;
        let d_intrinsics_target =
            Matrix2x4::new(xj.x * iz, 0.0, 1.0, 0.0, 0.0, xj.y * iz, 0.0, 1.0);

        ReprojectionJacobian {
            d_pose_i,
            d_pose_j,
            d_disparity,
            d_intrinsics_source,
            d_intrinsics_target,
        }
    }
}

/// Pixel `u` of frame `i` with disparity `d`, viewed from frame `j`.
pub fn reproject(
    u: &Vector2<f64>,
    d: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    EdgeProjector::new(pose_i, pose_j, *k, *k)
        .project(u, d)
        .map(|p| p.pixel)
}

/// Derivatives of [`reproject`] w.r.t. left perturbations of both poses and the source disparity.
/// With a single shared camera the two intrinsics blocks should be summed.
pub fn reprojection_jacobian(
    u: &Vector2<f64>,
    d: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
) -> Result<ReprojectionJacobian, GeometryError> {
    let proj = EdgeProjector::new(pose_i, pose_j, *k, *k);
    let r = proj.project(u, d)?;
    Ok(proj.jacobian(u, d, &r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut ChaCha8Rng, scale: f64) -> Twist {
        Twist::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    fn pose_distance(a: &Pose, b: &Pose) -> f64 {
        (a.to_matrix() - b.to_matrix()).norm()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Twist::zeros());
        assert_eq!(pose_distance(&p, &Pose::identity()), 0.0);
    }

    #[test]
    fn exp_of_pure_translation() {
        let p = se3_exp(&Twist::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));
        assert!(p.rotation.angle() == 0.0);
        assert_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn log_of_identity_and_translation() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zeros());
        let t = se3_log(&Pose::from_translation(Vector3::new(0.5, -1.0, 2.0))).unwrap();
        assert_eq!(t, Twist::new(0.5, -1.0, 2.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..500 {
            // span tiny, series-boundary and large angles
            let scale = [1e-9, 1e-3, 1e-2, 0.5, 1.7][i % 5];
            let xi = random_twist(&mut rng, scale);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            assert!((back - xi).norm() < 1e-9, "{xi:?} -> {back:?}");
        }
    }

    #[test]
    fn exp_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xi = random_twist(&mut rng, 1.0);
            let mut m = nalgebra::Matrix4::zeros();
            m.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&skew(&Vector3::new(xi[3], xi[4], xi[5])));
            m[(0, 3)] = xi[0];
            m[(1, 3)] = xi[1];
            m[(2, 3)] = xi[2];
            // truncated Taylor series of the 4x4 matrix exponential
            let mut term = nalgebra::Matrix4::identity();
            let mut sum = nalgebra::Matrix4::identity();
            for k in 1..40 {
                term = term * m / k as f64;
                sum += term;
            }
            assert!((se3_exp(&xi).to_matrix() - sum).norm() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_near_pi() {
        let p = se3_exp(&Twist::new(
            0.0,
            0.0,
            0.0,
            std::f64::consts::PI - 1e-8,
            0.0,
            0.0,
        ));
        assert!(matches!(
            se3_log(&p),
            Err(GeometryError::IllConditionedLog(_))
        ));
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = se3_exp(&random_twist(&mut rng, 2.0));
            assert!(pose_distance(&p.compose(&p.inverse()), &Pose::identity()) < 1e-9);
            assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_pose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = se3_exp(&random_twist(&mut rng, 1.0));
        let b = se3_exp(&random_twist(&mut rng, 1.0));
        assert!(pose_distance(&relative_pose(&a, &a), &Pose::identity()) < 1e-12);
        assert!(pose_distance(&relative_pose(&Pose::identity(), &b), &b) < 1e-12);
        assert!(pose_distance(&relative_pose(&a, &b).compose(&a), &b) < 1e-9);
    }

    fn test_k() -> Intrinsics {
        Intrinsics::new(60.0, 58.0, 31.5, 23.5).unwrap()
    }

    #[test]
    fn reproject_same_pose_is_identity() {
        let k = test_k();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = se3_exp(&random_twist(&mut rng, 1.0));
        let u = Vector2::new(12.25, 40.5);
        let out = reproject(&u, 0.37, &t, &t, &k).unwrap();
        assert!((out - u).norm() < 1e-12);
    }

    #[test]
    fn reproject_behind_camera() {
        let k = test_k();
        let ti = Pose::identity();
        // camera j sits 1 m further along the optical axis: the point lands at z = 0
        let tj = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let u = Vector2::new(k.cx, k.cy);
        assert!(matches!(
            reproject(&u, 1.0, &ti, &tj, &k),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn reproject_matches_two_step_chain() {
        let k = test_k();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let ti = se3_exp(&random_twist(&mut rng, 0.2));
            let tj = se3_exp(&random_twist(&mut rng, 0.2));
            let u = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..47.0));
            let d = rng.random_range(0.2..1.0);
            // unproject, lift to world, move into camera j, project
            let xi = Vector3::new((u.x - k.cx) / k.fx / d, (u.y - k.cy) / k.fy / d, 1.0 / d);
            let world = ti.inverse().transform_point(&xi);
            let xj = tj.transform_point(&world);
            let expect = Vector2::new(k.fx * xj.x / xj.z + k.cx, k.fy * xj.y / xj.z + k.cy);
            let got = reproject(&u, d, &ti, &tj, &k).unwrap();
            assert!((got - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn reproject_gauge_invariant() {
        let k = test_k();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let ti = se3_exp(&random_twist(&mut rng, 0.2));
            let tj = se3_exp(&random_twist(&mut rng, 0.2));
            let g = se3_exp(&random_twist(&mut rng, 3.0));
            let u = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..47.0));
            let d = rng.random_range(0.2..1.0);
            let a = reproject(&u, d, &ti, &tj, &k).unwrap();
            // world-frame change: T ↦ T ∘ G⁻¹
            let gi = g.inverse();
            let b = reproject(&u, d, &ti.compose(&gi), &tj.compose(&gi), &k).unwrap();
            assert!((a - b).norm() < 1e-9);
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn jacobians_match_central_differences() {
        let k = test_k();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        for _ in 0..100 {
            let ti = se3_exp(&random_twist(&mut rng, 0.2));
            let tj = se3_exp(&random_twist(&mut rng, 0.2));
            let u = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..47.0));
            let d = rng.random_range(0.2..1.0);
            let jac = reprojection_jacobian(&u, d, &ti, &tj, &k).unwrap();
            for c in 0..6 {
                let mut e = Twist::zeros();
                e[c] = h;
                let fi = |s: f64| reproject(&u, d, &ti.retract(&(e * s)), &tj, &k).unwrap();
                let fj = |s: f64| reproject(&u, d, &ti, &tj.retract(&(e * s)), &k).unwrap();
                let ni = (fi(1.0) - fi(-1.0)) / (2.0 * h);
                let nj = (fj(1.0) - fj(-1.0)) / (2.0 * h);
                for r in 0..2 {
                    assert!(rel_err(jac.d_pose_i[(r, c)], ni[r]) < 1e-4);
                    assert!(rel_err(jac.d_pose_j[(r, c)], nj[r]) < 1e-4);
                }
            }
            let nd = (reproject(&u, d + h, &ti, &tj, &k).unwrap()
                - reproject(&u, d - h, &ti, &tj, &k).unwrap())
                / (2.0 * h);
            for r in 0..2 {
                assert!(rel_err(jac.d_disparity[r], nd[r]) < 1e-4);
            }
            let kv = [k.fx, k.fy, k.cx, k.cy];
            for c in 0..4 {
                let mut dk = [0.0; 4];
                dk[c] = h * kv[c].abs().max(1.0);
                let kp = k.updated(&dk);
                let km = k.updated(&dk.map(|x| -x));
                let shared = |kk: &Intrinsics| reproject(&u, d, &ti, &tj, kk).unwrap();
                let n = (shared(&kp) - shared(&km)) / (2.0 * dk[c]);
                let total = jac.d_intrinsics_source + jac.d_intrinsics_target;
                for r in 0..2 {
                    assert!(rel_err(total[(r, c)], n[r]) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn jacobian_symmetry_for_equal_poses() {
        let k = test_k();
        let t = se3_exp(&Twist::new(0.1, -0.2, 0.05, 0.1, 0.2, -0.1));
        let jac = reprojection_jacobian(&Vector2::new(20.0, 10.0), 0.5, &t, &t, &k).unwrap();
        assert!((jac.d_pose_i + jac.d_pose_j).norm() < 1e-12);
    }

    #[test]
    fn pure_rotation_flow_is_depth_independent() {
        let k = test_k();
        let ti = se3_exp(&Twist::new(0.0, 0.0, 0.0, 0.05, 0.02, 0.01));
        let tj = se3_exp(&Twist::new(0.0, 0.0, 0.0, -0.03, 0.04, 0.0));
        let jac = reprojection_jacobian(&Vector2::new(5.0, 30.0), 0.8, &ti, &tj, &k).unwrap();
        assert!(jac.d_disparity.norm() < 1e-12);
    }

    #[test]
    fn depth_conversion_guards() {
        let m = depth_to_disparity(&[2.0, 0.0, -1.0, f64::NAN, f64::INFINITY], 5, 1);
        assert_eq!(m.values, vec![0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, f64::NAN, 0.0).is_err());
    }
}
