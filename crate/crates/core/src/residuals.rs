//! Per-pixel residuals and Jacobians for the flow, embedding-similarity and
//! disparity-prior terms.

use crate::features::FeatureMap;
use crate::geometry::{DisparityMap, EdgeProjector, Intrinsics, Pose, ReprojectionJacobian};
use nalgebra::{RowVector2, RowVector4, RowVector6, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Embeddings with a norm at or below this are treated as missing.
pub const MIN_EMBEDDING_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("edge {0}->{1}: {2}")]
    Invalid(usize, usize, String),
}

/// Target flow `Ω_ij` and its confidence for one directed edge `i → j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowObservation {
    pub source: usize,
    pub target: usize,
    pub width: usize,
    pub height: usize,
    /// Two planes: x displacements then y displacements.
    pub flow: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl FlowObservation {
    pub fn new(
        source: usize,
        target: usize,
        width: usize,
        height: usize,
        flow: Vec<f64>,
        confidence: Vec<f64>,
    ) -> Result<Self, ObservationError> {
        let err = |m: String| ObservationError::Invalid(source, target, m);
        let n = width * height;
        if flow.len() != 2 * n {
            return Err(err(format!(
                "flow has {} values, expected {}",
                flow.len(),
                2 * n
            )));
        }
        if confidence.len() != n {
            return Err(err(format!(
                "confidence has {} values, expected {n}",
                confidence.len()
            )));
        }
        if confidence.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(err("confidence must be finite and non-negative".into()));
        }
        if flow.iter().any(|f| !f.is_finite()) {
            return Err(err("non-finite flow".into()));
        }
        if source == target {
            return Err(err("self edge".into()));
        }
        Ok(Self {
            source,
            target,
            width,
            height,
            flow,
            confidence,
        })
    }

    #[inline]
    pub fn flow_at(&self, x: usize, y: usize) -> Vector2<f64> {
        let i = y * self.width + x;
        Vector2::new(self.flow[i], self.flow[self.width * self.height + i])
    }

    #[inline]
    pub fn confidence_at(&self, x: usize, y: usize) -> f64 {
        self.confidence[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// `1 − cs`
    Angular,
    /// `λ √(2(1 − cs))`
    #[default]
    Photometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingResidualConfig {
    pub mode: EmbeddingMode,
    /// λ of the photometric form.
    pub lambda: f64,
    /// Guard in `∂r/∂cs = −λ²/(r + ε)`.
    pub epsilon: f64,
}

impl Default for EmbeddingResidualConfig {
    fn default() -> Self {
        Self {
            mode: EmbeddingMode::Photometric,
            lambda: 2.0,
            epsilon: 1e-6,
        }
    }
}

impl EmbeddingResidualConfig {
    pub fn residual(&self, cs: f64) -> f64 {
        self.residual_from_gap(1.0 - cs)
    }

    /// Residual from `1 − cs`, which is passed directly when it is known more precisely than `cs`.
    pub fn residual_from_gap(&self, gap: f64) -> f64 {
        match self.mode {
            EmbeddingMode::Angular => gap,
            EmbeddingMode::Photometric => self.lambda * (2.0 * gap).max(0.0).sqrt(),
        }
    }

    pub fn d_residual_d_cs(&self, r: f64) -> f64 {
        match self.mode {
            EmbeddingMode::Angular => -1.0,
            EmbeddingMode::Photometric => -self.lambda * self.lambda / (r + self.epsilon),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub alpha_disp: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self { alpha_disp: 1.0 }
    }
}

/// Embedding residual and the similarity it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingResidual {
    pub r: f64,
    pub cs: f64,
}

/// Derivatives of the scalar embedding residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingJacobian {
    pub d_pose_i: RowVector6<f64>,
    pub d_pose_j: RowVector6<f64>,
    pub d_disparity: f64,
    pub d_intrinsics_source: RowVector4<f64>,
    pub d_intrinsics_target: RowVector4<f64>,
}

impl EmbeddingJacobian {
    fn chain(d_r_d_mu: &RowVector2<f64>, j: &ReprojectionJacobian) -> Self {
        Self {
            d_pose_i: d_r_d_mu * j.d_pose_i,
            d_pose_j: d_r_d_mu * j.d_pose_j,
            d_disparity: (d_r_d_mu * j.d_disparity)[0],
            d_intrinsics_source: d_r_d_mu * j.d_intrinsics_source,
            d_intrinsics_target: d_r_d_mu * j.d_intrinsics_target,
        }
    }
}

/// Everything evaluated at one source pixel of an edge.
#[derive(Debug, Clone, Copy)]
pub struct PixelEval {
    /// `(μ − u) − Ω(u)`.
    pub flow: Vector2<f64>,
    pub embed: Option<EmbeddingResidual>,
    pub flow_jacobian: Option<ReprojectionJacobian>,
    /// `∂r_embed/∂μ`, present with Jacobians when the embedding is valid.
    pub embed_d_mu: Option<RowVector2<f64>>,
}

impl PixelEval {
    pub fn embed_jacobian(&self) -> Option<EmbeddingJacobian> {
        Some(EmbeddingJacobian::chain(
            self.embed_d_mu.as_ref()?,
            self.flow_jacobian.as_ref()?,
        ))
    }
}

/// Evaluates residuals for the pixels of one edge, reusing scratch buffers.
pub struct EdgeEvaluator<'a> {
    projector: EdgeProjector,
    obs: &'a FlowObservation,
    z_src: &'a FeatureMap,
    z_tgt: &'a FeatureMap,
    cfg: EmbeddingResidualConfig,
    zi: Vec<f64>,
    zj: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> EdgeEvaluator<'a> {
    pub fn new(
        projector: EdgeProjector,
        obs: &'a FlowObservation,
        z_src: &'a FeatureMap,
        z_tgt: &'a FeatureMap,
        cfg: EmbeddingResidualConfig,
    ) -> Self {
        let k = z_src.channels();
        assert_eq!(
            k,
            z_tgt.channels(),
            "embedding dimensions differ across an edge"
        );
        Self {
            projector,
            obs,
            z_src,
            z_tgt,
            cfg,
            zi: vec![0.0; k],
            zj: vec![0.0; k],
            grad: vec![0.0; 2 * k],
        }
    }

    pub fn projector(&self) -> &EdgeProjector {
        &self.projector
    }

    /// `None` when the pixel has no valid reprojection (non-positive disparity or behind the target camera).
    pub fn eval(&mut self, x: usize, y: usize, d: f64, with_jacobians: bool) -> Option<PixelEval> {
        let u = Vector2::new(x as f64, y as f64);
        let proj = self.projector.project(&u, d).ok()?;
        let flow = (proj.pixel - u) - self.obs.flow_at(x, y);
        let flow_jacobian = with_jacobians.then(|| self.projector.jacobian(&u, d, &proj));

        let mut embed = None;
        let mut embed_d_mu = None;
        if self
            .z_tgt
            .sample_into(&proj.pixel, &mut self.zj, &mut self.grad)
        {
            self.z_src.pixel_into(x, y, &mut self.zi);
            let ni = norm(&self.zi);
            let nj = norm(&self.zj);
            if ni > MIN_EMBEDDING_NORM && nj > MIN_EMBEDDING_NORM {
                // 1 − cs as half the squared distance of the unit vectors stays exact near cs = 1
                let gap = 0.5
                    * self
                        .zi
                        .iter()
                        .zip(&self.zj)
                        .map(|(a, b)| (a / ni - b / nj).powi(2))
                        .sum::<f64>();
                let gap = gap.clamp(0.0, 2.0);
                let cs = 1.0 - gap;
                let r = self.cfg.residual_from_gap(gap);
                embed = Some(EmbeddingResidual { r, cs });
                if with_jacobians {
                    // ∂cs/∂z_j = (s − cs·t)/‖z_j‖, chained through the sampling gradient
                    let dr_dcs = self.cfg.d_residual_d_cs(r);
                    let mut g = RowVector2::zeros();
                    for c in 0..self.zi.len() {
                        let dcs_dz = (self.zi[c] / ni - cs * self.zj[c] / nj) / nj;
                        g[0] += dcs_dz * self.grad[2 * c];
                        g[1] += dcs_dz * self.grad[2 * c + 1];
                    }
                    embed_d_mu = Some(g * dr_dcs);
                }
            }
        }
        Some(PixelEval {
            flow,
            embed,
            flow_jacobian,
            embed_d_mu,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn grid_pixel(u: &Vector2<f64>) -> (usize, usize) {
    assert!(
        u.x >= 0.0 && u.y >= 0.0 && u.x.fract() == 0.0 && u.y.fract() == 0.0,
        "residuals are evaluated at integer grid pixels"
    );
    (u.x as usize, u.y as usize)
}

/// Flow residual `Ω_prior(u) − Ω_ij(u)`; `None` when the correspondence is invalid.
pub fn flow_residual(
    u: &Vector2<f64>,
    d: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
    obs: &FlowObservation,
) -> Option<Vector2<f64>> {
    let (x, y) = grid_pixel(u);
    let proj = EdgeProjector::new(pose_i, pose_j, *k, *k)
        .project(u, d)
        .ok()?;
    Some((proj.pixel - u) - obs.flow_at(x, y))
}

#[allow(clippy::too_many_arguments)]
fn single_pixel_eval(
    u: &Vector2<f64>,
    d: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
    z_i: &FeatureMap,
    z_j: &FeatureMap,
    cfg: &EmbeddingResidualConfig,
    with_jacobians: bool,
) -> Option<PixelEval> {
    let (x, y) = grid_pixel(u);
    // flow values do not enter the embedding term
    let obs = FlowObservation {
        source: 0,
        target: 1,
        width: z_i.width(),
        height: z_i.height(),
        flow: vec![0.0; 2 * z_i.width() * z_i.height()],
        confidence: vec![0.0; z_i.width() * z_i.height()],
    };
    let projector = EdgeProjector::new(pose_i, pose_j, *k, *k);
    EdgeEvaluator::new(projector, &obs, z_i, z_j, *cfg).eval(x, y, d, with_jacobians)
}

/// Cosine similarity of `Z_i(u)` and `Z_j(μ_ij(u))` and the derived residual.
#[allow(clippy::too_many_arguments)]
pub fn embedding_residual(
    u: &Vector2<f64>,
    d: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
    z_i: &FeatureMap,
    z_j: &FeatureMap,
    cfg: &EmbeddingResidualConfig,
) -> Option<EmbeddingResidual> {
    single_pixel_eval(u, d, pose_i, pose_j, k, z_i, z_j, cfg, false)?.embed
}

/// Analytic derivatives of [`embedding_residual`].
#[allow(clippy::too_many_arguments)]
pub fn embedding_jacobian(
    u: &Vector2<f64>,
    d: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
    z_i: &FeatureMap,
    z_j: &FeatureMap,
    cfg: &EmbeddingResidualConfig,
) -> Option<EmbeddingJacobian> {
    single_pixel_eval(u, d, pose_i, pose_j, k, z_i, z_j, cfg, true)?.embed_jacobian()
}

/// `√α_disp · (d − d_prior)` per pixel; `None` where the prior is missing.
pub fn disparity_reg_residual(
    d: &DisparityMap,
    prior: &DisparityMap,
    cfg: &RegConfig,
) -> Vec<Option<f64>> {
    assert_eq!(
        d.values.len(),
        prior.values.len(),
        "disparity maps differ in size"
    );
    let s = cfg.alpha_disp.sqrt();
    d.values
        .iter()
        .zip(&prior.values)
        .map(|(&v, &p)| (p > 0.0).then_some(s * (v - p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 15.5, 11.5).unwrap()
    }

    fn smooth_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let phases: Vec<(f64, f64, f64)> = (0..c)
            .map(|_| {
                (
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.1..0.5),
                    rng.random_range(0.1..0.5),
                )
            })
            .collect();
        FeatureMap::from_fn(c, h, w, |ch, y, x| {
            let (p, a, b) = phases[ch];
            1.0 + 0.5 * (a * x as f64 + b * y as f64 + p).sin()
        })
    }

    fn twist(rng: &mut ChaCha8Rng, s: f64) -> Twist {
        Twist::from_fn(|_, _| rng.random_range(-s..s))
    }

    #[test]
    fn flow_residual_zero_for_rendered_flow() {
        let kk = k();
        let ti = se3_exp(&Twist::new(0.0, 0.0, 0.0, 0.01, 0.0, 0.0));
        let tj = se3_exp(&Twist::new(0.05, -0.02, 0.01, 0.0, 0.02, 0.01));
        let (w, h) = (32, 24);
        let disp = |x: usize, y: usize| 0.3 + 0.01 * x as f64 + 0.005 * y as f64;
        let mut flow = vec![0.0; 2 * w * h];
        for y in 0..h {
            for x in 0..w {
                let u = Vector2::new(x as f64, y as f64);
                let mu = crate::geometry::reproject(&u, disp(x, y), &ti, &tj, &kk).unwrap();
                flow[y * w + x] = mu.x - u.x;
                flow[w * h + y * w + x] = mu.y - u.y;
            }
        }
        let obs = FlowObservation::new(0, 1, w, h, flow, vec![1.0; w * h]).unwrap();
        for y in 0..h {
            for x in 0..w {
                let r = flow_residual(
                    &Vector2::new(x as f64, y as f64),
                    disp(x, y),
                    &ti,
                    &tj,
                    &kk,
                    &obs,
                )
                .unwrap();
                assert!(r.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn flow_residual_identity_poses_zero_flow() {
        let obs = FlowObservation::new(0, 1, 8, 8, vec![0.0; 128], vec![1.0; 64]).unwrap();
        let p = se3_exp(&Twist::new(0.3, 0.1, 0.0, 0.1, 0.0, 0.2));
        let r = flow_residual(&Vector2::new(3.0, 4.0), 0.5, &p, &p, &k(), &obs).unwrap();
        assert!(r.norm() < 1e-12);
        assert!(flow_residual(&Vector2::new(3.0, 4.0), 0.0, &p, &p, &k(), &obs).is_none());
    }

    #[test]
    fn flow_residual_grows_linearly_in_disparity_error() {
        let kk = k();
        let ti = Pose::identity();
        let tj = se3_exp(&Twist::new(0.1, 0.02, 0.0, 0.0, 0.0, 0.0));
        let u = Vector2::new(10.0, 7.0);
        let d0 = 0.4;
        let mu = crate::geometry::reproject(&u, d0, &ti, &tj, &kk).unwrap();
        let mut flow = vec![0.0; 2 * 32 * 24];
        flow[7 * 32 + 10] = mu.x - u.x;
        flow[32 * 24 + 7 * 32 + 10] = mu.y - u.y;
        let obs = FlowObservation::new(0, 1, 32, 24, flow, vec![1.0; 32 * 24]).unwrap();
        let slope = crate::geometry::reprojection_jacobian(&u, d0, &ti, &tj, &kk)
            .unwrap()
            .d_disparity
            .norm();
        for delta in [1e-4, 1e-5, 1e-6] {
            let r = flow_residual(&u, d0 + delta, &ti, &tj, &kk, &obs).unwrap();
            assert!((r.norm() / delta - slope).abs() / slope < 1e-3);
        }
    }

    #[test]
    fn observation_validation() {
        assert!(FlowObservation::new(0, 1, 2, 2, vec![0.0; 7], vec![1.0; 4]).is_err());
        assert!(FlowObservation::new(0, 1, 2, 2, vec![0.0; 8], vec![-1.0; 4]).is_err());
        assert!(FlowObservation::new(1, 1, 2, 2, vec![0.0; 8], vec![1.0; 4]).is_err());
    }

    #[test]
    fn embedding_perfect_correspondence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = smooth_map(&mut rng, 6, 24, 32);
        let p = se3_exp(&twist(&mut rng, 0.2));
        let cfg = EmbeddingResidualConfig::default();
        let e =
            embedding_residual(&Vector2::new(5.0, 6.0), 0.5, &p, &p, &k(), &z, &z, &cfg).unwrap();
        assert!((e.cs - 1.0).abs() < 1e-6 && e.r < 1e-6);
    }

    #[test]
    fn embedding_orthogonal_and_opposite() {
        let zi = FeatureMap::from_fn(2, 4, 4, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let zj = FeatureMap::from_fn(2, 4, 4, |c, _, _| if c == 1 { 3.0 } else { 0.0 });
        let zneg = FeatureMap::from_fn(2, 4, 4, |c, _, _| if c == 0 { -0.5 } else { 0.0 });
        let p = Pose::identity();
        let u = Vector2::new(1.0, 2.0);
        let photo = EmbeddingResidualConfig::default();
        let e = embedding_residual(&u, 1.0, &p, &p, &k(), &zi, &zj, &photo).unwrap();
        assert!(e.cs.abs() < 1e-15);
        assert!((e.r - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let angular = EmbeddingResidualConfig {
            mode: EmbeddingMode::Angular,
            ..photo
        };
        let e = embedding_residual(&u, 1.0, &p, &p, &k(), &zi, &zneg, &angular).unwrap();
        assert!((e.r - 2.0).abs() < 1e-15);
    }

    #[test]
    fn embedding_invalid_cases() {
        let z = FeatureMap::from_fn(2, 4, 4, |_, _, _| 1.0);
        let zero = FeatureMap::zeros(2, 4, 4);
        let cfg = EmbeddingResidualConfig::default();
        let p = Pose::identity();
        let u = Vector2::new(1.0, 1.0);
        assert!(embedding_residual(&u, 1.0, &p, &p, &k(), &z, &zero, &cfg).is_none());
        assert!(embedding_residual(&u, 1.0, &p, &p, &k(), &zero, &z, &cfg).is_none());
        // shifts the projection far outside the 4x4 target grid
        let far = Pose::from_translation(nalgebra::Vector3::new(5.0, 0.0, 0.0));
        assert!(embedding_residual(&u, 1.0, &p, &far, &k(), &z, &z, &cfg).is_none());
    }

    #[test]
    fn embedding_scale_invariance_and_mode_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zi = smooth_map(&mut rng, 5, 24, 32);
        let zj = smooth_map(&mut rng, 5, 24, 32);
        let zj_scaled = FeatureMap::from_fn(5, 24, 32, |c, y, x| 4.0 * zj.get(c, y, x));
        let photo = EmbeddingResidualConfig::default();
        let angular = EmbeddingResidualConfig {
            mode: EmbeddingMode::Angular,
            ..photo
        };
        let ti = Pose::identity();
        let tj = se3_exp(&Twist::new(0.02, 0.01, 0.0, 0.0, 0.01, 0.0));
        let mut pairs = Vec::new();
        for y in 2..20 {
            for x in 2..28 {
                let u = Vector2::new(x as f64, y as f64);
                let a = embedding_residual(&u, 0.5, &ti, &tj, &k(), &zi, &zj, &photo).unwrap();
                let b =
                    embedding_residual(&u, 0.5, &ti, &tj, &k(), &zi, &zj_scaled, &photo).unwrap();
                assert!((a.cs - b.cs).abs() < 1e-14);
                let c = embedding_residual(&u, 0.5, &ti, &tj, &k(), &zi, &zj, &angular).unwrap();
                pairs.push((a.r, c.r));
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-15);
        }
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-2)
    }

    #[test]
    fn embedding_jacobian_matches_central_differences() {
        let kk = k();
        let h = 1e-6;
        for mode in [EmbeddingMode::Angular, EmbeddingMode::Photometric] {
            let cfg = EmbeddingResidualConfig {
                mode,
                ..EmbeddingResidualConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut checked = 0;
            while checked < 100 {
                let zi = smooth_map(&mut rng, 4, 24, 32);
                let zj = smooth_map(&mut rng, 4, 24, 32);
                let ti = se3_exp(&twist(&mut rng, 0.05));
                let tj = se3_exp(&twist(&mut rng, 0.05));
                let u = Vector2::new(
                    rng.random_range(4..28) as f64,
                    rng.random_range(4..20) as f64,
                );
                let d = rng.random_range(0.3..1.0);
                let Some(jac) = embedding_jacobian(&u, d, &ti, &tj, &kk, &zi, &zj, &cfg) else {
                    continue;
                };
                let mu = crate::geometry::reproject(&u, d, &ti, &tj, &kk).unwrap();
                // keep every probe inside one bilinear cell
                if (mu.x - mu.x.round()).abs() < 1e-3 || (mu.y - mu.y.round()).abs() < 1e-3 {
                    continue;
                }
                let r = |ti: &Pose, tj: &Pose, d: f64| {
                    embedding_residual(&u, d, ti, tj, &kk, &zi, &zj, &cfg)
                        .unwrap()
                        .r
                };
                for c in 0..6 {
                    let mut e = Twist::zeros();
                    e[c] = h;
                    let ni = (r(&ti.retract(&e), &tj, d) - r(&ti.retract(&-e), &tj, d)) / (2.0 * h);
                    let nj = (r(&ti, &tj.retract(&e), d) - r(&ti, &tj.retract(&-e), d)) / (2.0 * h);
                    assert!(
                        rel_close(jac.d_pose_i[c], ni, 1e-3),
                        "{mode:?} i{c}: {} vs {ni}",
                        jac.d_pose_i[c]
                    );
                    assert!(
                        rel_close(jac.d_pose_j[c], nj, 1e-3),
                        "{mode:?} j{c}: {} vs {nj}",
                        jac.d_pose_j[c]
                    );
                }
                let nd = (r(&ti, &tj, d + h) - r(&ti, &tj, d - h)) / (2.0 * h);
                assert!(rel_close(jac.d_disparity, nd, 1e-3));
                checked += 1;
            }
        }
    }

    #[test]
    fn constant_target_has_zero_jacobian() {
        let zi = FeatureMap::from_fn(3, 24, 32, |c, y, x| (c + x + 2 * y) as f64 + 1.0);
        let zj = FeatureMap::from_fn(3, 24, 32, |c, _, _| c as f64 + 0.5);
        let ti = Pose::identity();
        let tj = se3_exp(&Twist::new(0.03, 0.0, 0.01, 0.0, 0.02, 0.0));
        let jac = embedding_jacobian(
            &Vector2::new(12.0, 9.0),
            0.5,
            &ti,
            &tj,
            &k(),
            &zi,
            &zj,
            &EmbeddingResidualConfig::default(),
        )
        .unwrap();
        assert_eq!(jac.d_pose_i.norm(), 0.0);
        assert_eq!(jac.d_pose_j.norm(), 0.0);
        assert_eq!(jac.d_disparity, 0.0);
    }

    #[test]
    fn angular_directional_derivative_sign() {
        // target embedding rotates from the source direction as x grows: moving right lowers cs
        let zi = FeatureMap::from_fn(2, 24, 32, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let zj = FeatureMap::from_fn(2, 24, 32, |c, _, x| {
            let a = 0.05 * x as f64;
            if c == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        let cfg = EmbeddingResidualConfig {
            mode: EmbeddingMode::Angular,
            ..EmbeddingResidualConfig::default()
        };
        let ti = Pose::identity();
        let tj = Pose::from_translation(nalgebra::Vector3::new(0.01, 0.0, 0.0));
        let u = Vector2::new(10.0, 10.0);
        let jac = embedding_jacobian(&u, 0.5, &ti, &tj, &k(), &zi, &zj, &cfg).unwrap();
        // +x translation of camera j shifts the projection right, increasing r
        let e = Twist::new(1e-5, 0.0, 0.0, 0.0, 0.0, 0.0);
        let r0 = embedding_residual(&u, 0.5, &ti, &tj, &k(), &zi, &zj, &cfg)
            .unwrap()
            .r;
        let r1 = embedding_residual(&u, 0.5, &ti, &tj.retract(&e), &k(), &zi, &zj, &cfg)
            .unwrap()
            .r;
        assert!(jac.d_pose_j[0] > 0.0);
        assert_eq!((r1 - r0).signum(), jac.d_pose_j[0].signum());
    }

    #[test]
    fn disparity_prior_residuals() {
        let prior = DisparityMap::from_values(3, 1, vec![0.5, 0.0, 0.25]);
        let same = disparity_reg_residual(&prior, &prior, &RegConfig::default());
        assert_eq!(same, vec![Some(0.0), None, Some(0.0)]);
        let d = DisparityMap::from_values(3, 1, vec![0.75, 1.0, 0.25]);
        let r = disparity_reg_residual(&d, &prior, &RegConfig { alpha_disp: 1.0 });
        assert_eq!(r[0], Some(0.25));
        assert!((r[0].unwrap().powi(2) - 0.0625).abs() < 1e-15);
        let off = disparity_reg_residual(&d, &prior, &RegConfig { alpha_disp: 0.0 });
        assert!(off.iter().flatten().all(|v| *v == 0.0));
    }
}
