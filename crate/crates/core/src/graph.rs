//! Keyframe factor graph, normal-equation assembly and the damped Gauss–Newton
//! solve over poses, intrinsics and per-pixel disparities.
//!
//! Unknowns are stacked as `[camera | disparity]`, where the camera block holds
//! 6 twist coordinates per free pose followed by `[fx, fy, cx, cy]` per stream
//! when intrinsics are optimized. The gradient `b` is the true gradient of the
//! total energy and `H` its Gauss–Newton approximation, so steps solve
//! `H δ = −b`.

use crate::features::FeatureMap;
use crate::geometry::{DisparityMap, EdgeProjector, Intrinsics, Pose, Twist};
use crate::residuals::{
    EdgeEvaluator, EmbeddingResidualConfig, FlowObservation, ObservationError, RegConfig,
};
use crate::robust::{adaptive_alpha, barron_rho, irls_weight, KernelChoice, KernelConfig};
use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to disparities after every update.
pub const MIN_DISPARITY: f64 = 1e-6;

/// Damping uses `max(diag, DAMPING_FLOOR)` so unobserved unknowns stay factorizable.
pub const DAMPING_FLOOR: f64 = 1e-9;

const CAM: usize = 20;
const SLOT_POSE_I: usize = 0;
const SLOT_POSE_J: usize = 6;
const SLOT_K_SRC: usize = 12;
const SLOT_K_TGT: usize = 16;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("a graph needs at least 2 keyframes, got {0}")]
    TooFewKeyframes(usize),
    #[error("keyframe {index}: {message}")]
    Keyframe { index: usize, message: String },
    #[error("edge {from}->{to}: {message}")]
    Edge {
        from: usize,
        to: usize,
        message: String,
    },
    #[error("no edges were produced; the problem is unconstrained")]
    NoEdges,
    #[error(transparent)]
    Observation(#[from] ObservationError),
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("non-finite {what} on edge {from}->{to} at pixel ({x}, {y})")]
    NonFiniteResidual {
        what: &'static str,
        from: usize,
        to: usize,
        x: usize,
        y: usize,
    },
    #[error("non-finite disparity on keyframe {keyframe} at pixel ({x}, {y})")]
    NonFiniteDisparity { keyframe: usize, x: usize, y: usize },
    #[error("reduced system stays singular up to damping {damping:e}; the problem is degenerate")]
    Degenerate { damping: f64 },
}

/// A keyframe node: pose, disparity state and the inputs attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    /// Frame identifier; written as the trajectory timestamp.
    pub index: usize,
    /// Camera stream, selecting the intrinsics.
    pub stream: usize,
    /// World-to-camera.
    pub pose: Pose,
    pub disparity: DisparityMap,
    /// Prior disparity; zero marks pixels without a prior.
    pub disparity_prior: DisparityMap,
    /// `K`-channel embeddings on the keyframe grid.
    pub features: FeatureMap,
    /// Holds pose and disparity fixed.
    pub frozen: bool,
}

/// Keyframes, directed flow edges between list positions, and per-stream intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeGraph {
    pub keyframes: Vec<Keyframe>,
    pub edges: Vec<FlowObservation>,
    pub intrinsics: Vec<Intrinsics>,
}

impl KeyframeGraph {
    pub fn new(
        keyframes: Vec<Keyframe>,
        edges: Vec<FlowObservation>,
        intrinsics: Vec<Intrinsics>,
    ) -> Result<Self, GraphError> {
        let g = Self {
            keyframes,
            edges,
            intrinsics,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn width(&self) -> usize {
        self.keyframes.first().map_or(0, |k| k.disparity.width)
    }

    pub fn height(&self) -> usize {
        self.keyframes.first().map_or(0, |k| k.disparity.height)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.keyframes.len();
        if n < 2 {
            return Err(GraphError::TooFewKeyframes(n));
        }
        let (w, h) = (self.width(), self.height());
        let k = self.keyframes[0].features.channels();
        for (pos, kf) in self.keyframes.iter().enumerate() {
            let bad = |message: String| GraphError::Keyframe {
                index: pos,
                message,
            };
            if kf.disparity.width != w || kf.disparity.height != h {
                return Err(bad(format!(
                    "disparity is {}x{}, graph grid is {w}x{h}",
                    kf.disparity.width, kf.disparity.height
                )));
            }
            if kf.disparity_prior.width != w || kf.disparity_prior.height != h {
                return Err(bad("disparity prior does not match the grid".into()));
            }
            if kf.features.width() != w || kf.features.height() != h {
                return Err(bad("features do not match the grid".into()));
            }
            if kf.features.channels() != k {
                return Err(bad(format!(
                    "{} feature channels, keyframe 0 has {k}",
                    kf.features.channels()
                )));
            }
            if kf.stream >= self.intrinsics.len() {
                return Err(bad(format!(
                    "stream {} has no intrinsics ({} streams)",
                    kf.stream,
                    self.intrinsics.len()
                )));
            }
        }
        for k in &self.intrinsics {
            k.validate().map_err(|e| GraphError::Keyframe {
                index: 0,
                message: e.to_string(),
            })?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.edges {
            let bad = |message: String| GraphError::Edge {
                from: e.source,
                to: e.target,
                message,
            };
            if e.source >= n || e.target >= n {
                return Err(bad(format!("endpoint outside {n} keyframes")));
            }
            if e.source == e.target {
                return Err(bad("self edge".into()));
            }
            if e.width != w || e.height != h {
                return Err(bad(format!(
                    "flow is {}x{}, graph grid is {w}x{h}",
                    e.width, e.height
                )));
            }
            if !seen.insert((e.source, e.target)) {
                return Err(bad("duplicate edge".into()));
            }
        }
        Ok(())
    }
}

/// Damped Gauss–Newton settings and the weights of the energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once the step norm falls below this.
    pub update_tolerance: f64,
    pub lm_init: f64,
    pub lm_up: f64,
    pub lm_down: f64,
    /// Give up (without error) once damping exceeds this.
    pub lm_max: f64,
    pub kernel: KernelConfig,
    /// `ark`, `l2` or `fixed:<alpha>`.
    pub kernel_choice: KernelChoice,
    pub embed: EmbeddingResidualConfig,
    pub reg: RegConfig,
    pub lambda_photo: f64,
    /// Weight of the embedding term; zero disables it.
    pub lambda_embed: f64,
    pub optimize_intrinsics: bool,
    /// Optimize only the last `window` keyframes; older ones are held fixed.
    pub window: Option<usize>,
    /// Keep each pixel's shape parameter from the initial state instead of recomputing it.
    pub freeze_alpha: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            update_tolerance: 1e-8,
            lm_init: 1e-4,
            lm_up: 10.0,
            lm_down: 0.5,
            lm_max: 1e10,
            kernel: KernelConfig::default(),
            kernel_choice: KernelChoice::Adaptive,
            embed: EmbeddingResidualConfig::default(),
            reg: RegConfig::default(),
            lambda_photo: 1.0,
            lambda_embed: 2.0,
            optimize_intrinsics: false,
            window: None,
            freeze_alpha: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::InvalidConfig(m.to_string()));
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1");
        }
        if !(self.update_tolerance > 0.0) {
            return bad("update_tolerance must be > 0");
        }
        if !(self.lm_init > 0.0 && self.lm_up > 1.0 && self.lm_down > 0.0 && self.lm_down < 1.0) {
            return bad("damping needs lm_init > 0, lm_up > 1 and 0 < lm_down < 1");
        }
        if !(self.lm_max >= self.lm_init) {
            return bad("lm_max must be >= lm_init");
        }
        if !(self.lambda_photo >= 0.0 && self.lambda_embed >= 0.0) {
            return bad("term weights must be >= 0");
        }
        if !(self.embed.lambda > 0.0 && self.embed.epsilon > 0.0) {
            return bad("embed.lambda and embed.epsilon must be > 0");
        }
        if !(self.reg.alpha_disp >= 0.0) {
            return bad("reg.alpha_disp must be >= 0");
        }
        if self.window == Some(0) {
            return bad("window must be >= 1");
        }
        if let KernelChoice::Fixed(a) = self.kernel_choice {
            if !a.is_finite() {
                return bad("fixed kernel alpha must be finite");
            }
        }
        self.kernel
            .validate()
            .map_err(|e| SolveError::InvalidConfig(e.to_string()))
    }
}

/// Unweighted term energies and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub total: f64,
    /// `Σ w ρ_α(‖r‖)`.
    pub photo: f64,
    /// `Σ w_embed r²`.
    pub embed: f64,
    /// `α_disp Σ (d − d_prior)²`.
    pub reg: f64,
}

impl EnergyBreakdown {
    fn finish(photo: f64, embed: f64, reg: f64, cfg: &SolverConfig) -> Self {
        Self {
            total: cfg.lambda_photo * photo + cfg.lambda_embed * embed + reg,
            photo,
            embed,
            reg,
        }
    }
}

/// Where each free unknown lives in the stacked vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnknownLayout {
    pub pose_offsets: Vec<Option<usize>>,
    pub intrinsics_offsets: Vec<Option<usize>>,
    pub n_cam: usize,
    /// Start of each keyframe's disparities within the disparity block.
    pub disparity_offsets: Vec<Option<usize>>,
    pub n_disp: usize,
    pub pixels: usize,
}

impl UnknownLayout {
    pub fn new(graph: &KeyframeGraph, cfg: &SolverConfig) -> Self {
        let n = graph.keyframes.len();
        let first_free = cfg.window.map_or(0, |w| n.saturating_sub(w));
        let pixels = graph.width() * graph.height();
        let mut n_cam = 0;
        let mut n_disp = 0;
        let mut pose_offsets = Vec::with_capacity(n);
        let mut disparity_offsets = Vec::with_capacity(n);
        for (i, kf) in graph.keyframes.iter().enumerate() {
            let free = !kf.frozen && i >= first_free;
            // keyframe 0 fixes the gauge
            if free && i != 0 {
                pose_offsets.push(Some(n_cam));
                n_cam += 6;
            } else {
                pose_offsets.push(None);
            }
            if free {
                disparity_offsets.push(Some(n_disp));
                n_disp += pixels;
            } else {
                disparity_offsets.push(None);
            }
        }
        let intrinsics_offsets = (0..graph.intrinsics.len())
            .map(|_| {
                cfg.optimize_intrinsics.then(|| {
                    n_cam += 4;
                    n_cam - 4
                })
            })
            .collect();
        Self {
            pose_offsets,
            intrinsics_offsets,
            n_cam,
            disparity_offsets,
            n_disp,
            pixels,
        }
    }

    pub fn len(&self) -> usize {
        self.n_cam + self.n_disp
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn edge_slots(&self, graph: &KeyframeGraph, e: &FlowObservation) -> [Option<usize>; CAM] {
        let mut slots = [None; CAM];
        let si = graph.keyframes[e.source].stream;
        let sj = graph.keyframes[e.target].stream;
        let blocks = [
            (SLOT_POSE_I, self.pose_offsets[e.source], 6),
            (SLOT_POSE_J, self.pose_offsets[e.target], 6),
            (SLOT_K_SRC, self.intrinsics_offsets[si], 4),
            (SLOT_K_TGT, self.intrinsics_offsets[sj], 4),
        ];
        for (slot, off, len) in blocks {
            if let Some(off) = off {
                for k in 0..len {
                    slots[slot + k] = Some(off + k);
                }
            }
        }
        slots
    }
}

/// Coupling between one keyframe's disparities and the camera unknowns they touch.
#[derive(Debug, Clone, PartialEq)]
pub struct DispCoupling {
    /// Sorted camera-block indices.
    pub params: Vec<usize>,
    /// `pixels × params.len()`, pixel-major.
    pub values: Vec<f64>,
}

/// Gauss–Newton system with the disparity block stored diagonally.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub layout: UnknownLayout,
    pub h_cc: DMatrix<f64>,
    pub b_c: DVector<f64>,
    pub h_dd: DVector<f64>,
    pub b_d: DVector<f64>,
    /// One entry per keyframe; empty for keyframes with fixed disparities.
    pub coupling: Vec<DispCoupling>,
    pub energy: EnergyBreakdown,
}

/// `diag + λ·max(diag, DAMPING_FLOOR)`.
pub fn damp(diag: f64, lambda: f64) -> f64 {
    diag + lambda * diag.max(DAMPING_FLOOR)
}

impl NormalEquations {
    /// The full symmetric `H` and `b`.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let nc = self.layout.n_cam;
        let n = self.layout.len();
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        h.view_mut((0, 0), (nc, nc)).copy_from(&self.h_cc);
        b.rows_mut(0, nc).copy_from(&self.b_c);
        for p in 0..self.layout.n_disp {
            h[(nc + p, nc + p)] = self.h_dd[p];
            b[nc + p] = self.b_d[p];
        }
        for (kf, c) in self.coupling.iter().enumerate() {
            let Some(off) = self.layout.disparity_offsets[kf] else {
                continue;
            };
            let m = c.params.len();
            for p in 0..self.layout.pixels {
                for (a, &g) in c.params.iter().enumerate() {
                    let v = c.values[p * m + a];
                    h[(g, nc + off + p)] = v;
                    h[(nc + off + p, g)] = v;
                }
            }
        }
        (h, b)
    }

    /// Solves `(H + λ·diag) δ = −b` by eliminating the disparity block; `None` if the
    /// reduced camera system is not positive definite.
    pub fn solve_damped(&self, lambda: f64) -> Option<DVector<f64>> {
        let nc = self.layout.n_cam;
        let mut s = self.h_cc.clone();
        for a in 0..nc {
            s[(a, a)] = damp(s[(a, a)], lambda);
        }
        let hd: Vec<f64> = self.h_dd.iter().map(|&h| damp(h, lambda)).collect();
        let mut rhs = -&self.b_c;
        for (kf, c) in self.coupling.iter().enumerate() {
            let Some(off) = self.layout.disparity_offsets[kf] else {
                continue;
            };
            let m = c.params.len();
            for p in 0..self.layout.pixels {
                let v = &c.values[p * m..(p + 1) * m];
                let inv = 1.0 / hd[off + p];
                let bd = self.b_d[off + p];
                for (a, &ga) in c.params.iter().enumerate() {
                    if v[a] == 0.0 {
                        continue;
                    }
                    let va = v[a] * inv;
                    rhs[ga] += va * bd;
                    for (bb, &gb) in c.params.iter().enumerate() {
                        s[(ga, gb)] -= va * v[bb];
                    }
                }
            }
        }
        let dc = if nc > 0 {
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let mut delta = DVector::zeros(self.layout.len());
        delta.rows_mut(0, nc).copy_from(&dc);
        for (kf, c) in self.coupling.iter().enumerate() {
            let Some(off) = self.layout.disparity_offsets[kf] else {
                continue;
            };
            let m = c.params.len();
            for p in 0..self.layout.pixels {
                let v = &c.values[p * m..(p + 1) * m];
                let coupled: f64 = c.params.iter().zip(v).map(|(&g, x)| x * dc[g]).sum();
                delta[nc + off + p] = (-self.b_d[off + p] - coupled) / hd[off + p];
            }
        }
        if delta.iter().all(|x| x.is_finite()) {
            Some(delta)
        } else {
            None
        }
    }
}

/// Per-pixel shape parameters, one vector per edge; NaN where the pixel did not contribute.
pub type AlphaMap = Vec<Vec<f64>>;

fn pixel_alpha(cfg: &SolverConfig, cs: Option<f64>) -> f64 {
    match cfg.kernel_choice {
        KernelChoice::Fixed(a) => a,
        // pixels without a similarity fall back to the static shape
        KernelChoice::Adaptive => cs.map_or(cfg.kernel.alpha_static, |cs| {
            adaptive_alpha(cs, &cfg.kernel)
        }),
    }
}

struct EdgeAccum {
    slots: [Option<usize>; CAM],
    h_cc: SMatrix<f64, CAM, CAM>,
    b_c: SVector<f64, CAM>,
    /// Empty when the source disparities are fixed.
    h_dd: Vec<f64>,
    b_d: Vec<f64>,
    coupling: Vec<f64>,
    photo: f64,
    embed: f64,
    alphas: Vec<f64>,
}

struct EdgeTask<'a> {
    graph: &'a KeyframeGraph,
    cfg: &'a SolverConfig,
    frozen_alpha: Option<&'a [f64]>,
    record_alpha: bool,
    /// `None` for an energy-only pass.
    slots: Option<[Option<usize>; CAM]>,
    disp_free: bool,
}

impl EdgeTask<'_> {
    fn run(&self, e: &FlowObservation) -> Result<EdgeAccum, SolveError> {
        let g = self.graph;
        let cfg = self.cfg;
        let src = &g.keyframes[e.source];
        let tgt = &g.keyframes[e.target];
        let projector = EdgeProjector::new(
            &src.pose,
            &tgt.pose,
            g.intrinsics[src.stream],
            g.intrinsics[tgt.stream],
        );
        let mut ev = EdgeEvaluator::new(projector, e, &src.features, &tgt.features, cfg.embed);
        let (w, h) = (e.width, e.height);
        let npix = w * h;
        let assemble = self.slots.is_some();
        let slots = self.slots.unwrap_or([None; CAM]);
        let active: Vec<usize> = (0..CAM).filter(|&a| slots[a].is_some()).collect();
        let disp_free = assemble && self.disp_free;
        let mut acc = EdgeAccum {
            slots,
            h_cc: SMatrix::zeros(),
            b_c: SVector::zeros(),
            h_dd: if disp_free {
                vec![0.0; npix]
            } else {
                Vec::new()
            },
            b_d: if disp_free {
                vec![0.0; npix]
            } else {
                Vec::new()
            },
            coupling: if disp_free {
                vec![0.0; npix * CAM]
            } else {
                Vec::new()
            },
            photo: 0.0,
            embed: 0.0,
            alphas: if self.record_alpha {
                vec![f64::NAN; npix]
            } else {
                Vec::new()
            },
        };
        let want_jac = assemble && (!active.is_empty() || disp_free);
        let kc = &cfg.kernel;
        let use_embed = cfg.lambda_embed > 0.0;
        let nonfinite = |what, x, y| SolveError::NonFiniteResidual {
            what,
            from: e.source,
            to: e.target,
            x,
            y,
        };

        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let conf = e.confidence_at(x, y);
                if conf == 0.0 {
                    continue;
                }
                let d = src.disparity.get(x, y);
                if !d.is_finite() {
                    return Err(SolveError::NonFiniteDisparity {
                        keyframe: e.source,
                        x,
                        y,
                    });
                }
                let Some(pe) = ev.eval(x, y, d, want_jac) else {
                    continue;
                };
                let alpha = match self.frozen_alpha {
                    Some(a) if a[p].is_finite() => a[p],
                    _ => pixel_alpha(cfg, pe.embed.map(|m| m.cs)),
                };
                if self.record_alpha {
                    acc.alphas[p] = alpha;
                }
                let rn = pe.flow.norm();
                if !rn.is_finite() {
                    return Err(nonfinite("flow residual", x, y));
                }
                acc.photo += conf * barron_rho(rn, alpha, kc.scale);
                let embed = pe.embed.filter(|_| use_embed);
                if let Some(m) = embed {
                    if !m.r.is_finite() {
                        return Err(nonfinite("embedding residual", x, y));
                    }
                    acc.embed += conf * m.r * m.r;
                }
                if !want_jac {
                    continue;
                }

                let fj = pe.flow_jacobian.expect("requested jacobian");
                let wf = cfg.lambda_photo * conf * irls_weight(rn, alpha, kc.scale, kc.epsilon);
                for k in 0..2 {
                    let mut row = [0.0; CAM + 1];
                    for c in 0..6 {
                        row[SLOT_POSE_I + c] = fj.d_pose_i[(k, c)];
                        row[SLOT_POSE_J + c] = fj.d_pose_j[(k, c)];
                    }
                    for c in 0..4 {
                        row[SLOT_K_SRC + c] = fj.d_intrinsics_source[(k, c)];
                        row[SLOT_K_TGT + c] = fj.d_intrinsics_target[(k, c)];
                    }
                    row[CAM] = fj.d_disparity[k];
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(nonfinite("flow jacobian", x, y));
                    }
                    acc.add_row(&row, pe.flow[k], wf, &active, disp_free.then_some(p));
                }
                if let (Some(m), Some(ej)) = (embed, pe.embed_jacobian()) {
                    let mut row = [0.0; CAM + 1];
                    for c in 0..6 {
                        row[SLOT_POSE_I + c] = ej.d_pose_i[c];
                        row[SLOT_POSE_J + c] = ej.d_pose_j[c];
                    }
                    for c in 0..4 {
                        row[SLOT_K_SRC + c] = ej.d_intrinsics_source[c];
                        row[SLOT_K_TGT + c] = ej.d_intrinsics_target[c];
                    }
                    row[CAM] = ej.d_disparity;
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(nonfinite("embedding jacobian", x, y));
                    }
                    let we = 2.0 * cfg.lambda_embed * conf;
                    acc.add_row(&row, m.r, we, &active, disp_free.then_some(p));
                }
            }
        }
        Ok(acc)
    }
}

impl EdgeAccum {
    fn add_row(
        &mut self,
        row: &[f64; CAM + 1],
        r: f64,
        w: f64,
        active: &[usize],
        pixel: Option<usize>,
    ) {
        if w == 0.0 {
            return;
        }
        for (i, &a) in active.iter().enumerate() {
            let wa = w * row[a];
            self.b_c[a] += wa * r;
            for &b in &active[i..] {
                self.h_cc[(a, b)] += wa * row[b];
            }
        }
        if let Some(p) = pixel {
            let wd = w * row[CAM];
            self.h_dd[p] += wd * row[CAM];
            self.b_d[p] += wd * r;
            let c = &mut self.coupling[p * CAM..(p + 1) * CAM];
            for &a in active {
                c[a] += wd * row[a];
            }
        }
    }
}

fn reg_energy(kf: &Keyframe, cfg: &RegConfig) -> f64 {
    if cfg.alpha_disp == 0.0 {
        return 0.0;
    }
    let s: f64 = kf
        .disparity
        .values
        .iter()
        .zip(&kf.disparity_prior.values)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&d, &p)| (d - p) * (d - p))
        .sum();
    cfg.alpha_disp * s
}

fn run_edges(
    graph: &KeyframeGraph,
    cfg: &SolverConfig,
    layout: Option<&UnknownLayout>,
    alphas: Option<&AlphaMap>,
    record_alpha: bool,
) -> Result<Vec<EdgeAccum>, SolveError> {
    graph
        .edges
        .par_iter()
        .enumerate()
        .map(|(k, e)| {
            EdgeTask {
                graph,
                cfg,
                frozen_alpha: alphas.map(|a| a[k].as_slice()),
                record_alpha,
                slots: layout.map(|l| l.edge_slots(graph, e)),
                disp_free: layout.is_some_and(|l| l.disparity_offsets[e.source].is_some()),
            }
            .run(e)
        })
        .collect()
}

fn sum_energy(graph: &KeyframeGraph, cfg: &SolverConfig, accs: &[EdgeAccum]) -> EnergyBreakdown {
    let photo = accs.iter().map(|a| a.photo).sum();
    let embed = accs.iter().map(|a| a.embed).sum();
    let reg = graph
        .keyframes
        .iter()
        .map(|k| reg_energy(k, &cfg.reg))
        .sum();
    EnergyBreakdown::finish(photo, embed, reg, cfg)
}

/// Energy at the current state with freshly computed shape parameters.
pub fn total_energy(
    graph: &KeyframeGraph,
    cfg: &SolverConfig,
) -> Result<EnergyBreakdown, SolveError> {
    energy_with(graph, cfg, None)
}

fn energy_with(
    graph: &KeyframeGraph,
    cfg: &SolverConfig,
    alphas: Option<&AlphaMap>,
) -> Result<EnergyBreakdown, SolveError> {
    let accs = run_edges(graph, cfg, None, alphas, false)?;
    Ok(sum_energy(graph, cfg, &accs))
}

/// Shape parameter of every contributing pixel at the current state.
pub fn alpha_map(graph: &KeyframeGraph, cfg: &SolverConfig) -> Result<AlphaMap, SolveError> {
    let accs = run_edges(graph, cfg, None, None, true)?;
    Ok(accs.into_iter().map(|a| a.alphas).collect())
}

/// Builds the Gauss–Newton normal equations at the current state.
pub fn assemble(graph: &KeyframeGraph, cfg: &SolverConfig) -> Result<NormalEquations, SolveError> {
    assemble_with(graph, cfg, None)
}

fn assemble_with(
    graph: &KeyframeGraph,
    cfg: &SolverConfig,
    alphas: Option<&AlphaMap>,
) -> Result<NormalEquations, SolveError> {
    let layout = UnknownLayout::new(graph, cfg);
    let accs = run_edges(graph, cfg, Some(&layout), alphas, false)?;
    let energy = sum_energy(graph, cfg, &accs);
    let nc = layout.n_cam;
    let npix = layout.pixels;

    let mut params: Vec<Vec<usize>> = vec![Vec::new(); graph.keyframes.len()];
    for (e, acc) in graph.edges.iter().zip(&accs) {
        if layout.disparity_offsets[e.source].is_some() {
            params[e.source].extend(acc.slots.iter().flatten());
        }
    }
    let mut coupling: Vec<DispCoupling> = params
        .into_iter()
        .enumerate()
        .map(|(kf, mut p)| {
            p.sort_unstable();
            p.dedup();
            let values = if layout.disparity_offsets[kf].is_some() {
                vec![0.0; npix * p.len()]
            } else {
                Vec::new()
            };
            DispCoupling { params: p, values }
        })
        .collect();

    let mut h_cc = DMatrix::zeros(nc, nc);
    let mut b_c = DVector::zeros(nc);
    let mut h_dd = DVector::zeros(layout.n_disp);
    let mut b_d = DVector::zeros(layout.n_disp);
    // merged in edge order so results do not depend on scheduling
    for (e, acc) in graph.edges.iter().zip(&accs) {
        for a in 0..CAM {
            let Some(ga) = acc.slots[a] else { continue };
            b_c[ga] += acc.b_c[a];
            for b in a..CAM {
                let Some(gb) = acc.slots[b] else { continue };
                let v = acc.h_cc[(a, b)];
                h_cc[(ga, gb)] += v;
                if ga != gb {
                    h_cc[(gb, ga)] += v;
                } else if a != b {
                    // two local slots sharing one unknown: the transposed entry lands on the diagonal too
                    h_cc[(ga, gb)] += v;
                }
            }
        }
        let Some(off) = layout.disparity_offsets[e.source] else {
            continue;
        };
        let c = &mut coupling[e.source];
        let m = c.params.len();
        let pos: Vec<Option<usize>> = acc
            .slots
            .iter()
            .map(|s| s.map(|g| c.params.binary_search(&g).unwrap()))
            .collect();
        for p in 0..npix {
            h_dd[off + p] += acc.h_dd[p];
            b_d[off + p] += acc.b_d[p];
            for (a, slot) in pos.iter().enumerate() {
                if let Some(q) = *slot {
                    c.values[p * m + q] += acc.coupling[p * CAM + a];
                }
            }
        }
    }
    if cfg.reg.alpha_disp > 0.0 {
        let two_a = 2.0 * cfg.reg.alpha_disp;
        for (kf, k) in graph.keyframes.iter().enumerate() {
            let Some(off) = layout.disparity_offsets[kf] else {
                continue;
            };
            for (p, (&d, &prior)) in k
                .disparity
                .values
                .iter()
                .zip(&k.disparity_prior.values)
                .enumerate()
            {
                if prior > 0.0 {
                    h_dd[off + p] += two_a;
                    b_d[off + p] += two_a * (d - prior);
                }
            }
        }
    }
    Ok(NormalEquations {
        layout,
        h_cc,
        b_c,
        h_dd,
        b_d,
        coupling,
        energy,
    })
}

/// Applies a stacked update: left-multiplied pose increments, additive intrinsics,
/// additive disparities clamped to [`MIN_DISPARITY`]. Fixed unknowns are untouched.
pub fn retract(graph: &mut KeyframeGraph, layout: &UnknownLayout, delta: &DVector<f64>) {
    assert_eq!(
        delta.len(),
        layout.len(),
        "update size does not match the unknowns"
    );
    for (kf, off) in graph.keyframes.iter_mut().zip(&layout.pose_offsets) {
        if let Some(o) = off {
            let t: Twist = delta.fixed_rows::<6>(*o).into_owned();
            kf.pose = kf.pose.retract(&t);
        }
    }
    for (k, off) in graph.intrinsics.iter_mut().zip(&layout.intrinsics_offsets) {
        if let Some(o) = off {
            *k = k.updated(delta.rows(*o, 4).as_slice());
        }
    }
    let nc = layout.n_cam;
    for (kf, off) in graph.keyframes.iter_mut().zip(&layout.disparity_offsets) {
        if let Some(o) = off {
            for (p, d) in kf.disparity.values.iter_mut().enumerate() {
                *d = (*d + delta[nc + o + p]).max(MIN_DISPARITY);
            }
        }
    }
}

/// One row of the energy trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: EnergyBreakdown,
    pub accepted: bool,
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The proposed step was below the update tolerance.
    Converged,
    MaxIterations,
    /// Damping grew past its limit without an energy decrease.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Row 0 is the initial state; later rows are attempted steps.
    pub trace: Vec<TraceRow>,
    pub accepted_steps: usize,
    pub stop: StopReason,
}

impl SolveReport {
    pub fn final_energy(&self) -> EnergyBreakdown {
        self.trace
            .iter()
            .rev()
            .find(|r| r.accepted)
            .map(|r| r.energy)
            .unwrap_or_default()
    }
}

struct Snapshot {
    poses: Vec<Pose>,
    intrinsics: Vec<Intrinsics>,
    disparities: Vec<Vec<f64>>,
}

impl Snapshot {
    fn take(g: &KeyframeGraph) -> Self {
        Self {
            poses: g.keyframes.iter().map(|k| k.pose).collect(),
            intrinsics: g.intrinsics.clone(),
            disparities: g
                .keyframes
                .iter()
                .map(|k| k.disparity.values.clone())
                .collect(),
        }
    }

    fn restore(self, g: &mut KeyframeGraph) {
        g.intrinsics = self.intrinsics;
        for ((k, p), d) in g.keyframes.iter_mut().zip(self.poses).zip(self.disparities) {
            k.pose = p;
            k.disparity.values = d;
        }
    }
}

/// Minimizes the total energy in place with Levenberg-damped Gauss–Newton steps.
pub fn solve(graph: &mut KeyframeGraph, cfg: &SolverConfig) -> Result<SolveReport, SolveError> {
    cfg.validate()?;
    graph.validate()?;
    if graph.edges.is_empty() {
        return Err(GraphError::NoEdges.into());
    }
    let alphas = if cfg.freeze_alpha {
        Some(alpha_map(graph, cfg)?)
    } else {
        None
    };
    let alphas = alphas.as_ref();
    let mut lambda = cfg.lm_init;
    let mut ne = assemble_with(graph, cfg, alphas)?;
    let mut energy = ne.energy;
    let mut trace = vec![TraceRow {
        iter: 0,
        energy,
        accepted: true,
        damping: lambda,
    }];
    let mut accepted_steps = 0;
    let mut stop = StopReason::MaxIterations;

    for iter in 1..=cfg.max_iters {
        let delta = loop {
            if let Some(d) = ne.solve_damped(lambda) {
                break d;
            }
            lambda *= cfg.lm_up;
            if lambda > cfg.lm_max {
                return Err(SolveError::Degenerate { damping: lambda });
            }
        };
        if delta.norm() < cfg.update_tolerance {
            stop = StopReason::Converged;
            break;
        }
        let snapshot = Snapshot::take(graph);
        retract(graph, &ne.layout, &delta);
        let trial = energy_with(graph, cfg, alphas)?;
        let accepted = trial.total < energy.total;
        trace.push(TraceRow {
            iter,
            energy: trial,
            accepted,
            damping: lambda,
        });
        if accepted {
            energy = trial;
            accepted_steps += 1;
            lambda = (lambda * cfg.lm_down).max(f64::MIN_POSITIVE);
            if iter < cfg.max_iters {
                ne = assemble_with(graph, cfg, alphas)?;
            }
        } else {
            snapshot.restore(graph);
            lambda *= cfg.lm_up;
            if lambda > cfg.lm_max {
                stop = StopReason::Stalled;
                break;
            }
        }
        log::debug!(
            "iter {iter}: E={:.6e} accepted={accepted} lambda={lambda:.1e}",
            trial.total
        );
    }
    Ok(SolveReport {
        trace,
        accepted_steps,
        stop,
    })
}

/// `iter,E_total,E_photo_ark,E_embed,E_reg,accepted` with shortest round-trip values.
pub fn format_energy_trace(trace: &[TraceRow]) -> String {
    let mut out = String::from("iter,E_total,E_photo_ark,E_embed,E_reg,accepted\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter,
            r.energy.total,
            r.energy.photo,
            r.energy.embed,
            r.energy.reg,
            u8::from(r.accepted)
        ));
    }
    out
}

/// Which keyframe pairs receive flow edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgePolicy {
    /// Connect keyframes at most this many positions apart.
    pub temporal_radius: usize,
    /// Also connect pairs whose covisibility reaches this fraction.
    pub covis_threshold: f64,
}

impl Default for EdgePolicy {
    fn default() -> Self {
        Self {
            temporal_radius: 2,
            covis_threshold: 0.9,
        }
    }
}

/// Fraction of the source's positive-disparity pixels that land inside the target grid.
pub fn covisibility(source: &Keyframe, target: &Keyframe, ks: Intrinsics, kt: Intrinsics) -> f64 {
    let proj = EdgeProjector::new(&source.pose, &target.pose, ks, kt);
    let (w, h) = (source.disparity.width, source.disparity.height);
    let (mut valid, mut inside) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let d = source.disparity.get(x, y);
            if !(d > 0.0) {
                continue;
            }
            valid += 1;
            if let Ok(r) = proj.project(&Vector2::new(x as f64, y as f64), d) {
                let p = r.pixel;
                if p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64 {
                    inside += 1;
                }
            }
        }
    }
    if valid == 0 {
        0.0
    } else {
        inside as f64 / valid as f64
    }
}

/// Directed keyframe pairs (sorted) from temporal proximity and covisibility.
pub fn plan_edges(
    keyframes: &[Keyframe],
    intrinsics: &[Intrinsics],
    policy: &EdgePolicy,
) -> Result<Vec<(usize, usize)>, GraphError> {
    let n = keyframes.len();
    if n < 2 {
        return Err(GraphError::TooFewKeyframes(n));
    }
    let mut pairs = std::collections::BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let near = i.abs_diff(j) <= policy.temporal_radius;
            let covis = || {
                let (a, b) = (&keyframes[i], &keyframes[j]);
                covisibility(a, b, intrinsics[a.stream], intrinsics[b.stream])
                    >= policy.covis_threshold
            };
            if near || (policy.covis_threshold <= 1.0 && covis()) {
                pairs.insert((i, j));
                pairs.insert((j, i));
            }
        }
    }
    if pairs.is_empty() {
        return Err(GraphError::NoEdges);
    }
    Ok(pairs.into_iter().collect())
}

/// Plans edges and asks `flow` for each observation.
pub fn build_graph<F>(
    keyframes: Vec<Keyframe>,
    intrinsics: Vec<Intrinsics>,
    policy: &EdgePolicy,
    mut flow: F,
) -> Result<KeyframeGraph, GraphError>
where
    F: FnMut(&Keyframe, &Keyframe, usize, usize) -> Result<FlowObservation, GraphError>,
{
    let pairs = plan_edges(&keyframes, &intrinsics, policy)?;
    let edges = pairs
        .into_iter()
        .map(|(i, j)| flow(&keyframes[i], &keyframes[j], i, j))
        .collect::<Result<Vec<_>, _>>()?;
    KeyframeGraph::new(keyframes, edges, intrinsics)
}

/// Frames whose mean flow from the last selected keyframe exceeds `threshold` pixels.
///
/// Frame 0 is always selected; `mean_flow(a, b)` is the mean flow magnitude from frame `a` to `b`.
pub fn select_keyframes<F>(n_frames: usize, threshold: f64, mut mean_flow: F) -> Vec<usize>
where
    F: FnMut(usize, usize) -> f64,
{
    let mut out = Vec::new();
    if n_frames == 0 {
        return out;
    }
    out.push(0);
    for f in 1..n_frames {
        let last = *out.last().unwrap();
        if mean_flow(last, f) > threshold {
            out.push(f);
        }
    }
    out
}
