//! Run configuration: one TOML document with a section per module.
//!
//! Every field has a default, so an empty file (or no file) is a valid
//! configuration. Unknown keys are rejected at every level.
//!
//! ```toml
//! [solver]              # damped Gauss-Newton and energy weights
//! max_iters = 20
//! update_tolerance = 1e-8
//! lm_init = 1e-4
//! lm_up = 10.0
//! lm_down = 0.5
//! lm_max = 1e10
//! kernel_choice = "ark"  # ark | l2 | fixed:<alpha>
//! lambda_photo = 1.0
//! lambda_embed = 2.0
//! optimize_intrinsics = false
//! freeze_alpha = false
//! # window = 4          # optimize only the last N keyframes
//!
//! [solver.kernel]       # adaptive robust kernel
//! scale = 1.0
//! alpha_static = 2.0
//! alpha_dynamic = -2.0
//! kappa = 0.5
//! tau = 0.1
//! epsilon = 1e-8
//!
//! [solver.embed]
//! mode = "photometric"   # photometric | angular
//! lambda = 2.0
//! epsilon = 1e-6
//!
//! [solver.reg]
//! alpha_disp = 1.0
//!
//! [scene]               # synthetic generator
//! num_keyframes = 8
//! width = 64
//! height = 48
//! trajectory = "arc"     # arc | orbit | random-walk
//! magnitude = 0.6
//! depth_min = 1.0
//! depth_max = 5.0
//! embedding_dim = 16
//! decoded_dim = 32
//! num_classes = 6
//! dynamic_fraction = 0.0
//! motion_px = 5.0
//! decorrelation = 1.0
//! flow_noise = 0.0
//! embedding_noise = 0.0
//! disparity_noise = 0.0
//! pose_noise = 0.0
//! seed = 0
//!
//! [scene.intrinsics]
//! fx = 60.0
//! fy = 60.0
//! cx = 31.5
//! cy = 23.5
//!
//! [scene.edges]
//! temporal_radius = 2
//! covis_threshold = 0.9
//!
//! [eval]
//! align = "sim"          # rigid | sim | none
//! cloud_stride = 2
//!
//! [output]
//! dtype = "f64"          # f32 | f64 for written tensors
//!
//! [paths]               # fallbacks for omitted command-line paths
//! # bundle = "scene"
//! # out = "run"
//! ```

use anyhow::{Context, Result};
use semba_core::{AlignMode, Dtype, SceneConfig, SolverConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub scene: SceneConfig,
    pub eval: EvalOptions,
    pub output: OutputOptions,
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub align: AlignMode,
    /// Keep every n-th valid pixel when fusing the predicted cloud.
    pub cloud_stride: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            align: AlignMode::Similarity,
            cloud_stride: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputOptions {
    /// f64 keeps written states bit-exact.
    pub dtype: Dtype,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self { dtype: Dtype::F64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("{}: cannot read config", path.display()))?;
        Self::parse(&text).with_context(|| format!("{}: invalid config", path.display()))
    }

    /// Loads `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.scene.validate()?;
        anyhow::ensure!(
            self.eval.cloud_stride >= 1,
            "eval.cloud_stride must be >= 1"
        );
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use semba_core::KernelChoice;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn documented_example_matches_defaults() {
        let doc: String = include_str!("config.rs")
            .lines()
            .take_while(|l| l.starts_with("//!"))
            .map(|l| l.trim_start_matches("//!").strip_prefix(' ').unwrap_or(""))
            .skip_while(|l| !l.starts_with("```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("```"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert_eq!(RunConfig::parse(&doc).unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.solver.kernel_choice = KernelChoice::Fixed(0.5);
        cfg.solver.window = Some(3);
        cfg.scene.dynamic_fraction = 0.2;
        cfg.eval.align = AlignMode::Rigid;
        cfg.paths.out = Some("run".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [
            "bogus = 1",
            "[solver]\nmax_iter = 3",
            "[solver.kernel]\nalpha = 1",
            "[scene]\nkeyframes = 3",
            "[eval]\nalignment = \"sim\"",
            "[extra]",
        ] {
            assert!(RunConfig::parse(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            "[solver]\nmax_iters = 0",
            "[solver]\nkernel_choice = \"huber\"",
            "[scene]\nnum_keyframes = 1",
            "[eval]\nalign = \"affine\"",
            "[eval]\ncloud_stride = 0",
            "[output]\ndtype = \"f16\"",
        ] {
            assert!(RunConfig::parse(doc).is_err(), "{doc}");
        }
    }
}
