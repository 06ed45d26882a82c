//! `semba`: synthetic scene generation, bundle adjustment and evaluation.

pub mod config;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use config::RunConfig;
use nalgebra::{DMatrix, Vector3};
use semba_core::eval::{
    align_trajectories, assign_labels, ate_rmse, format_metrics_csv, fuse_point_cloud,
    knn_transfer, seg_metrics,
};
use semba_core::graph::{format_energy_trace, solve};
use semba_core::io::{
    read_bundle, read_labels_csv, read_ply, read_tensor, read_tum, write_disparities, write_ply,
    write_tensor, write_tum, PlyCloud, Tensor,
};
use semba_core::synth::{gen_scene, perturb_init, write_scene};
use semba_core::{AlignMode, KernelChoice, KeyframeGraph, LabelSet, Pose};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "semba",
    version,
    about = "Dense bundle adjustment with an embedding-driven adaptive robust kernel"
)]
pub struct Cli {
    /// Run configuration (TOML); defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `scene.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic problem bundle with ground truth.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize a bundle and write the trajectory, energy trace, disparities and cloud.
    Ba {
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// ark | l2 | fixed:<alpha>
        #[arg(long)]
        kernel: Option<KernelChoice>,
        /// Drop the embedding term.
        #[arg(long)]
        no_embed: bool,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Trajectory error and, given clouds, semantic segmentation metrics.
    Eval {
        /// Estimated TUM trajectory.
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth TUM trajectory.
        #[arg(long)]
        gt: PathBuf,
        /// Predicted PLY cloud.
        #[arg(long, requires = "gt_cloud")]
        pred_cloud: Option<PathBuf>,
        /// Embeddings of the predicted cloud (default: `<pred stem>_embeddings.kmvt`).
        #[arg(long)]
        pred_embeddings: Option<PathBuf>,
        /// Labeled ground-truth PLY cloud.
        #[arg(long, requires = "pred_cloud")]
        gt_cloud: Option<PathBuf>,
        /// Label CSV (`name,v1,...,vC`); labels the predicted cloud from its embeddings.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// rigid | sim | none
        #[arg(long)]
        align: Option<AlignMode>,
        /// Also write the metrics CSV here.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
}

/// Runs a command and returns what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be >= 1");
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.scene.seed = seed;
    }
    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, &required(out, &cfg.paths.out, "--out")?),
        Command::Ba {
            bundle,
            out,
            kernel,
            no_embed,
            max_iters,
        } => {
            if let Some(k) = kernel {
                cfg.solver.kernel_choice = k;
            }
            if no_embed {
                cfg.solver.lambda_embed = 0.0;
            }
            if let Some(n) = max_iters {
                cfg.solver.max_iters = n;
            }
            cfg.validate()?;
            cmd_ba(
                &cfg,
                &required(bundle, &cfg.paths.bundle, "<BUNDLE>")?,
                &required(out, &cfg.paths.out, "--out")?,
            )
        }
        Command::Eval {
            est,
            gt,
            pred_cloud,
            pred_embeddings,
            gt_cloud,
            labels,
            align,
            metrics_out,
        } => {
            let clouds = match (pred_cloud, gt_cloud) {
                (Some(pred), Some(gt)) => Some(CloudInputs {
                    embeddings: pred_embeddings.unwrap_or_else(|| embeddings_path(&pred)),
                    pred,
                    gt,
                    labels,
                }),
                _ => None,
            };
            cmd_eval(
                &est,
                &gt,
                clouds.as_ref(),
                align.unwrap_or(cfg.eval.align),
                metrics_out.as_deref(),
            )
        }
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .with_context(|| format!("missing {name} (pass it or set it under [paths])"))
}

/// Sidecar holding the embeddings of `cloud.ply`.
pub fn embeddings_path(cloud: &Path) -> PathBuf {
    let stem = cloud
        .file_stem()
        .map_or_else(|| "cloud".into(), |s| s.to_string_lossy().into_owned());
    cloud.with_file_name(format!("{stem}_embeddings.kmvt"))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    let scene = gen_scene(&cfg.scene)?;
    let initial = perturb_init(
        &scene,
        cfg.scene.pose_noise,
        cfg.scene.disparity_noise,
        cfg.scene.seed,
    );
    write_scene(out, &scene, &initial, cfg.output.dtype)?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml())
        .with_context(|| format!("{}: cannot write", cfg_path.display()))?;
    Ok(format!(
        "keyframes: {}\nedges: {}\ndynamic fraction: {:.3}\nwritten: {}\n",
        scene.graph.keyframes.len(),
        scene.graph.edges.len(),
        scene.dynamic_fraction(),
        out.display()
    ))
}

fn check_finite(graph: &KeyframeGraph) -> Result<()> {
    for kf in &graph.keyframes {
        let p = kf.pose;
        let finite = p
            .translation
            .iter()
            .chain(p.rotation.coords.iter())
            .all(|v| v.is_finite());
        ensure!(finite, "keyframe {} has a non-finite pose", kf.index);
        if let Some(i) = kf.disparity.values.iter().position(|v| !v.is_finite()) {
            bail!(
                "keyframe {} has a non-finite disparity at ({}, {})",
                kf.index,
                i % kf.disparity.width,
                i / kf.disparity.width
            );
        }
    }
    Ok(())
}

pub fn cmd_ba(cfg: &RunConfig, bundle_dir: &Path, out: &Path) -> Result<String> {
    let bundle = read_bundle(bundle_dir)?;
    let mut graph = bundle.graph;
    let report = solve(&mut graph, &cfg.solver).context("bundle adjustment failed")?;
    let energy = report.final_energy();
    ensure!(energy.total.is_finite(), "final energy is not finite");
    check_finite(&graph)?;

    let stamps: Vec<f64> = graph.keyframes.iter().map(|k| k.index as f64).collect();
    let c2w: Vec<Pose> = graph.keyframes.iter().map(|k| k.pose.inverse()).collect();
    write_tum(&out.join("trajectory.txt"), &stamps, &c2w)?;
    let trace_path = out.join("energy_trace.csv");
    std::fs::write(&trace_path, format_energy_trace(&report.trace))
        .with_context(|| format!("{}: cannot write", trace_path.display()))?;
    write_disparities(out, &graph, cfg.output.dtype)?;
    let mut intr = String::new();
    for k in &graph.intrinsics {
        writeln!(intr, "{} {} {} {}", k.fx, k.fy, k.cx, k.cy).unwrap();
    }
    let intr_path = out.join("intrinsics.txt");
    std::fs::write(&intr_path, intr)
        .with_context(|| format!("{}: cannot write", intr_path.display()))?;

    let mut msg = format!(
        "iterations: {}\naccepted steps: {}\nstop: {:?}\nE_total: {:e}\n",
        report.trace.len() - 1,
        report.accepted_steps,
        report.stop,
        energy.total
    );
    if let Some(pca) = &bundle.pca {
        let cloud = fuse_point_cloud(&graph, pca, cfg.eval.cloud_stride)?;
        let n = cloud.points.len();
        let ply = PlyCloud {
            points: cloud
                .points
                .iter()
                .map(|p| p.cast::<f32>().into())
                .collect(),
            labels: vec![semba_core::eval::UNLABELED; n],
        };
        let ply_path = out.join("cloud.ply");
        write_ply(&ply_path, &ply)?;
        let c = cloud.embeddings.ncols();
        // channel-major with N as the width
        let data: Vec<f64> = (0..c)
            .flat_map(|j| {
                cloud
                    .embeddings
                    .column(j)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        write_tensor(
            &embeddings_path(&ply_path),
            &Tensor::new(c, 1, n, data).with_dtype(cfg.output.dtype),
        )?;
        writeln!(msg, "cloud points: {n}").unwrap();
    }
    writeln!(msg, "written: {}", out.display()).unwrap();
    Ok(msg)
}

pub struct CloudInputs {
    pub pred: PathBuf,
    pub embeddings: PathBuf,
    pub gt: PathBuf,
    pub labels: Option<PathBuf>,
}

fn positions(poses: &[Pose]) -> Vec<Vector3<f64>> {
    poses.iter().map(|p| p.translation).collect()
}

fn cloud_points(c: &PlyCloud) -> Vec<Vector3<f64>> {
    c.points.iter().map(|p| p.coords.cast::<f64>()).collect()
}

pub fn cmd_eval(
    est: &Path,
    gt: &Path,
    clouds: Option<&CloudInputs>,
    align: AlignMode,
    metrics_out: Option<&Path>,
) -> Result<String> {
    let (_, est_poses) = read_tum(est)?;
    let (_, gt_poses) = read_tum(gt)?;
    let (e, g) = (positions(&est_poses), positions(&gt_poses));
    let (aligned, a) = align_trajectories(&e, &g, align)?;
    let ate = ate_rmse(&aligned, &g)?;
    let mut msg = format!("ATE: {:.2} cm\n", 100.0 * ate);
    if align == AlignMode::Similarity {
        writeln!(msg, "scale: {:.6}", a.scale).unwrap();
    }
    let Some(c) = clouds else {
        return Ok(msg);
    };
    let pred = read_ply(&c.pred)?;
    let gt_cloud = read_ply(&c.gt)?;
    let (pred_labels, names) = match &c.labels {
        Some(path) => {
            let (names, text) = read_labels_csv(path)?;
            let set = LabelSet::new(names, text)
                .with_context(|| format!("{}: bad label set", path.display()))?;
            let t = read_tensor(&c.embeddings)?;
            ensure!(
                t.height == 1 && t.width == pred.points.len(),
                "{}: expected 1 x {} embeddings, found {} x {}",
                c.embeddings.display(),
                pred.points.len(),
                t.height,
                t.width
            );
            let emb = DMatrix::from_fn(t.width, t.channels, |i, j| t.data[j * t.width + i]);
            (assign_labels(&emb, &set)?, Some(set.names))
        }
        None => (pred.labels.clone(), None),
    };
    let transferred = knn_transfer(&cloud_points(&pred), &pred_labels, &cloud_points(&gt_cloud))?;
    let metrics = seg_metrics(&transferred, &gt_cloud.labels)?;
    let csv = format_metrics_csv(&metrics, names.as_deref());
    if let Some(path) = metrics_out {
        std::fs::write(path, &csv).with_context(|| format!("{}: cannot write", path.display()))?;
    }
    msg.push_str(&csv);
    Ok(msg)
}
