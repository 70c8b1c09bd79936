//! `vloc`: map building, localization, evaluation and synthetic benchmarks.

mod config;
mod dataset;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vloc::eval::{decompose_error, save_records, summarize, ErrorRecord, MetricsSummary};
use vloc::map::{build_node, MapDatabase};
use vloc::pipeline::{localize_frame, next_prior, save_trajectory, LocalizationResult, StampedPose};
use vloc::synth::{run_ablation, BenchmarkScene, PriorMode};

use config::RunConfig;
use dataset::Dataset;

#[derive(Parser)]
#[command(name = "vloc", version, about = "Visual localization against a keypoint map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the world seed (synth, ablate) or the selection seed (build-map).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Perturbed,
    DeadReckoning,
}

impl From<PriorArg> for PriorMode {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::Perturbed => PriorMode::Perturbed,
            PriorArg::DeadReckoning => PriorMode::DeadReckoning,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a map database from the mapping trial of a dataset directory.
    BuildMap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Localize the query trial of a dataset directory against a map.
    Localize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Output directory for estimates.csv and localization.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        prior_mode: Option<PriorArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare an estimated trajectory against ground truth.
    Eval {
        /// Trajectory CSV of reported poses; frames missing here count as unavailable.
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Directory for summary.json and the per-frame results.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic world and run the closed-loop benchmark.
    Synth {
        #[arg(long)]
        frames: Option<usize>,
        /// Descriptor noise sigma.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, value_enum)]
        prior_mode: Option<PriorArg>,
        /// Directory for summary.json, results.csv and trajectories.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the rendered world as a dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Selection strategy x marginalization grid on one synthetic world.
    Ablate {
        #[arg(long)]
        frames: Option<usize>,
        /// Directory for ablation.csv and ablation.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildMap { dataset, out, common } => build_map(&dataset, &out, &common),
        Command::Localize {
            dataset,
            map,
            out,
            prior_mode,
            common,
        } => localize(&dataset, &map, &out, prior_mode, &common),
        Command::Eval {
            estimates,
            ground_truth,
            out,
            common,
        } => {
            RunConfig::load(common.config.as_deref())?;
            eval(&estimates, &ground_truth, out.as_deref())
        }
        Command::Synth {
            frames,
            noise,
            prior_mode,
            out,
            dataset,
            common,
        } => synth(frames, noise, prior_mode, out.as_deref(), dataset.as_deref(), &common),
        Command::Ablate { frames, out, common } => ablate(frames, out.as_deref(), &common),
    }
}

fn build_map(dataset: &Path, out: &Path, common: &Common) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.map.selection.seed = seed;
    }
    let ds = Dataset::open(dataset)?;
    let poses = ds.mapping_trajectory()?;
    let per_frame = ds.cameras.len() as u64;
    let mut nodes = Vec::new();
    for (t, sp) in poses.iter().enumerate() {
        let (views, depth) = ds.mapping_frame(t).with_context(|| format!("mapping frame {t}"))?;
        for (vi, (view, points)) in views.iter().zip(&depth).enumerate() {
            let node = build_node(
                &view.pyramid,
                points,
                sp.pose,
                view.camera_id,
                t as u64 * per_frame + vi as u64,
                &cfg.map.selection,
            )
            .with_context(|| format!("mapping frame {t}, camera {}", view.camera_id))?;
            nodes.push(node);
        }
    }
    let db = MapDatabase::new(nodes)?;
    db.save(out)?;
    let keypoints: usize = db.nodes().iter().map(|n| n.keypoint_count()).sum();
    println!(
        "map: {} nodes, {keypoints} keypoints, selection {} -> {}",
        db.len(),
        cfg.map.selection.strategy,
        out.display()
    );
    Ok(())
}

fn localize(dataset: &Path, map: &Path, out: &Path, prior_mode: Option<PriorArg>, common: &Common) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(p) = prior_mode {
        cfg.prior_mode = p.into();
    }
    let ds = Dataset::open(dataset)?;
    let db = MapDatabase::load(map).with_context(|| format!("loading {}", map.display()))?;
    let motion = ds.query_motion()?;
    let priors = ds.query_priors()?;
    if priors.is_empty() {
        bail!("query/priors.csv is empty");
    }
    fs::create_dir_all(out)?;
    let mut results: Vec<LocalizationResult> = Vec::with_capacity(motion.len());
    for t in 0..motion.len() {
        let frame = ds.query_frame(t, &motion).with_context(|| format!("query frame {t}"))?;
        let prior = match cfg.prior_mode {
            PriorMode::Perturbed => {
                priors
                    .get(t)
                    .with_context(|| format!("query/priors.csv has no row for frame {t}"))?
                    .pose
            }
            PriorMode::DeadReckoning => next_prior(results.last(), &priors[0].pose, &frame.incremental_motion),
        };
        results.push(localize_frame(&frame, &prior, &db, &cfg.localizer));
    }

    let estimates: Vec<StampedPose> = results
        .iter()
        .filter(|r| r.available)
        .map(|r| StampedPose {
            timestamp: r.timestamp,
            pose: r.estimated_pose,
        })
        .collect();
    save_trajectory(&estimates, out.join("estimates.csv"))?;
    write_localization_log(&results, &out.join("localization.csv"))?;
    let mean_ms = results.iter().map(|r| r.timing.total_ms).sum::<f64>() / results.len().max(1) as f64;
    println!(
        "localized {} frames, {} available, {:.1} ms/frame -> {}",
        results.len(),
        estimates.len(),
        mean_ms,
        out.display()
    );
    Ok(())
}

fn write_localization_log(results: &[LocalizationResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "timestamp", "available", "failed_level", "x", "y", "z", "qw", "qx", "qy", "qz", "ms_s8", "ms_s4", "ms_s2",
        "total_ms",
    ])?;
    for r in results {
        let p = r.estimated_pose.position;
        let [qw, qx, qy, qz] = r.estimated_pose.quaternion_wxyz();
        let mut row = vec![
            r.timestamp.to_string(),
            u8::from(r.available).to_string(),
            r.failed_level.map(|s| s.to_string()).unwrap_or_default(),
        ];
        row.extend([p.x, p.y, p.z, qw, qx, qy, qz].map(|v| v.to_string()));
        row.extend(r.timing.level_ms.map(|v| format!("{v:.3}")));
        row.push(format!("{:.3}", r.timing.total_ms));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-frame records against ground truth; ground-truth frames without a
/// matching estimate count as unavailable.
fn match_records(estimates: &[StampedPose], ground_truth: &[StampedPose]) -> Vec<ErrorRecord> {
    ground_truth
        .iter()
        .map(|gt| {
            match estimates.iter().find(|e| (e.timestamp - gt.timestamp).abs() <= 1e-6) {
                Some(e) => ErrorRecord {
                    timestamp: gt.timestamp,
                    ..decompose_error(&e.pose, &gt.pose)
                },
                None => ErrorRecord::unavailable(gt.timestamp),
            }
        })
        .collect()
}

fn eval(estimates: &Path, ground_truth: &Path, out: Option<&Path>) -> Result<()> {
    let est = vloc::pipeline::load_trajectory(estimates).with_context(|| format!("reading {}", estimates.display()))?;
    let gt =
        vloc::pipeline::load_trajectory(ground_truth).with_context(|| format!("reading {}", ground_truth.display()))?;
    if est.is_empty() {
        bail!("{} contains no estimates", estimates.display());
    }
    if gt.is_empty() {
        bail!("{} contains no poses", ground_truth.display());
    }
    let records = match_records(&est, &gt);
    let summary = summarize(&records)?;
    report(&summary, &records, out)
}

fn report(summary: &MetricsSummary, records: &[ErrorRecord], out: Option<&Path>) -> Result<()> {
    print!("{}", summary.table());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        summary.write_json(dir.join("summary.json"))?;
        save_records(records, dir.join("results.csv"))?;
    }
    Ok(())
}

fn synth(
    frames: Option<usize>,
    noise: Option<f64>,
    prior_mode: Option<PriorArg>,
    out: Option<&Path>,
    dataset: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.spec.seed = seed;
    }
    if let Some(f) = frames {
        cfg.spec.frames = f;
    }
    if let Some(n) = noise {
        cfg.spec.noise = n;
    }
    if let Some(p) = prior_mode {
        cfg.prior_mode = p.into();
    }
    cfg.spec.validate()?;
    let scene = BenchmarkScene::new(&cfg.spec)?;
    if let Some(dir) = dataset {
        dataset::write_scene(dir, &scene, &scene.priors())?;
        println!("dataset written to {}", dir.display());
    }
    let db = vloc::pipeline::generate_map(&scene.mapping, &cfg.map)?;
    let rep = scene.evaluate(&db, &cfg.localizer, cfg.prior_mode)?;
    report(&rep.summary, &rep.records, out)?;
    println!("runtime: {:.1} ms/frame mean, {:.1} ms max", rep.mean_frame_ms, rep.max_frame_ms);
    if let Some(dir) = out {
        let stamp = |p: &vloc::Pose3, t: f64| StampedPose { timestamp: t, pose: *p };
        let est: Vec<StampedPose> = rep
            .results
            .iter()
            .filter(|r| r.available)
            .map(|r| stamp(&r.estimated_pose, r.timestamp))
            .collect();
        let gt: Vec<StampedPose> = rep
            .ground_truth
            .iter()
            .zip(&scene.world.timestamps)
            .map(|(p, t)| stamp(p, *t))
            .collect();
        save_trajectory(&est, dir.join("estimates.csv"))?;
        save_trajectory(&gt, dir.join("ground_truth.csv"))?;
        fs::write(dir.join("world.txt"), cfg.spec.to_text())?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationLine {
    selection: String,
    marginalization: String,
    available_percent: f64,
    rms_horizontal: Option<f64>,
    rms_yaw_deg: Option<f64>,
    mean_frame_ms: f64,
}

fn ablate(frames: Option<usize>, out: Option<&Path>, common: &Common) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.spec.seed = seed;
    }
    if let Some(f) = frames {
        cfg.spec.frames = f;
    }
    cfg.spec.validate()?;
    let rows = run_ablation(&cfg.benchmark())?;
    let lines: Vec<AblationLine> = rows
        .iter()
        .map(|r| AblationLine {
            selection: r.strategy.to_string(),
            marginalization: r.marginalization.to_string(),
            available_percent: r.summary.available_percent,
            rms_horizontal: r.summary.metrics.as_ref().map(|m| m.rms_horizontal),
            rms_yaw_deg: r.summary.metrics.as_ref().map(|m| m.rms_yaw_deg),
            mean_frame_ms: r.mean_frame_ms,
        })
        .collect();
    println!("{:<16}{:>10}{:>14}{:>12}{:>10}", "method", "avail %", "RMS horiz m", "RMS yaw", "ms");
    for l in &lines {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<16}{:>10.1}{:>14}{:>12}{:>10.1}",
            format!("{}+{}", l.selection, l.marginalization),
            l.available_percent,
            f(l.rms_horizontal),
            f(l.rms_yaw_deg),
            l.mean_frame_ms
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        for l in &lines {
            w.serialize(l)?;
        }
        w.flush()?;
        serde_json::to_writer_pretty(File::create(dir.join("ablation.json"))?, &lines)?;
    }
    Ok(())
}
