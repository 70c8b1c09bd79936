//! Map generation and coarse-to-fine online localization.
//!
//! Localization runs the three pyramid levels from coarse (s = 8) to fine
//! (s = 2). Each level builds a cost volume around the running pose, turns it
//! into per-axis distributions and applies the expected offset; the next level
//! searches a finer grid centred on the updated pose.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::geometry::{apply_offset, CameraModel, Pose3, PoseSE2Offset};
use crate::map::{build_node, DepthPoint, MapDatabase};
use crate::matching::{
    build_node_cost_volume, fuse_marginals, marginal_distributions_with, marginalize, regularize, availability,
    CostVolumeConfig, MarginalDistributions, Marginalization, ProbabilityHead, RegularizerWeights,
    VarianceThresholds,
};
use crate::selection::SelectionConfig;

/// Softmax temperature on raw descriptor distances. Costs of unit-norm
/// descriptors differ by O(1) between aligned and misaligned nodes, and the
/// joint softmax runs over ~1.3k nodes, so the temperature sits well below
/// `1 / ln(nodes)`.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// Pyramid scales in cascade order.
pub const CASCADE: [u8; 3] = [8, 4, 2];

/// One camera's input for a frame.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub camera_id: u16,
    pub camera: CameraModel,
    pub pyramid: FeaturePyramid,
}

#[derive(Clone, Debug)]
pub struct FrameInput {
    /// Seconds.
    pub timestamp: f64,
    pub views: Vec<CameraView>,
    /// Vehicle-frame motion since the previous frame.
    pub incremental_motion: PoseSE2Offset,
}

/// A mapping frame: input plus its ground-truth pose and, per view, the
/// pixels with known 3D coordinates.
#[derive(Clone, Debug)]
pub struct MappingFrame {
    pub frame: FrameInput,
    pub ground_truth: Pose3,
    pub depth_points: Vec<Vec<DepthPoint>>,
}

/// Per-level search settings for the cascade.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LevelSettings {
    pub scale: u8,
    pub grid: CostVolumeConfig,
    #[serde(skip, default)]
    pub regularizer: RegularizerWeights,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalizerConfig {
    /// Ordered like [`CASCADE`].
    pub levels: [LevelSettings; 3],
    pub marginalization: Marginalization,
    pub head: ProbabilityHead,
    pub temperature: f64,
    /// Checked against the finest level's distributions.
    pub thresholds: VarianceThresholds,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            levels: CASCADE.map(|scale| LevelSettings {
                scale,
                grid: CostVolumeConfig::default_for_scale(scale),
                regularizer: RegularizerWeights::identity(),
            }),
            marginalization: Marginalization::ReduceAverage,
            head: ProbabilityHead::default(),
            temperature: DEFAULT_TEMPERATURE,
            thresholds: VarianceThresholds::default(),
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (l, s) in self.levels.iter().zip(CASCADE) {
            if l.scale != s {
                return Err(Error::Config(format!("cascade level scale {} where {s} expected", l.scale)));
            }
            l.grid.validate()?;
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Milliseconds spent per cascade level and in total.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Timing {
    /// Ordered like [`CASCADE`].
    pub level_ms: [f64; 3],
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub timestamp: f64,
    pub prior: Pose3,
    /// Equal to the running pose reached before a failure when unavailable.
    pub estimated_pose: Pose3,
    /// Ordered like [`CASCADE`]; zero for levels that did not run.
    pub offset_per_level: [PoseSE2Offset; 3],
    pub distributions: [Option<MarginalDistributions>; 3],
    pub available: bool,
    /// Scale of the level that failed, if any.
    pub failed_level: Option<u8>,
    pub failure: Option<String>,
    pub timing: Timing,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MapConfig {
    pub selection: SelectionConfig,
}

/// Build one map node per (frame, camera). Node ids are
/// `frame_index * views + view_index`.
pub fn generate_map(frames: &[MappingFrame], cfg: &MapConfig) -> Result<MapDatabase> {
    let mut nodes = Vec::new();
    for (fi, mf) in frames.iter().enumerate() {
        if mf.depth_points.len() != mf.frame.views.len() {
            return Err(Error::Config(format!(
                "{} depth point lists for {} views",
                mf.depth_points.len(),
                mf.frame.views.len()
            ))
            .in_frame(fi));
        }
        let per_frame = mf.frame.views.len() as u64;
        for (vi, (view, depth)) in mf.frame.views.iter().zip(&mf.depth_points).enumerate() {
            let id = fi as u64 * per_frame + vi as u64;
            let node = build_node(&view.pyramid, depth, mf.ground_truth, view.camera_id, id, &cfg.selection)
                .map_err(|e| e.in_frame(fi))?;
            nodes.push(node);
        }
    }
    MapDatabase::new(nodes)
}

/// Estimate the pose of one frame starting from `prior`.
///
/// Errors inside the cascade do not propagate: the result is flagged
/// unavailable and names the failing level.
pub fn localize_frame(frame: &FrameInput, prior: &Pose3, db: &MapDatabase, cfg: &LocalizerConfig) -> LocalizationResult {
    let start = Instant::now();
    let mut result = LocalizationResult {
        timestamp: frame.timestamp,
        prior: *prior,
        estimated_pose: *prior,
        offset_per_level: [PoseSE2Offset::zero(); 3],
        distributions: [None, None, None],
        available: false,
        failed_level: None,
        failure: None,
        timing: Timing::default(),
    };
    if frame.views.is_empty() {
        result.failure = Some("frame has no camera views".into());
        return result;
    }
    let nodes: Result<Vec<_>> = frame
        .views
        .iter()
        .map(|v| db.nearest_node_for_camera(prior, v.camera_id))
        .collect();
    let nodes = match nodes {
        Ok(n) => n,
        Err(e) => {
            result.failure = Some(e.to_string());
            result.timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
            return result;
        }
    };

    let mut pose = *prior;
    for (li, level) in cfg.levels.iter().enumerate() {
        let t0 = Instant::now();
        let step = run_level(frame, &nodes, &pose, level, cfg);
        result.timing.level_ms[li] = t0.elapsed().as_secs_f64() * 1e3;
        match step {
            Ok(dist) => {
                let offset = dist.expected_offset();
                pose = apply_offset(&pose, &offset);
                result.offset_per_level[li] = offset;
                result.distributions[li] = Some(dist);
            }
            Err(e) => {
                result.failed_level = Some(level.scale);
                result.failure = Some(e.to_string());
                result.estimated_pose = pose;
                result.timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
                return result;
            }
        }
    }
    result.estimated_pose = pose;
    result.available = result.distributions[2]
        .as_ref()
        .is_some_and(|d| availability(d, &cfg.thresholds));
    result.timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
    result
}

fn run_level(
    frame: &FrameInput,
    nodes: &[&crate::map::MapNode],
    pose: &Pose3,
    level: &LevelSettings,
    cfg: &LocalizerConfig,
) -> Result<MarginalDistributions> {
    let mut parts = Vec::with_capacity(frame.views.len());
    for (view, node) in frame.views.iter().zip(nodes) {
        let dense = view
            .pyramid
            .level(level.scale)
            .ok_or_else(|| Error::Matching(format!("pyramid lacks level s={}", level.scale)))?;
        let vol = build_node_cost_volume(node, dense, pose, &view.camera, &level.grid)?;
        let vol = regularize(&vol, &level.regularizer);
        let keypoints = &node.level(level.scale).expect("node has every level").keypoints;
        let weights: Vec<f64> = keypoints.iter().map(|k| f64::from(k.weight)).collect();
        parts.push(marginalize(&vol, &weights, cfg.marginalization)?);
    }
    let fused = if parts.len() == 1 {
        parts.pop().expect("one part")
    } else {
        fuse_marginals(&parts)?
    };
    marginal_distributions_with(&fused, cfg.temperature, cfg.head)
}

/// Localize a sequence, propagating the prior by dead reckoning.
///
/// The first frame uses `initial_prior`. Each later frame's prior is the
/// previous estimate (or the previous prior when that frame was unavailable)
/// moved by the frame's incremental motion.
pub fn run_sequence(
    frames: &[FrameInput],
    initial_prior: &Pose3,
    db: &MapDatabase,
    cfg: &LocalizerConfig,
) -> Result<Vec<LocalizationResult>> {
    if frames.is_empty() {
        return Err(Error::Query("empty frame sequence".into()));
    }
    if let Some(i) = frames.windows(2).position(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(Error::Query(format!(
            "timestamps not strictly increasing at frame {}",
            i + 1
        )));
    }
    let mut out: Vec<LocalizationResult> = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let prior = next_prior(out.last(), initial_prior, &frame.incremental_motion);
        let r = localize_frame(frame, &prior, db, cfg);
        if let Some(f) = &r.failure {
            log::debug!("frame {t}: {f}");
        }
        out.push(r);
    }
    Ok(out)
}

/// Prior for the next frame of a sequence: `initial` for the first frame,
/// otherwise the previous estimate (or previous prior when that frame was
/// unavailable) moved by `motion`.
pub fn next_prior(previous: Option<&LocalizationResult>, initial: &Pose3, motion: &PoseSE2Offset) -> Pose3 {
    match previous {
        None => *initial,
        Some(prev) => {
            let anchor = if prev.available { prev.estimated_pose } else { prev.prior };
            apply_offset(&anchor, motion)
        }
    }
}

/// Timestamped pose, one row of a trajectory CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose3,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PoseRow {
    timestamp: f64,
    x: f64,
    y: f64,
    z: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MotionRow {
    timestamp: f64,
    dx: f64,
    dy: f64,
    dpsi: f64,
}

/// Trajectory CSV: `timestamp,x,y,z,qw,qx,qy,qz`.
pub fn write_trajectory<W: Write>(poses: &[StampedPose], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for p in poses {
        let [qw, qx, qy, qz] = p.pose.quaternion_wxyz();
        let t = p.pose.position;
        csv.serialize(PoseRow {
            timestamp: p.timestamp,
            x: t.x,
            y: t.y,
            z: t.z,
            qw,
            qx,
            qy,
            qz,
        })?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(r: R) -> Result<Vec<StampedPose>> {
    let mut csv = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in csv.deserialize::<PoseRow>().enumerate() {
        let row = row?;
        let pose = Pose3::from_raw_parts([row.x, row.y, row.z], row.qw, row.qx, row.qy, row.qz)
            .map_err(|e| Error::format(format!("trajectory row {}", i + 1), e.to_string()))?;
        out.push(StampedPose {
            timestamp: row.timestamp,
            pose,
        });
    }
    Ok(out)
}

/// Incremental motion CSV: `timestamp,dx,dy,dpsi`.
pub fn write_motion<W: Write>(motion: &[(f64, PoseSE2Offset)], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for (timestamp, m) in motion {
        csv.serialize(MotionRow {
            timestamp: *timestamp,
            dx: m.dx,
            dy: m.dy,
            dpsi: m.dpsi,
        })?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_motion<R: Read>(r: R) -> Result<Vec<(f64, PoseSE2Offset)>> {
    let mut csv = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in csv.deserialize::<MotionRow>() {
        let row = row?;
        out.push((row.timestamp, PoseSE2Offset::new(row.dx, row.dy, row.dpsi)));
    }
    Ok(out)
}

pub fn save_trajectory(poses: &[StampedPose], path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), |w| write_trajectory(poses, w))
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<StampedPose>> {
    read_trajectory(std::fs::File::open(path)?)
}
