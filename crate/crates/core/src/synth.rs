//! Synthetic worlds with known landmarks, descriptors and trajectories.
//!
//! A smooth planar trajectory runs through a corridor of point landmarks. Each
//! landmark carries a unit descriptor and a reliability; views are rendered by
//! splatting visible landmark descriptors into the dense maps of every pyramid
//! level over a fixed low-magnitude background pattern.
//!
//! World spec files are plain `key = value` lines; `#` starts a comment. Keys
//! are the field names of [`WorldSpec`]; omitted keys keep their defaults.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::{decompose_error, summarize, ErrorRecord, MetricsSummary};
use crate::features::{FeaturePyramid, DESCRIPTOR_DIM};
use crate::geometry::{apply_offset, CameraModel, Point3, Pose3, PoseSE2Offset, Projector};
use crate::map::{DepthPoint, MapDatabase};
use crate::matching::Marginalization;
use crate::pipeline::{
    generate_map, localize_frame, run_sequence, CameraView, FrameInput, LocalizationResult, LocalizerConfig,
    MapConfig, MappingFrame,
};
use crate::selection::SelectionStrategy;

/// Parameters of a synthetic world, its rendering and the benchmark priors.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorldSpec {
    pub landmarks: usize,
    pub frames: usize,
    /// Meters between consecutive frames.
    pub frame_spacing: f64,
    /// Seconds between consecutive frames.
    pub frame_interval: f64,
    /// Fraction of landmarks with reliability 1.
    pub stable_fraction: f64,
    /// Reliability given to the remaining landmarks.
    pub unreliable_reliability: f64,
    /// Maximum horizontal distance of a landmark from the trajectory centreline.
    pub corridor_radius: f64,
    /// Minimum horizontal distance (keeps the driven lane clear).
    pub corridor_clearance: f64,
    pub min_height: f64,
    pub max_height: f64,
    /// Corridor length beyond the last frame, meters.
    pub lookahead: f64,
    pub heading_amplitude_deg: f64,
    /// Arc length of one heading oscillation, meters.
    pub heading_period: f64,
    pub seed: u64,
    /// 1 (front) or 3 (front, left, right).
    pub cameras: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    pub mount_height: f64,
    /// Per-component descriptor noise sigma.
    pub noise: f64,
    /// Probability that an unreliable landmark shows a fresh random descriptor.
    pub drop_rate: f64,
    /// Per-component amplitude of the background pattern.
    pub background: f64,
    pub splat: SplatMode,
    /// Mapping trial offset from the query trajectory, along track.
    pub map_offset_along: f64,
    /// Mapping trial offset, to the left of the track.
    pub map_offset_lateral: f64,
    /// Prior perturbation bounds.
    pub prior_dx: f64,
    pub prior_dy: f64,
    pub prior_dpsi_deg: f64,
    /// Odometry noise sigmas for dead-reckoned priors.
    pub motion_noise_xy: f64,
    pub motion_noise_psi_deg: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            landmarks: 500,
            frames: 100,
            frame_spacing: 1.0,
            frame_interval: 0.1,
            stable_fraction: 1.0,
            unreliable_reliability: 0.2,
            corridor_radius: 15.0,
            corridor_clearance: 3.0,
            min_height: 0.0,
            max_height: 6.0,
            lookahead: 60.0,
            heading_amplitude_deg: 15.0,
            heading_period: 80.0,
            seed: 1,
            cameras: 1,
            image_width: 640,
            image_height: 480,
            focal: 400.0,
            mount_height: 1.5,
            noise: 0.0,
            drop_rate: 0.0,
            background: 0.05,
            splat: SplatMode::BilinearSupport,
            map_offset_along: 0.5,
            map_offset_lateral: 0.3,
            prior_dx: 1.0,
            prior_dy: 1.0,
            prior_dpsi_deg: 2.0,
            motion_noise_xy: 0.0,
            motion_noise_psi_deg: 0.0,
        }
    }
}

/// How a landmark descriptor is written into a dense level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplatMode {
    /// The single nearest cell.
    Nearest,
    /// The 2x2 cells surrounding the projection, so that bilinear sampling
    /// anywhere inside them returns the descriptor unchanged.
    BilinearSupport,
}

impl std::str::FromStr for SplatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(SplatMode::Nearest),
            "bilinear_support" => Ok(SplatMode::BilinearSupport),
            _ => Err(Error::Config(format!("unknown splat mode {s:?}"))),
        }
    }
}

impl WorldSpec {
    /// Parse `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            spec.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        match key {
            "landmarks" => self.landmarks = num(value)?,
            "frames" => self.frames = num(value)?,
            "frame_spacing" => self.frame_spacing = num(value)?,
            "frame_interval" => self.frame_interval = num(value)?,
            "stable_fraction" => self.stable_fraction = num(value)?,
            "unreliable_reliability" => self.unreliable_reliability = num(value)?,
            "corridor_radius" => self.corridor_radius = num(value)?,
            "corridor_clearance" => self.corridor_clearance = num(value)?,
            "min_height" => self.min_height = num(value)?,
            "max_height" => self.max_height = num(value)?,
            "lookahead" => self.lookahead = num(value)?,
            "heading_amplitude_deg" => self.heading_amplitude_deg = num(value)?,
            "heading_period" => self.heading_period = num(value)?,
            "seed" => self.seed = num(value)?,
            "cameras" => self.cameras = num(value)?,
            "image_width" => self.image_width = num(value)?,
            "image_height" => self.image_height = num(value)?,
            "focal" => self.focal = num(value)?,
            "mount_height" => self.mount_height = num(value)?,
            "noise" => self.noise = num(value)?,
            "drop_rate" => self.drop_rate = num(value)?,
            "background" => self.background = num(value)?,
            "splat" => self.splat = value.parse().map_err(|e: Error| e.to_string())?,
            "map_offset_along" => self.map_offset_along = num(value)?,
            "map_offset_lateral" => self.map_offset_lateral = num(value)?,
            "prior_dx" => self.prior_dx = num(value)?,
            "prior_dy" => self.prior_dy = num(value)?,
            "prior_dpsi_deg" => self.prior_dpsi_deg = num(value)?,
            "motion_noise_xy" => self.motion_noise_xy = num(value)?,
            "motion_noise_psi_deg" => self.motion_noise_psi_deg = num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Serialize as spec-file text accepted by [`WorldSpec::parse`].
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("spec serializes");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.landmarks == 0 || self.frames == 0 {
            return fail("landmark and frame counts must be at least 1".into());
        }
        if !(self.frame_spacing > 0.0 && self.frame_interval > 0.0) {
            return fail("frame spacing and interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.stable_fraction) || !(0.0..=1.0).contains(&self.unreliable_reliability) {
            return fail("stable_fraction and unreliable_reliability must lie in [0, 1]".into());
        }
        if !(self.corridor_clearance >= 0.0 && self.corridor_radius > self.corridor_clearance) {
            return fail("corridor needs 0 <= clearance < radius".into());
        }
        if !(self.max_height >= self.min_height) {
            return fail("max_height below min_height".into());
        }
        if !(self.heading_period > 0.0 && self.lookahead >= 0.0) {
            return fail("heading_period must be positive and lookahead non-negative".into());
        }
        if self.cameras != 1 && self.cameras != 3 {
            return fail(format!("cameras = {} (supported: 1 or 3)", self.cameras));
        }
        if !(self.noise >= 0.0 && self.background >= 0.0 && (0.0..=1.0).contains(&self.drop_rate)) {
            return fail("noise and background must be non-negative, drop_rate in [0, 1]".into());
        }
        if !(self.prior_dx >= 0.0 && self.prior_dy >= 0.0 && self.prior_dpsi_deg >= 0.0) {
            return fail("prior bounds must be non-negative".into());
        }
        if !(self.motion_noise_xy >= 0.0 && self.motion_noise_psi_deg >= 0.0) {
            return fail("motion noise must be non-negative".into());
        }
        self.camera_models().map(|_| ())
    }

    pub fn camera_models(&self) -> Result<Vec<CameraModel>> {
        let yaws: &[f64] = if self.cameras == 3 { &[0.0, 50.0, -50.0] } else { &[0.0] };
        yaws.iter()
            .map(|yaw| {
                CameraModel::new(
                    self.focal,
                    self.focal,
                    f64::from(self.image_width) / 2.0,
                    f64::from(self.image_height) / 2.0,
                    self.image_width,
                    self.image_height,
                    CameraModel::forward_extrinsic(self.mount_height, yaw.to_radians()),
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub position: Point3,
    /// Unit norm.
    pub descriptor: [f32; DESCRIPTOR_DIM],
    /// 1 for stable landmarks, lower for distractors.
    pub reliability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub landmarks: Vec<Landmark>,
    /// Query trial ground truth, one pose per frame.
    pub trajectory: Vec<Pose3>,
    pub timestamps: Vec<f64>,
    /// Mapping trial poses, one per frame.
    pub map_trajectory: Vec<Pose3>,
    pub cameras: Vec<CameraModel>,
    /// Densely sampled centreline `(x, y)` covering the whole corridor.
    pub centerline: Vec<[f64; 2]>,
}

const CENTERLINE_STEP: f64 = 0.25;
const CORRIDOR_LOOKBEHIND: f64 = 10.0;

/// Derive an independent stream seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(a ^ b.rotate_left(29).wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

fn random_unit(rng: &mut impl Rng) -> [f32; DESCRIPTOR_DIM] {
    loop {
        let v: [f64; DESCRIPTOR_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.map(|x| (x / n) as f32);
        }
    }
}

/// Centreline samples `(x, y, heading)` at arc lengths `s0, s0 + step, ...`,
/// with the heading oscillating sinusoidally and `(0, 0)` at `s = 0`.
fn centerline(spec: &WorldSpec, s0: f64, s1: f64) -> Vec<(f64, f64, f64, f64)> {
    let amp = spec.heading_amplitude_deg.to_radians();
    let heading = |s: f64| amp * (std::f64::consts::TAU * s / spec.heading_period).sin();
    // integrate forward from s = 0 and backward to s0 with the midpoint rule
    let integrate = |from: f64, to: f64| -> Vec<(f64, f64, f64, f64)> {
        let steps = ((to - from).abs() / CENTERLINE_STEP).round() as usize;
        let ds = if to >= from { CENTERLINE_STEP } else { -CENTERLINE_STEP };
        let (mut x, mut y, mut s) = (0.0, 0.0, from);
        let mut pts = vec![(s, x, y, heading(s))];
        for _ in 0..steps {
            let h = heading(s + ds / 2.0);
            x += ds * h.cos();
            y += ds * h.sin();
            s += ds;
            pts.push((s, x, y, heading(s)));
        }
        pts
    };
    let mut back = integrate(0.0, s0);
    back.reverse();
    back.pop();
    let mut pts = back;
    pts.extend(integrate(0.0, s1));
    pts
}

fn pose_at(line: &[(f64, f64, f64, f64)], s: f64, lateral: f64) -> Pose3 {
    let s0 = line[0].0;
    let i = (((s - s0) / CENTERLINE_STEP).floor() as usize).min(line.len() - 2);
    let (sa, xa, ya, _) = line[i];
    let (_, xb, yb, _) = line[i + 1];
    let t = (s - sa) / CENTERLINE_STEP;
    let (x, y) = (xa + t * (xb - xa), ya + t * (yb - ya));
    let h = (yb - ya).atan2(xb - xa);
    let (sn, cs) = h.sin_cos();
    Pose3::from_xyz_yaw(x - sn * lateral, y + cs * lateral, 0.0, h)
}

/// Generate landmarks, query and mapping trajectories and cameras.
pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let length = (spec.frames - 1) as f64 * spec.frame_spacing;
    let s_start = -CORRIDOR_LOOKBEHIND;
    let s_end = length + spec.lookahead + spec.map_offset_along.abs() + 1.0;
    let line = centerline(spec, s_start, s_end);

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x1A4D));
    let n_stable = (spec.stable_fraction * spec.landmarks as f64).round() as usize;
    let landmarks = (0..spec.landmarks)
        .map(|i| {
            let s = rng.random_range(s_start..s_end);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let lateral = side * rng.random_range(spec.corridor_clearance..=spec.corridor_radius);
            let height = if spec.max_height > spec.min_height {
                rng.random_range(spec.min_height..=spec.max_height)
            } else {
                spec.min_height
            };
            let p = pose_at(&line, s, lateral).position;
            Landmark {
                position: Point3::new(p.x, p.y, height),
                descriptor: random_unit(&mut rng),
                reliability: if i < n_stable { 1.0 } else { spec.unreliable_reliability },
            }
        })
        .collect();

    let trajectory: Vec<Pose3> = (0..spec.frames)
        .map(|t| pose_at(&line, t as f64 * spec.frame_spacing, 0.0))
        .collect();
    let map_trajectory = (0..spec.frames)
        .map(|t| pose_at(&line, t as f64 * spec.frame_spacing + spec.map_offset_along, spec.map_offset_lateral))
        .collect();
    Ok(SyntheticWorld {
        spec: spec.clone(),
        landmarks,
        trajectory,
        timestamps: (0..spec.frames).map(|t| t as f64 * spec.frame_interval).collect(),
        map_trajectory,
        cameras: spec.camera_models()?,
        centerline: line.iter().map(|&(_, x, y, _)| [x, y]).collect(),
    })
}

impl SyntheticWorld {
    /// Horizontal distance from a point to the centreline polyline.
    pub fn distance_to_centerline(&self, p: &Point3) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((p.x - a[0]) * dx + (p.y - a[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p.x - a[0] - t * dx).hypot(p.y - a[1] - t * dy)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Appearance settings for one rendered view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub noise: f64,
    pub drop_rate: f64,
    pub background: f64,
    pub splat: SplatMode,
    /// Seeds the per-view noise and drop decisions.
    pub seed: u64,
}

impl RenderConfig {
    pub fn from_spec(spec: &WorldSpec, seed: u64) -> Self {
        Self {
            noise: spec.noise,
            drop_rate: spec.drop_rate,
            background: spec.background,
            splat: spec.splat,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub pyramid: FeaturePyramid,
    /// Landmarks that own their cells on the finest level, at their exact
    /// image projections.
    pub depth_points: Vec<DepthPoint>,
}

fn splat_cells(mode: SplatMode, u: f64, v: f64, w: usize, h: usize) -> Vec<(usize, usize)> {
    match mode {
        SplatMode::Nearest => {
            let cu = (u.round() as usize).min(w - 1);
            let cv = (v.round() as usize).min(h - 1);
            vec![(cu, cv)]
        }
        SplatMode::BilinearSupport => {
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let mut cells = Vec::with_capacity(4);
            for cv in v0..=v0 + 1 {
                for cu in u0..=u0 + 1 {
                    if cu < w && cv < h {
                        cells.push((cu, cv));
                    }
                }
            }
            cells
        }
    }
}

/// Render the dense descriptor pyramid seen by `camera` at vehicle pose `pose`.
///
/// Nearer landmarks overwrite farther ones. Heatmap cells of a landmark hold
/// its reliability; all other cells are 0.
pub fn render_view(world: &SyntheticWorld, pose: &Pose3, camera: &CameraModel, cfg: &RenderConfig) -> Result<RenderedView> {
    if !pose.is_valid() {
        return Err(Error::Config("render pose is not valid".into()));
    }
    let proj = Projector::new(pose, camera);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(world.spec.seed, cfg.seed));
    // (landmark index, u, v, depth, descriptor)
    let mut visible: Vec<(usize, f64, f64, f64, [f32; DESCRIPTOR_DIM])> = Vec::new();
    for (i, lm) in world.landmarks.iter().enumerate() {
        let Some(p) = proj.project(&lm.position) else {
            continue;
        };
        let mut d = lm.descriptor;
        if lm.reliability < 1.0 && cfg.drop_rate > 0.0 && rng.random::<f64>() < cfg.drop_rate {
            d = random_unit(&mut rng);
        }
        if cfg.noise > 0.0 {
            for x in &mut d {
                *x += (cfg.noise * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        visible.push((i, p.u, p.v, p.depth, d));
    }
    // far to near; ties by index keep the order deterministic
    visible.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)));

    let mut pyramid = FeaturePyramid::zeros(camera.width, camera.height);
    let mut owns_finest = vec![true; visible.len()];
    for (li, level) in pyramid.levels_mut().iter_mut().enumerate() {
        let s = level.scale();
        let (w, h) = (level.width(), level.height());
        let mut bg = ChaCha8Rng::seed_from_u64(mix_seed(world.spec.seed ^ 0xB6, u64::from(s)));
        for v in 0..h {
            for u in 0..w {
                for x in level.descriptor_mut(u, v) {
                    *x = (cfg.background * bg.random_range(-1.0..=1.0)) as f32;
                }
            }
        }
        let mut owner = vec![usize::MAX; w * h];
        let sf = f64::from(s);
        for (vi, &(_, u, v, _, d)) in visible.iter().enumerate() {
            let (lu, lv) = (u / sf, v / sf);
            if lu > (w - 1) as f64 || lv > (h - 1) as f64 {
                continue;
            }
            let reliability = world.landmarks[visible[vi].0].reliability as f32;
            for (cu, cv) in splat_cells(cfg.splat, lu, lv, w, h) {
                level.descriptor_mut(cu, cv).copy_from_slice(&d);
                level.set_heat(cu, cv, reliability);
                owner[cv * w + cu] = vi;
            }
        }
        if li == 0 {
            for (vi, &(_, u, v, _, _)) in visible.iter().enumerate() {
                let (lu, lv) = (u / sf, v / sf);
                owns_finest[vi] = lu <= (w - 1) as f64
                    && lv <= (h - 1) as f64
                    && splat_cells(cfg.splat, lu, lv, w, h)
                        .iter()
                        .all(|&(cu, cv)| owner[cv * w + cu] == vi);
            }
        }
    }
    let mut depth_points: Vec<(usize, DepthPoint)> = visible
        .iter()
        .zip(&owns_finest)
        .filter(|(_, own)| **own)
        .map(|(&(i, u, v, _, _), _)| {
            (
                i,
                DepthPoint {
                    u,
                    v,
                    world: world.landmarks[i].position,
                },
            )
        })
        .collect();
    depth_points.sort_by_key(|(i, _)| *i);
    Ok(RenderedView {
        pyramid,
        depth_points: depth_points.into_iter().map(|(_, p)| p).collect(),
    })
}

/// Uniform random offset within `[-max, max]` per component.
pub fn random_offset(max_dx: f64, max_dy: f64, max_dpsi: f64, seed: u64) -> PoseSE2Offset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let dx = draw(max_dx);
    let dy = draw(max_dy);
    let dpsi = draw(max_dpsi);
    PoseSE2Offset::new(dx, dy, dpsi)
}

/// Perturb `pose` by a uniform random offset within the bounds.
pub fn perturb_pose(pose: &Pose3, max_dx: f64, max_dy: f64, max_dpsi: f64, seed: u64) -> Pose3 {
    apply_offset(pose, &random_offset(max_dx, max_dy, max_dpsi, seed))
}

const MAP_STREAM: u64 = 0x4D41_5000;
const QUERY_STREAM: u64 = 0x5155_4500;
const PRIOR_STREAM: u64 = 0x5052_4900;
const MOTION_STREAM: u64 = 0x4D4F_5400;

/// Mapping frames rendered along the mapping trial.
pub fn mapping_frames(world: &SyntheticWorld) -> Result<Vec<MappingFrame>> {
    (0..world.spec.frames)
        .map(|t| {
            let pose = world.map_trajectory[t];
            let mut views = Vec::new();
            let mut depth = Vec::new();
            for (ci, cam) in world.cameras.iter().enumerate() {
                let cfg = RenderConfig::from_spec(&world.spec, mix_seed(MAP_STREAM, (t * 8 + ci) as u64));
                let r = render_view(world, &pose, cam, &cfg)?;
                views.push(CameraView {
                    camera_id: ci as u16,
                    camera: *cam,
                    pyramid: r.pyramid,
                });
                depth.push(r.depth_points);
            }
            Ok(MappingFrame {
                frame: FrameInput {
                    timestamp: world.timestamps[t],
                    views,
                    incremental_motion: PoseSE2Offset::zero(),
                },
                ground_truth: pose,
                depth_points: depth,
            })
        })
        .collect()
}

/// Query frames rendered along the ground-truth trajectory, with
/// incremental motion from consecutive ground-truth poses plus odometry noise.
pub fn query_frames(world: &SyntheticWorld) -> Result<Vec<FrameInput>> {
    let spec = &world.spec;
    let mut motion_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, MOTION_STREAM));
    (0..spec.frames)
        .map(|t| {
            let pose = world.trajectory[t];
            let views = world
                .cameras
                .iter()
                .enumerate()
                .map(|(ci, cam)| {
                    let cfg = RenderConfig::from_spec(spec, mix_seed(QUERY_STREAM, (t * 8 + ci) as u64));
                    Ok(CameraView {
                        camera_id: ci as u16,
                        camera: *cam,
                        pyramid: render_view(world, &pose, cam, &cfg)?.pyramid,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut motion = if t == 0 {
                PoseSE2Offset::zero()
            } else {
                PoseSE2Offset::between(&world.trajectory[t - 1], &pose)
            };
            if t > 0 {
                let mut n = |sigma: f64| sigma * motion_rng.sample::<f64, _>(StandardNormal);
                motion = PoseSE2Offset::new(
                    motion.dx + n(spec.motion_noise_xy),
                    motion.dy + n(spec.motion_noise_xy),
                    motion.dpsi + n(spec.motion_noise_psi_deg.to_radians()),
                );
            }
            Ok(FrameInput {
                timestamp: world.timestamps[t],
                views,
                incremental_motion: motion,
            })
        })
        .collect()
}

/// How priors are formed in the closed-loop benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Each frame's prior is its ground truth perturbed independently within the spec bounds.
    #[default]
    Perturbed,
    /// The first prior is perturbed; later priors are dead-reckoned from the previous estimate.
    DeadReckoning,
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkConfig {
    pub spec: WorldSpec,
    pub map: MapConfig,
    pub localizer: LocalizerConfig,
    pub prior_mode: PriorMode,
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub records: Vec<ErrorRecord>,
    pub results: Vec<LocalizationResult>,
    pub summary: MetricsSummary,
    pub ground_truth: Vec<Pose3>,
    pub mean_frame_ms: f64,
    pub max_frame_ms: f64,
}

/// Rendered benchmark inputs, reusable across localizer settings.
pub struct BenchmarkScene {
    pub world: SyntheticWorld,
    pub mapping: Vec<MappingFrame>,
    pub queries: Vec<FrameInput>,
}

impl BenchmarkScene {
    pub fn new(spec: &WorldSpec) -> Result<Self> {
        let world = generate_world(spec)?;
        let mapping = mapping_frames(&world)?;
        let queries = query_frames(&world)?;
        Ok(Self { world, mapping, queries })
    }

    pub fn priors(&self) -> Vec<Pose3> {
        let s = &self.world.spec;
        self.world
            .trajectory
            .iter()
            .enumerate()
            .map(|(t, gt)| {
                perturb_pose(
                    gt,
                    s.prior_dx,
                    s.prior_dy,
                    s.prior_dpsi_deg.to_radians(),
                    mix_seed(mix_seed(s.seed, PRIOR_STREAM), t as u64),
                )
            })
            .collect()
    }

    /// Localize every query frame against `db`.
    pub fn evaluate(&self, db: &MapDatabase, localizer: &LocalizerConfig, mode: PriorMode) -> Result<BenchmarkReport> {
        let priors = self.priors();
        let results = match mode {
            PriorMode::Perturbed => self
                .queries
                .iter()
                .zip(&priors)
                .map(|(f, p)| localize_frame(f, p, db, localizer))
                .collect(),
            PriorMode::DeadReckoning => run_sequence(&self.queries, &priors[0], db, localizer)?,
        };
        let records: Vec<ErrorRecord> = results
            .iter()
            .zip(&self.world.trajectory)
            .map(|(r, gt)| {
                if r.available {
                    ErrorRecord {
                        timestamp: r.timestamp,
                        ..decompose_error(&r.estimated_pose, gt)
                    }
                } else {
                    ErrorRecord::unavailable(r.timestamp)
                }
            })
            .collect();
        let times: Vec<f64> = results.iter().map(|r| r.timing.total_ms).collect();
        Ok(BenchmarkReport {
            summary: summarize(&records)?,
            records,
            mean_frame_ms: times.iter().sum::<f64>() / times.len() as f64,
            max_frame_ms: times.iter().fold(0.0, |m, t| m.max(*t)),
            results,
            ground_truth: self.world.trajectory.clone(),
        })
    }
}

/// Generate a world, build its map and localize the query trial.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let scene = BenchmarkScene::new(&cfg.spec)?;
    let db = generate_map(&scene.mapping, &cfg.map)?;
    scene.evaluate(&db, &cfg.localizer, cfg.prior_mode)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub strategy: SelectionStrategy,
    pub marginalization: Marginalization,
    pub summary: MetricsSummary,
    pub mean_frame_ms: f64,
}

/// Selection strategy x marginalization grid on one scene:
/// FPS+Reduce, FPS+Weighted, WFPS+Reduce, WFPS+Weighted.
pub fn run_ablation(cfg: &BenchmarkConfig) -> Result<Vec<AblationRow>> {
    let start = Instant::now();
    let scene = BenchmarkScene::new(&cfg.spec)?;
    let mut rows = Vec::with_capacity(4);
    for strategy in [SelectionStrategy::Fps, SelectionStrategy::Wfps] {
        let mut map = cfg.map.clone();
        map.selection.strategy = strategy;
        let db = generate_map(&scene.mapping, &map)?;
        for marginalization in [Marginalization::ReduceAverage, Marginalization::WeightedAverage] {
            let localizer = LocalizerConfig {
                marginalization,
                ..cfg.localizer.clone()
            };
            let report = scene.evaluate(&db, &localizer, cfg.prior_mode)?;
            rows.push(AblationRow {
                strategy,
                marginalization,
                summary: report.summary,
                mean_frame_ms: report.mean_frame_ms,
            });
        }
    }
    log::debug!("ablation took {:.1} s", start.elapsed().as_secs_f64());
    Ok(rows)
}
